"""Two-stage art filtering of an image-caption corpus.

Builds a synthetic corpus with planted graphic art (paintings, stamps,
logos, sketches), some of it captioned honestly and some with content-only
captions, then shows the caption keyword stage and the image-embedding
stage removing it. Ends with a contamination audit against the hand labels.
"""

import json

from common import ARTIFACTS, ensure_corpus, ensure_filtered

from artlab import synthetic
from artlab.corpus import DEFAULT_CAPTION_EXCLUSION_TERMS, keyword_filter
from artlab.fileio import read_jsonl
from artlab.inference import render_grid

print("=" * 70)
print("Corpus filtering: caption keywords, then image-concept scores")
print("=" * 70)

manifest, labels_path = ensure_corpus()
filtered, _ = ensure_filtered()
labels = json.loads(labels_path.read_text())

# --- The keyword stage is a whole-token matcher, not substring search. ---
print("\nKeyword stage on a few captions:")
for caption in (
    "A painting of a dog on a wall",
    "A dog running on grass",
    "A lively party with balloons",   # "art" inside "party" must NOT match
    "an art deco lamp on a desk",
):
    verdict = keyword_filter(caption, DEFAULT_CAPTION_EXCLUSION_TERMS)
    tag = "accept" if verdict.accept else f"reject({verdict.term})"
    print(f"  {caption!r:<42} -> {tag}")

# --- Pipeline results. ---
stats = json.loads((ARTIFACTS / "filter_stats.json").read_text())
print("\nPipeline stats:")
for key, value in stats.items():
    print(f"  {key}: {value}")

kept = read_jsonl(filtered)
contamination = [r["id"] for r in kept if labels[r["id"]]["art"]]
total = len(read_jsonl(manifest))
print(f"\nHand-label audit: {len(contamination)} art records slipped through "
      f"out of {total} ({100 * len(contamination) / total:.1f}%)")

# --- A panel of what got rejected vs retained. ---
root = manifest.parent
records = read_jsonl(manifest)
kept_ids = {r["id"] for r in kept}
rejected = [r for r in records if r["id"] not in kept_ids][:4]
retained = [r for r in records if r["id"] in kept_ids][:4]
images, tags = [], []
for r in rejected + retained:
    images.append(synthetic.load_image(root / r["image_path"]))
    tags.append(("OUT " if r["id"] not in kept_ids else "IN  ") + labels[r["id"]]["kind"])
panel = ARTIFACTS / "filter_panel.png"
render_grid(images, tags, out_path=panel, columns=4)
print(f"\nWrote a rejected-vs-retained panel to {panel}")
