"""Which training images shaped a generated artwork?

Indexes both corpora (the filtered natural corpus and the style exemplars),
generates an image in the learned style, and ranks training images by
influence with both substitute methods: content-feature similarity and
gradient dot products over the adapter's host layers.
"""

import json

from common import ARTIFACTS, ensure_adapter, ensure_base_model, ensure_exemplars, \
    ensure_features, ensure_filtered

from artlab.adapter import StyleExemplarSet, load_adapter
from artlab.attribution import CorpusIndex, attribute, build_index
from artlab.evaluation import load_feature_stack
from artlab.fileio import read_jsonl, write_jsonl
from artlab.inference import InjectionPolicy, generate, render_grid
from artlab import synthetic

print("=" * 70)
print("Training-data attribution")
print("=" * 70)

model = ensure_base_model()
bundle = load_adapter(model, ensure_adapter(model))
features = load_feature_stack(ensure_features())
filtered, _ = ensure_filtered()
ex_dir = ensure_exemplars()

# The exemplar directory needs a manifest to act as a corpus.
captions = json.loads((ex_dir / "captions.json").read_text())
ex_manifest = ARTIFACTS / "exemplars.jsonl"
write_jsonl(ex_manifest, [
    {"id": name.split(".")[0], "image_path": f"exemplars/{name}", "caption": cap,
     "split": "train"}
    for name, cap in sorted(captions.items())
])

print("\nBuilding feature indices ...")
nat_index = build_index(filtered, features, ARTIFACTS / "natural.alidx")
ex_index = build_index(ex_manifest, features, ARTIFACTS / "exemplar.alidx")
corpora = [
    CorpusIndex("natural-corpus", str(filtered), str(nat_index)),
    CorpusIndex("exemplar-set", str(ex_manifest), str(ex_index)),
]

prompt = "a wide desert with dunes under a sunset sky"
result = generate(model, bundle, prompt,
                  policy=InjectionPolicy(t_start=model.T, scale=1.0),
                  guidance_scale=7.5, seed=4, steps=30)
print(f"\nGenerated a styled image for: {prompt!r}")

for method in ("feature-similarity", "gradient-influence"):
    ranked = attribute(result.image, result.manifest, corpora, method=method, k=5,
                       feature_extractor=features, model=model)
    print(f"\ntop-5 by {method}:")
    for item in ranked.items:
        print(f"  {item.source:<16} {item.image_id:<12} {item.score:+.4f}")

# --- Panel for the feature-similarity ranking. ---
ranked = attribute(result.image, result.manifest, corpora, k=5,
                   feature_extractor=features)
by_source = {c.source: (read_jsonl(c.manifest_path),
                        __import__("pathlib").Path(c.manifest_path).parent)
             for c in corpora}
images, labels = [result.image], ["generated"]
for item in ranked.items:
    records, root = by_source[item.source]
    rec = next(r for r in records if str(r["id"]) == item.image_id)
    images.append(synthetic.load_image(root / rec["image_path"]))
    labels.append(f"{item.source[:4]} {item.score:+.2f}")
panel = ARTIFACTS / "attribution_panel.png"
render_grid(images, labels, out_path=panel, columns=6)
print(f"\nWrote the attribution panel to {panel}")
bundle.detach()
