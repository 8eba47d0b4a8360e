"""Quantify it: style score, content score, text alignment, and FID.

All metrics run on small local substitutes (Gram statistics of a trained
conv stack, its pooled deepest layer, and the corpus filter's joint
scorer), so numbers are comparable only within this embedder fingerprint.
The benchmark emits one row per adapter with the base model as reference.
"""

from common import ARTIFACTS, ensure_adapter, ensure_base_model, ensure_exemplars, \
    ensure_features, ensure_filtered

from artlab.adapter import StyleExemplarSet
from artlab.evaluation import (
    BenchmarkAdapter,
    BenchmarkConfig,
    fid,
    load_feature_stack,
    render_report_table,
    run_benchmark,
    style_score,
)
from artlab.fileio import read_jsonl
from artlab.scoring import load_scorer
from artlab import synthetic

print("=" * 70)
print("Evaluation harness")
print("=" * 70)

model = ensure_base_model()
adapter_path = ensure_adapter(model)
features = load_feature_stack(ensure_features())
exemplars = StyleExemplarSet.from_directory(ensure_exemplars())
filtered, scorer_path = ensure_filtered()
scorer = load_scorer(scorer_path)

# --- Metric sanity on known inputs. ---
img = exemplars.images[0]
print(f"\nstyle_score(image, itself) = {style_score([img], [img], features):.4f}")
root = filtered.parent
naturals = [synthetic.load_image(root / r['image_path'])
            for r in read_jsonl(filtered)[:30]]
print(f"style_score(naturals, exemplars) = "
      f"{style_score(naturals, exemplars, features):.4f}")
print(f"style_score(exemplars, exemplars) = "
      f"{style_score(exemplars.images, exemplars, features):.4f}")
same_split = fid(naturals[:15], naturals[15:], features)
vs_styled = fid(naturals[:15], [synthetic.posterize_palette(im) for im in naturals[15:]],
                features)
print(f"fid(naturals, naturals)  = {same_split:.4f}")
print(f"fid(naturals, posterized) = {vs_styled:.4f}  (style shift costs distance)")

# --- Benchmark: base model vs the style adapter. ---
prompts = [r["caption"] for r in read_jsonl(filtered)[:3]]
config = BenchmarkConfig(prompts=prompts, seeds=[0, 1], sampler_steps=20,
                         guidance_scale=7.5)
reports = run_benchmark(
    model,
    [BenchmarkAdapter(name="palette-style", adapter_path=str(adapter_path),
                      exemplars=exemplars)],
    config, style_embedder=features, joint_embedder=scorer,
)
print("\n" + render_report_table(reports))
print("\nEmbedder fingerprint (reports are only comparable within it):",
      reports[0].config_fingerprint[-16:])
