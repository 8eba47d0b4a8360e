"""Shared setup for the demo scripts.

Builds a small pipeline (corpus -> scorer -> filter -> codec -> base model
-> adapter) once and caches it under demos/_artifacts so each demo script
can run on its own in a few minutes on a laptop CPU.
"""

from __future__ import annotations

import json
from pathlib import Path

ARTIFACTS = Path(__file__).resolve().parent / "_artifacts"

BUDGET = {
    "corpus_records": 160,
    "scorer_steps": 450,
    "codec_steps": 600,
    "base_steps": 1200,
    "adapter_steps": 300,
    "feature_steps": 200,
}


def ensure_corpus():
    from artlab import synthetic

    manifest = ARTIFACTS / "corpus" / "manifest.jsonl"
    labels = ARTIFACTS / "corpus" / "labels.json"
    if not manifest.exists():
        print("[setup] building synthetic corpus ...")
        synthetic.build_corpus(ARTIFACTS / "corpus", n_records=BUDGET["corpus_records"],
                               art_fraction=0.2, seed=0)
    return manifest, labels


def ensure_filtered():
    from artlab.corpus import FilterConfig, run_filter_pipeline
    from artlab.scoring import calibrate_thresholds, load_scorer, save_scorer, train_scorer

    manifest, labels_path = ensure_corpus()
    filtered = ARTIFACTS / "corpus" / "manifest.filtered.jsonl"
    scorer_path = ARTIFACTS / "scorer.pt"
    if not filtered.exists():
        print("[setup] training image-text scorer + filtering ...")
        scorer = train_scorer(manifest, steps=BUDGET["scorer_steps"], seed=0)
        save_scorer(scorer, scorer_path)
        labels = json.loads(labels_path.read_text())
        concepts = ["painting", "stamp", "logo", "sketch"]
        thresholds = calibrate_thresholds(scorer, manifest, labels, concepts)
        config = FilterConfig(image_concepts=concepts, per_concept_threshold=thresholds)
        run_filter_pipeline(manifest, config, scorer, manifest_out=filtered,
                            stats_path=ARTIFACTS / "filter_stats.json")
        (ARTIFACTS / "filter_config.json").write_text(
            json.dumps(config.to_dict(), indent=1, sort_keys=True))
    return filtered, scorer_path


def ensure_base_model():
    from artlab.codec import CodecConfig, load_codec, train_codec
    from artlab.diffusion import BaseModel, BaseTrainConfig, train_base
    from artlab.fileio import read_jsonl
    from artlab.text import TextEncoder
    from artlab.unet import UNetConfig

    filtered, _ = ensure_filtered()
    base_path = ARTIFACTS / "base.pt"
    if not base_path.exists():
        print("[setup] training codec ...")
        codec, codec_metrics = train_codec(
            filtered, CodecConfig(image_size=32, latent_channels=4, downsample=2, hidden=48),
            steps=BUDGET["codec_steps"], checkpoint_path=ARTIFACTS / "codec.pt",
        )
        print(f"[setup] codec holdout PSNR: {codec_metrics['holdout_psnr']:.1f} dB")
        captions = [r["caption"] for r in read_jsonl(ensure_corpus()[0])]
        text_encoder = TextEncoder.from_captions(captions, embed_dim=64)
        print(f"[setup] training base model ({BUDGET['base_steps']} steps) ...")
        model, metrics = train_base(
            filtered, codec, text_encoder,
            UNetConfig(in_channels=4, base_channels=32, channel_mults=(1, 2), text_dim=64),
            BaseTrainConfig(steps=BUDGET["base_steps"], batch_size=16),
            checkpoint_path=base_path, log_path=ARTIFACTS / "train_log.jsonl",
        )
        print(f"[setup] base val-loss curve: {[round(v, 4) for v in metrics['val_curve']]}")
    from artlab.diffusion import BaseModel

    return BaseModel.load(base_path)


def ensure_exemplars():
    from artlab import synthetic

    ex_dir = ARTIFACTS / "exemplars"
    if not (ex_dir / "captions.json").exists():
        print("[setup] building style exemplars (posterized palette) ...")
        synthetic.build_style_exemplars(ex_dir, n_exemplars=15, seed=100)
    return ex_dir


def ensure_adapter(model=None):
    from artlab.adapter import AdapterTrainConfig, StyleExemplarSet, train_adapter

    adapter_path = ARTIFACTS / "adapter.pt"
    if not adapter_path.exists():
        model = model or ensure_base_model()
        exemplars = StyleExemplarSet.from_directory(ensure_exemplars())
        print(f"[setup] training style adapter ({BUDGET['adapter_steps']} steps) ...")
        bundle, _ = train_adapter(
            exemplars, model,
            AdapterTrainConfig(steps=BUDGET["adapter_steps"], w=50.0),
            checkpoint_path=adapter_path,
        )
        bundle.detach()
    return adapter_path


def ensure_features():
    from artlab import synthetic
    from artlab.evaluation import save_feature_stack, train_feature_stack
    from artlab.fileio import read_jsonl

    features_path = ARTIFACTS / "features.pt"
    if not features_path.exists():
        manifest, _ = ensure_corpus()
        print("[setup] training feature stack ...")
        root = manifest.parent
        images = [synthetic.load_image(root / r["image_path"])
                  for r in read_jsonl(manifest)]
        save_feature_stack(train_feature_stack(images, steps=BUDGET["feature_steps"]),
                           features_path)
    return features_path
