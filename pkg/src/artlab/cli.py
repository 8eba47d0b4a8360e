"""Command-line entry point binding the modules into reproducible runs.

Every artifact-producing command writes one run_manifest.json next to its
outputs recording the resolved config, seeds, input fingerprints, output
paths, tool version and wall clock. Exit codes: 0 success, 2 usage,
3 config/validation error, 4 other typed runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .errors import ArtlabError, ConfigError
from .fileio import load_config_file, read_jsonl, sha256_file

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_RUNTIME = 4


def _resolve_timestep(value: float, T: int) -> int:
    """Values strictly between 0 and 1 are fractions of T, otherwise timesteps."""
    if 0.0 < value < 1.0:
        return int(round(value * T))
    return int(round(value))


def _fingerprint_inputs(paths: dict[str, Path | str | None]) -> dict[str, str]:
    out = {}
    for name, path in paths.items():
        if path is None:
            continue
        path = Path(path)
        if path.is_file():
            out[name] = sha256_file(path)
    return out


def write_run_manifest(
    out_dir: Path,
    *,
    command: str,
    config: dict,
    seeds: dict,
    inputs: dict,
    outputs: list,
    started: float,
) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "input_fingerprints": _fingerprint_inputs(inputs),
        "output_paths": [str(p) for p in outputs],
        "tool_version": __version__,
        "wall_clock_s": time.time() - started,
    }
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _load_config(args) -> dict:
    if getattr(args, "config", None):
        return load_config_file(args.config)
    return {}


def _require(path_value, flag: str) -> Path:
    if not path_value:
        raise ConfigError(f"missing required field: {flag}")
    path = Path(path_value)
    if not path.exists():
        raise ConfigError(f"{flag}: no such file or directory: {path}")
    return path


def _out_dir(args) -> Path:
    return Path(args.out_dir or ".")


# ----------------------------------------------------------------------------
# Subcommand implementations


def cmd_filter(args) -> int:
    from .corpus import FilterConfig, run_filter_pipeline
    from .scoring import calibrate_thresholds, load_scorer, save_scorer, train_scorer

    started = time.time()
    config = _load_config(args)
    section = dict(config.get("filter", {}))
    manifest_in = _require(args.manifest, "--manifest")
    scorer_cfg = section.pop("scorer_train", {})
    calib_cfg = section.pop("calibration", {})
    filter_config = FilterConfig.from_dict(section)

    scorer_path = filter_config.scorer_path
    if args.dry_run:
        print(json.dumps({"filter": filter_config.to_dict()}, indent=1, sort_keys=True))
        return EXIT_OK

    if scorer_path and Path(scorer_path).exists():
        scorer = load_scorer(scorer_path)
    else:
        scorer = train_scorer(
            manifest_in,
            steps=int(scorer_cfg.get("steps", 400)),
            seed=int(scorer_cfg.get("seed", args.seed)),
            image_size=filter_config.image_size,
        )
        if scorer_path:
            save_scorer(scorer, scorer_path)

    missing = [c for c in filter_config.image_concepts
               if c not in filter_config.per_concept_threshold]
    if missing:
        labels_path = calib_cfg.get("labels_path")
        if not labels_path:
            raise ConfigError(
                f"no thresholds for concepts {missing} and no calibration.labels_path given"
            )
        labels = json.loads(Path(labels_path).read_text(encoding="utf-8"))
        thresholds = calibrate_thresholds(
            scorer, manifest_in, labels, missing,
            image_size=filter_config.image_size,
            fpr_weight=float(calib_cfg.get("fpr_weight", 2.0)),
        )
        filter_config.per_concept_threshold.update(thresholds)

    out_path = Path(args.out) if args.out else None
    stats_path = Path(args.stats) if args.stats else None
    manifest_out, stats = run_filter_pipeline(
        manifest_in, filter_config, scorer,
        manifest_out=out_path, stats_path=stats_path, quarantine_path=args.quarantine,
    )
    print(stats.render_table())
    write_run_manifest(
        manifest_out.parent, command="filter",
        config={"filter": filter_config.to_dict()},
        seeds={"scorer": int(scorer_cfg.get("seed", args.seed))},
        inputs={"manifest": manifest_in},
        outputs=[manifest_out] + ([stats_path] if stats_path else []),
        started=started,
    )
    return EXIT_OK


def cmd_train_codec(args) -> int:
    from .codec import CodecConfig, train_codec

    started = time.time()
    config = _load_config(args)
    manifest = _require(args.manifest, "--manifest")
    codec_cfg = CodecConfig(**config.get("codec", {}))
    train_cfg = dict(config.get("codec_train", {}))
    out_dir = _out_dir(args)
    if args.dry_run:
        print(json.dumps({"codec": codec_cfg.to_dict(), "codec_train": train_cfg},
                         indent=1, sort_keys=True))
        return EXIT_OK
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint = out_dir / "codec.pt"
    seed = int(train_cfg.pop("seed", args.seed))
    codec, metrics = train_codec(
        manifest, codec_cfg, seed=seed, checkpoint_path=checkpoint, **train_cfg
    )
    metrics_path = out_dir / "codec_metrics.json"
    metrics_path.write_text(json.dumps(metrics, indent=1, sort_keys=True), encoding="utf-8")
    print(f"holdout PSNR: {metrics['holdout_psnr']:.2f} dB")
    write_run_manifest(
        out_dir, command="train-codec",
        config={"codec": codec_cfg.to_dict(), "codec_train": {**train_cfg, "seed": seed}},
        seeds={"train": seed}, inputs={"manifest": manifest},
        outputs=[checkpoint, metrics_path], started=started,
    )
    return EXIT_OK


def cmd_train_base(args) -> int:
    from .codec import load_codec
    from .diffusion import BaseTrainConfig, train_base
    from .text import TextEncoder
    from .unet import UNetConfig

    started = time.time()
    config = _load_config(args)
    manifest = _require(args.manifest, "--manifest")
    codec_path = _require(args.codec, "--codec")
    text_cfg = dict(config.get("text", {}))
    unet_cfg_dict = dict(config.get("unet", {}))
    train_cfg_dict = dict(config.get("base_train", {}))
    out_dir = _out_dir(args)
    if args.dry_run:
        print(json.dumps({"text": text_cfg, "unet": unet_cfg_dict,
                          "base_train": train_cfg_dict}, indent=1, sort_keys=True))
        return EXIT_OK

    codec = load_codec(codec_path)
    if args.text_encoder:
        text_encoder = TextEncoder.load(args.text_encoder)
    else:
        captions = [r["caption"] for r in read_jsonl(manifest)]
        text_encoder = TextEncoder.from_captions(captions, **text_cfg)
    if "seed" not in train_cfg_dict:
        train_cfg_dict["seed"] = args.seed
    train_cfg = BaseTrainConfig(**train_cfg_dict)
    unet_cfg_dict.setdefault("in_channels", codec.config.latent_shape[0])
    unet_cfg_dict.setdefault("text_dim", text_encoder.config.embed_dim)
    unet_config = UNetConfig.from_dict(
        {**{"channel_mults": [1, 2]}, **unet_cfg_dict}
    )

    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint = out_dir / "base.pt"
    log_path = out_dir / "train_log.jsonl"
    model, metrics = train_base(
        manifest, codec, text_encoder, unet_config, train_cfg,
        checkpoint_path=checkpoint, log_path=log_path, sample_dir=out_dir / "samples",
    )
    print(f"final loss: {metrics['final_loss']}; val curve: {metrics['val_curve']}")
    write_run_manifest(
        out_dir, command="train-base",
        config={"text": text_cfg, "unet": unet_config.to_dict(),
                "base_train": train_cfg.__dict__},
        seeds={"train": train_cfg.seed},
        inputs={"manifest": manifest, "codec": codec_path},
        outputs=[checkpoint, log_path], started=started,
    )
    return EXIT_OK


def cmd_train_adapter(args) -> int:
    from .adapter import AdapterTrainConfig, StyleExemplarSet, train_adapter
    from .diffusion import BaseModel

    started = time.time()
    config = _load_config(args)
    base_path = _require(args.base, "--base")
    exemplars_dir = _require(args.exemplars, "--exemplars")
    adapter_cfg_dict = dict(config.get("adapter", {}))
    if "seed" not in adapter_cfg_dict:
        adapter_cfg_dict["seed"] = args.seed
    adapter_cfg = AdapterTrainConfig(**adapter_cfg_dict)
    out_dir = _out_dir(args)
    if args.dry_run:
        print(json.dumps({"adapter": adapter_cfg.to_dict()}, indent=1, sort_keys=True))
        return EXIT_OK

    model = BaseModel.load(base_path)
    exemplars = StyleExemplarSet.from_directory(
        exemplars_dir, image_size=model.codec.config.image_size
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint = out_dir / "adapter.pt"
    bundle, metadata = train_adapter(exemplars, model, adapter_cfg, checkpoint_path=checkpoint)
    bundle.detach()
    last = metadata["history"][-1] if metadata["history"] else {}
    print(f"adapter trained: {len(exemplars)} exemplars, final losses {last}")
    write_run_manifest(
        out_dir, command="train-adapter",
        config={"adapter": adapter_cfg.to_dict()},
        seeds={"train": adapter_cfg.seed},
        inputs={"base": base_path, "exemplars": exemplars_dir / "captions.json"},
        outputs=[checkpoint], started=started,
    )
    return EXIT_OK


def cmd_generate(args) -> int:
    from .adapter import load_adapter
    from .diffusion import BaseModel
    from .inference import InjectionPolicy, generate
    from .synthetic import save_image

    started = time.time()
    _load_config(args)
    base_path = _require(args.base, "--base")
    adapter_path = _require(args.adapter, "--adapter")
    if not args.prompt:
        raise ConfigError("missing required field: --prompt")
    out_dir = _out_dir(args)
    if args.dry_run:
        print(json.dumps({"prompt": args.prompt, "t_start": args.t_start,
                          "scale": args.scale, "seed": args.seed}, indent=1))
        return EXIT_OK

    model = BaseModel.load(base_path)
    bundle = load_adapter(model, adapter_path)
    policy = InjectionPolicy(
        t_start=_resolve_timestep(args.t_start, model.T), scale=args.scale,
        inactive_conditioning=args.inactive_conditioning,
    )
    result = generate(
        model, bundle, args.prompt, policy=policy,
        guidance_scale=args.guidance, seed=args.seed, steps=args.steps,
    )
    out_path = Path(args.out) if args.out else out_dir / f"generate_seed{args.seed}.png"
    save_image(result.image, out_path)
    print(f"wrote {out_path}")
    write_run_manifest(
        out_dir, command="generate", config=result.manifest,
        seeds={"sample": args.seed},
        inputs={"base": base_path, "adapter": adapter_path},
        outputs=[out_path], started=started,
    )
    return EXIT_OK


def cmd_stylize(args) -> int:
    from .adapter import load_adapter
    from .diffusion import BaseModel
    from .inference import InjectionPolicy, stylize
    from .synthetic import load_image, save_image

    started = time.time()
    _load_config(args)
    base_path = _require(args.base, "--base")
    adapter_path = _require(args.adapter, "--adapter")
    image_path = _require(args.image, "--image")
    if not args.prompt:
        raise ConfigError("missing required field: --prompt")
    out_dir = _out_dir(args)
    if args.dry_run:
        print(json.dumps({"image": str(image_path), "prompt": args.prompt,
                          "invert_to": args.invert_to}, indent=1))
        return EXIT_OK

    model = BaseModel.load(base_path)
    bundle = load_adapter(model, adapter_path)
    image = load_image(image_path, size=model.codec.config.image_size)
    policy = InjectionPolicy(
        t_start=_resolve_timestep(args.t_start, model.T), scale=args.scale,
        inactive_conditioning=args.inactive_conditioning,
    )
    result = stylize(
        model, bundle, image, args.prompt,
        invert_to=_resolve_timestep(args.invert_to, model.T),
        policy=policy, guidance_scale=args.guidance, steps=args.steps,
    )
    out_path = Path(args.out) if args.out else out_dir / "stylized.png"
    save_image(result.image, out_path)
    print(f"wrote {out_path}")
    write_run_manifest(
        out_dir, command="stylize", config=result.manifest,
        seeds={"sample": args.seed},
        inputs={"base": base_path, "adapter": adapter_path, "image": image_path},
        outputs=[out_path], started=started,
    )
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .adapter import StyleExemplarSet
    from .diffusion import BaseModel
    from .evaluation import (
        BenchmarkAdapter,
        BenchmarkConfig,
        load_feature_stack,
        render_report_table,
        run_benchmark,
    )
    from .scoring import load_scorer

    started = time.time()
    config = _load_config(args)
    base_path = _require(args.base, "--base")
    section = dict(config.get("benchmark", {}))
    out_dir = _out_dir(args)
    if args.dry_run:
        print(json.dumps({"benchmark": section}, indent=1, sort_keys=True, default=str))
        return EXIT_OK

    model = BaseModel.load(base_path)
    features = load_feature_stack(_require(section.get("features_path"), "benchmark.features_path"))
    scorer = load_scorer(_require(section.get("scorer_path"), "benchmark.scorer_path"))
    adapters = []
    for entry in section.get("adapters", []):
        exemplars = StyleExemplarSet.from_directory(
            entry["exemplars_dir"], image_size=model.codec.config.image_size
        )
        adapters.append(BenchmarkAdapter(
            name=entry["name"], adapter_path=entry["path"], exemplars=exemplars,
        ))
    t_start = section.get("t_start")
    bench = BenchmarkConfig(
        prompts=list(section.get("prompts", [])),
        seeds=[int(s) for s in section.get("seeds", [args.seed])],
        sampler_steps=int(section.get("sampler_steps", 20)),
        guidance_scale=float(section.get("guidance_scale", 7.5)),
        t_start=None if t_start is None else _resolve_timestep(float(t_start), model.T),
        adapter_scale=float(section.get("adapter_scale", 1.0)),
    )
    reports = run_benchmark(model, adapters, bench, style_embedder=features, joint_embedder=scorer)
    table = render_report_table(reports)
    print(table)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "eval_report.json"
    report_path.write_text(
        json.dumps([r.to_dict() for r in reports], indent=1, sort_keys=True), encoding="utf-8"
    )
    (out_dir / "eval_report.txt").write_text(table + "\n", encoding="utf-8")
    write_run_manifest(
        out_dir, command="evaluate", config={"benchmark": section},
        seeds={"benchmark": bench.seeds},
        inputs={"base": base_path},
        outputs=[report_path, out_dir / "eval_report.txt"], started=started,
    )
    return EXIT_OK


def cmd_attribute(args) -> int:
    from .attribution import CorpusIndex, attribute, build_index
    from .diffusion import BaseModel
    from .evaluation import load_feature_stack
    from .fileio import cache_dir
    from .inference import render_grid
    from .synthetic import load_image

    started = time.time()
    config = _load_config(args)
    section = dict(config.get("attribution", {}))
    query_path = _require(args.query, "--query")
    out_dir = _out_dir(args)
    if args.dry_run:
        print(json.dumps({"attribution": section}, indent=1, sort_keys=True))
        return EXIT_OK

    query_manifest = {}
    if args.query_manifest:
        query_manifest = json.loads(Path(args.query_manifest).read_text(encoding="utf-8"))
    image_size = int(section.get("image_size", 32))
    features = load_feature_stack(
        _require(section.get("features_path"), "attribution.features_path")
    )
    model = BaseModel.load(args.base) if args.base else None

    corpora = []
    for entry in section.get("corpora", []):
        index_path = entry.get("index")
        if index_path is None:
            index_path = cache_dir() / f"{entry['source']}.alidx"
        if args.build_missing_index and not Path(index_path).exists():
            build_index(entry["manifest"], features, index_path, image_size=image_size)
        corpora.append(CorpusIndex(
            source=entry["source"], manifest_path=entry["manifest"], index_path=str(index_path),
        ))
    if not corpora:
        raise ConfigError("attribution.corpora must name at least one corpus")

    query_image = load_image(query_path, size=image_size)
    result = attribute(
        query_image, query_manifest, corpora,
        method=args.method, k=args.k, feature_extractor=features, model=model,
        image_size=image_size,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    result_path = out_dir / "attribution.json"
    result_path.write_text(json.dumps(result.to_dict(), indent=1), encoding="utf-8")
    outputs = [result_path]
    if args.panel:
        images = [query_image]
        labels = ["query"]
        by_manifest = {c.source: read_jsonl(c.manifest_path) for c in corpora}
        roots = {c.source: Path(c.manifest_path).parent for c in corpora}
        for item in result.items:
            rec = next(r for r in by_manifest[item.source] if str(r["id"]) == item.image_id)
            images.append(load_image(roots[item.source] / rec["image_path"], size=image_size))
            labels.append(f"{item.source[:4]}:{item.score:.2f}")
        panel_path = out_dir / "attribution_panel.png"
        render_grid(images, labels, out_path=panel_path)
        outputs.append(panel_path)
    for item in result.items:
        print(f"{item.source:<16} {item.image_id:<12} {item.score:+.4f}")
    write_run_manifest(
        out_dir, command="attribute", config={"attribution": section, "method": args.method},
        seeds={}, inputs={"query": query_path},
        outputs=outputs, started=started,
    )
    return EXIT_OK


def cmd_probe_inversion(args) -> int:
    from .adapter import StyleExemplarSet, textual_inversion_probe
    from .diffusion import BaseModel
    from .evaluation import load_feature_stack
    from .inference import render_grid

    started = time.time()
    config = _load_config(args)
    section = dict(config.get("probe", {}))
    base_path = _require(args.base, "--base")
    exemplars_dir = _require(args.exemplars, "--exemplars")
    out_dir = _out_dir(args)
    if args.dry_run:
        print(json.dumps({"probe": section, "steps": args.steps}, indent=1, sort_keys=True))
        return EXIT_OK

    model = BaseModel.load(base_path)
    exemplars = StyleExemplarSet.from_directory(
        exemplars_dir, image_size=model.codec.config.image_size
    )
    features = None
    if section.get("features_path"):
        features = load_feature_stack(section["features_path"])
    result = textual_inversion_probe(
        exemplars, model,
        steps=args.steps,
        lr=float(section.get("lr", 5e-2)),
        seed=args.seed,
        eval_steps=int(section.get("eval_steps", 20)),
        guidance_scale=float(section.get("guidance_scale", 1.0)),
        style_embedder=features,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.save({"embedding": result.embedding}, out_dir / "probe_embedding.pt")
    (out_dir / "probe_score.json").write_text(
        json.dumps({"style_score": result.style_score}, indent=1), encoding="utf-8"
    )
    grid_path = out_dir / "probe_generations.png"
    render_grid(result.images, [f"s{i}" for i in range(len(result.images))], out_path=grid_path)
    print(f"probe style score: {result.style_score}")
    write_run_manifest(
        out_dir, command="probe-inversion", config={"probe": section},
        seeds={"probe": args.seed},
        inputs={"base": base_path, "exemplars": exemplars_dir / "captions.json"},
        outputs=[out_dir / "probe_embedding.pt", grid_path], started=started,
    )
    return EXIT_OK


# ----------------------------------------------------------------------------
# Parser


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="structured config file (.yaml/.json)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out-dir", help="directory for outputs and the run manifest")
    parser.add_argument("--dry-run", action="store_true",
                        help="validate config without side effects")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="artlab", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("filter", help="two-stage art filtering of a corpus manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.add_argument("--stats")
    p.add_argument("--quarantine")
    _add_common(p)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("train-codec", help="train the image<->latent codec")
    p.add_argument("--manifest", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_train_codec)

    p = sub.add_parser("train-base", help="train the denoiser on a filtered corpus")
    p.add_argument("--manifest", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--text-encoder")
    _add_common(p)
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("train-adapter", help="train a low-rank style adapter")
    p.add_argument("--base", required=True)
    p.add_argument("--exemplars", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_train_adapter)

    p = sub.add_parser("generate", help="text-to-image with timestep-gated style injection")
    p.add_argument("--base")
    p.add_argument("--adapter")
    p.add_argument("--prompt")
    p.add_argument("--t-start", type=float, default=1.0,
                   help="injection threshold; values in (0,1) are fractions of T")
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--guidance", type=float, default=7.5)
    p.add_argument("--inactive-conditioning", choices=["plain", "styled"], default="plain")
    p.add_argument("--out")
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("stylize", help="invert a real image and redraw it in the style")
    p.add_argument("--base")
    p.add_argument("--adapter")
    p.add_argument("--image")
    p.add_argument("--prompt")
    p.add_argument("--invert-to", type=float, default=0.8,
                   help="inversion depth; values in (0,1) are fractions of T")
    p.add_argument("--t-start", type=float, default=1.0)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--guidance", type=float, default=7.5)
    p.add_argument("--inactive-conditioning", choices=["plain", "styled"], default="plain")
    p.add_argument("--out")
    _add_common(p)
    p.set_defaults(func=cmd_stylize)

    p = sub.add_parser("evaluate", help="benchmark adapters over a prompt set")
    p.add_argument("--base")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("attribute", help="rank training images by influence on a generation")
    p.add_argument("--base")
    p.add_argument("--query")
    p.add_argument("--query-manifest")
    p.add_argument("--method", choices=["feature-similarity", "gradient-influence"],
                   default="feature-similarity")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--build-missing-index", action="store_true")
    p.add_argument("--panel", action="store_true", help="render a top-k attribution panel")
    _add_common(p)
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("probe-inversion", help="textual-inversion check of art-free-ness")
    p.add_argument("--base")
    p.add_argument("--exemplars")
    p.add_argument("--steps", type=int, default=300)
    _add_common(p)
    p.set_defaults(func=cmd_probe_inversion)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArtlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
