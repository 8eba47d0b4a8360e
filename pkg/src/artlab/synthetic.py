"""Procedural image-caption corpus used for desk-scale runs and tests.

Renders small "photographic" scenes (smooth gradients, blobby objects,
film-like grain) plus several kinds of graphic art (posterized paintings,
stamps, logos, line sketches) with matching captions. Art records can be
captioned honestly (caption names the art form) or sneakily (caption
describes content only), which is what makes the image-level filter stage
earn its keep.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .fileio import write_jsonl

SKY_KINDS = {
    "clear blue": ((0.35, 0.55, 0.85), (0.65, 0.80, 0.95)),
    "sunset orange": ((0.85, 0.45, 0.25), (0.95, 0.75, 0.45)),
    "overcast gray": ((0.55, 0.57, 0.60), (0.75, 0.76, 0.78)),
}

SCENE_KINDS = {
    "meadow": {"ground": (0.30, 0.55, 0.25), "objects": ["bushes", "flowers", "rocks"]},
    "beach": {"ground": (0.82, 0.72, 0.52), "objects": ["waves", "rocks", "shells"]},
    "desert": {"ground": (0.80, 0.62, 0.38), "objects": ["dunes", "rocks", "cacti"]},
    "lake": {"ground": (0.25, 0.45, 0.60), "objects": ["waves", "reeds", "rocks"]},
    "snowfield": {"ground": (0.85, 0.88, 0.92), "objects": ["rocks", "trees", "drifts"]},
    "forest": {"ground": (0.20, 0.38, 0.18), "objects": ["trees", "bushes", "ferns"]},
}

OBJECT_COLORS = {
    "bushes": (0.15, 0.40, 0.15),
    "flowers": (0.85, 0.30, 0.45),
    "rocks": (0.45, 0.44, 0.42),
    "waves": (0.55, 0.70, 0.80),
    "shells": (0.90, 0.85, 0.75),
    "dunes": (0.88, 0.72, 0.48),
    "cacti": (0.25, 0.50, 0.30),
    "reeds": (0.40, 0.55, 0.25),
    "trees": (0.12, 0.32, 0.14),
    "drifts": (0.92, 0.94, 0.97),
    "ferns": (0.22, 0.45, 0.20),
}

CAPTION_TEMPLATES = [
    "a photo of a {scene} with {obj1} and {obj2} under a {sky} sky",
    "a wide {scene} with {obj1} under a {sky} sky",
    "a {scene} landscape with {obj1} and {obj2}",
    "a quiet {scene} scene showing {obj1} near {obj2}",
]

# Fixed palette defining the synthetic target style for adapter training.
STYLE_PALETTE = np.array(
    [
        [0.10, 0.12, 0.35],
        [0.80, 0.15, 0.20],
        [0.95, 0.80, 0.30],
        [0.15, 0.55, 0.50],
        [0.92, 0.90, 0.85],
        [0.08, 0.08, 0.10],
    ],
    dtype=np.float32,
)


def _smooth_noise(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    field = gaussian_filter(rng.standard_normal((size, size)), sigma=sigma, mode="wrap")
    lo, hi = field.min(), field.max()
    return (field - lo) / (hi - lo + 1e-9)


def _blob_mask(rng: np.random.Generator, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    wobble = 0.35 * _smooth_noise(rng, size, sigma=size / 8)
    dist = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
    return (dist < r * (0.8 + wobble)).astype(np.float64)


@dataclass
class SceneSpec:
    scene: str
    sky: str
    objects: tuple[str, str]
    caption: str


def sample_scene_spec(rng: np.random.Generator) -> SceneSpec:
    scene = str(rng.choice(sorted(SCENE_KINDS)))
    sky = str(rng.choice(sorted(SKY_KINDS)))
    objs = rng.choice(SCENE_KINDS[scene]["objects"], size=2, replace=False)
    template = CAPTION_TEMPLATES[int(rng.integers(len(CAPTION_TEMPLATES)))]
    caption = template.format(scene=scene, sky=sky, obj1=objs[0], obj2=objs[1])
    return SceneSpec(scene=scene, sky=sky, objects=(str(objs[0]), str(objs[1])), caption=caption)


def render_scene(rng: np.random.Generator, spec: SceneSpec, size: int = 32) -> np.ndarray:
    """Render a natural-looking HWC float image in [0, 1] for a scene spec."""
    img = np.zeros((size, size, 3), dtype=np.float64)
    horizon = 0.30 + 0.25 * rng.random()
    yy = np.linspace(0.0, 1.0, size)[:, None]

    sky_top, sky_bottom = SKY_KINDS[spec.sky]
    ramp = np.clip(yy / max(horizon, 1e-6), 0.0, 1.0)
    for c in range(3):
        img[:, :, c] = sky_top[c] + (sky_bottom[c] - sky_top[c]) * ramp

    ground_color = np.array(SCENE_KINDS[spec.scene]["ground"])
    ground_mask = (yy >= horizon).astype(np.float64)
    texture = _smooth_noise(rng, size, sigma=2.0) * 0.25 - 0.125
    shade = 1.0 + 0.3 * (yy - horizon)
    for c in range(3):
        ground = np.clip(ground_color[c] * shade[:, 0][:, None] + texture, 0.0, 1.0)
        img[:, :, c] = img[:, :, c] * (1 - ground_mask) + ground * ground_mask

    for obj in spec.objects:
        color = np.array(OBJECT_COLORS[obj])
        n_blobs = int(rng.integers(1, 4))
        for _ in range(n_blobs):
            cx = rng.random()
            cy = horizon + (1 - horizon) * rng.random()
            r = 0.05 + 0.10 * rng.random()
            mask = _blob_mask(rng, size, cx, cy, r)[:, :, None]
            jitter = color * (0.85 + 0.3 * rng.random())
            img = img * (1 - mask) + np.clip(jitter, 0, 1)[None, None, :] * mask

    img = gaussian_filter(img, sigma=(0.6, 0.6, 0.0))
    grain = rng.standard_normal(img.shape) * 0.015
    return np.clip(img + grain, 0.0, 1.0).astype(np.float32)


def posterize_palette(img: np.ndarray, palette: np.ndarray | None = None) -> np.ndarray:
    """Snap every pixel to the nearest color of a fixed palette."""
    palette = STYLE_PALETTE if palette is None else np.asarray(palette, dtype=np.float32)
    flat = img.reshape(-1, 3).astype(np.float32)
    dists = ((flat[:, None, :] - palette[None, :, :]) ** 2).sum(axis=2)
    idx = dists.argmin(axis=1)
    return palette[idx].reshape(img.shape).astype(np.float32)


def _random_palette(rng: np.random.Generator, n_colors: int) -> np.ndarray:
    return rng.random((n_colors, 3)).astype(np.float32)


def render_art(rng: np.random.Generator, size: int = 32) -> tuple[np.ndarray, SceneSpec, str]:
    """Render a graphic-art image. Returns (image, underlying scene, art kind)."""
    kind = str(rng.choice(["painting", "stamp", "logo", "sketch"]))
    spec = sample_scene_spec(rng)
    if kind == "painting":
        base = render_scene(rng, spec, size)
        img = posterize_palette(base, _random_palette(rng, int(rng.integers(4, 8))))
        canvas = _smooth_noise(rng, size, sigma=0.8)[:, :, None] * 0.08
        img = np.clip(img + canvas - 0.04, 0, 1)
    elif kind == "stamp":
        base = render_scene(rng, spec, size)
        img = posterize_palette(base, _random_palette(rng, int(rng.integers(3, 6))))
        border = max(2, size // 10)
        frame_color = rng.random(3).astype(np.float32)
        img[:border, :] = frame_color
        img[-border:, :] = frame_color
        img[:, :border] = frame_color
        img[:, -border:] = frame_color
        step = max(3, size // 8)
        img[::step, 0] = 1.0
        img[::step, -1] = 1.0
    elif kind == "logo":
        img = np.ones((size, size, 3), dtype=np.float32) * rng.random(3).astype(np.float32)
        for _ in range(int(rng.integers(1, 4))):
            mask = _blob_mask(rng, size, rng.random(), rng.random(), 0.15 + 0.2 * rng.random())
            img = img * (1 - mask[:, :, None]) + rng.random(3).astype(np.float32) * mask[:, :, None]
        img = posterize_palette(img, _random_palette(rng, 4))
    else:  # sketch
        base = render_scene(rng, spec, size)
        gray = base.mean(axis=2)
        gy, gx = np.gradient(gray)
        edges = np.sqrt(gx**2 + gy**2)
        lines = 1.0 - np.clip(edges / (edges.max() + 1e-9) * 3.0, 0, 1)
        img = np.repeat(lines[:, :, None], 3, axis=2).astype(np.float32)
    return img.astype(np.float32), spec, kind


ART_CAPTION_TEMPLATES = {
    "painting": "an oil painting of a {scene} with {obj1} and {obj2}",
    "stamp": "a postage stamp showing a {scene} with {obj1}",
    "logo": "a flat colorful logo with simple shapes",
    "sketch": "a pencil sketch of a {scene} with {obj1}",
}


def art_caption(spec: SceneSpec, kind: str, sneaky: bool, rng: np.random.Generator) -> str:
    if sneaky:
        # Content-only caption: no art vocabulary, only the image betrays it.
        return spec.caption
    template = ART_CAPTION_TEMPLATES[kind]
    return template.format(scene=spec.scene, obj1=spec.objects[0], obj2=spec.objects[1])


def save_image(img: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.asarray(img) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_image(path, size: int | None = None) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def build_corpus(
    out_dir,
    n_records: int = 200,
    art_fraction: float = 0.2,
    sneaky_art_fraction: float = 0.3,
    size: int = 32,
    seed: int = 0,
    val_fraction: float = 0.1,
) -> tuple[Path, Path]:
    """Write a labeled synthetic corpus: images/, manifest.jsonl, labels.json.

    Returns (manifest_path, labels_path). Labels are the hand-label oracle
    used to audit filter contamination.
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    n_art = int(round(n_records * art_fraction))
    records, labels = [], {}
    for i in range(n_records):
        rec_id = f"rec{i:05d}"
        is_art = i < n_art
        if is_art:
            img, spec, kind = render_art(rng, size)
            sneaky = rng.random() < sneaky_art_fraction
            caption = art_caption(spec, kind, sneaky, rng)
            labels[rec_id] = {"art": True, "kind": kind, "sneaky_caption": sneaky}
        else:
            spec = sample_scene_spec(rng)
            img = render_scene(rng, spec, size)
            caption = spec.caption
            labels[rec_id] = {"art": False, "kind": "natural", "sneaky_caption": False}
        rel_path = f"images/{rec_id}.png"
        save_image(img, out_dir / rel_path)
        split = "validation" if rng.random() < val_fraction else "train"
        records.append({"id": rec_id, "image_path": rel_path, "caption": caption, "split": split})

    # Interleave art and natural records so ordering carries no label signal.
    order = rng.permutation(len(records))
    records = [records[int(j)] for j in order]

    manifest_path = out_dir / "manifest.jsonl"
    write_jsonl(manifest_path, records)
    labels_path = out_dir / "labels.json"
    labels_path.write_text(json.dumps(labels, indent=1, sort_keys=True), encoding="utf-8")
    return manifest_path, labels_path


def build_style_exemplars(
    out_dir,
    n_exemplars: int = 15,
    size: int = 32,
    seed: int = 100,
    palette: np.ndarray | None = None,
) -> Path:
    """Create a style-exemplar directory: posterized scenes + captions.json.

    Captions describe content only (no style vocabulary), matching how
    adapter exemplars are captioned.
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    captions = {}
    for i in range(n_exemplars):
        spec = sample_scene_spec(rng)
        img = render_scene(rng, spec, size)
        styled = posterize_palette(img, palette)
        name = f"exemplar{i:03d}.png"
        save_image(styled, out_dir / name)
        captions[name] = spec.caption
    (out_dir / "captions.json").write_text(
        json.dumps(captions, indent=1, sort_keys=True), encoding="utf-8"
    )
    return out_dir


def sample_prompts(n: int, seed: int = 0) -> list[str]:
    """Content prompts drawn from the same caption templates."""
    rng = np.random.default_rng(seed)
    return [sample_scene_spec(rng).caption for _ in range(n)]
