"""Training-data attribution: rank corpus images by influence on a generation.

Two substitute rankers, always declared in the result's method tag:
feature-similarity (cosine over style-stripped content features from a
prebuilt index) and gradient-influence (dot product of denoising-loss
gradients restricted to a declared parameter subset).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, UnindexedCorpusError
from .fileio import read_jsonl, sha256_file
from .synthetic import load_image

METHOD_FEATURES = "feature-similarity"
METHOD_GRADIENTS = "gradient-influence"

_MAGIC = b"ALIDX1\x00"


def write_index(path, header: dict, features: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    features = np.ascontiguousarray(features, dtype=np.float32)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(features.tobytes())


def read_index(path) -> tuple[dict, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise UnindexedCorpusError(f"no feature index at {path}")
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ConfigError(f"{path} is not a feature index")
        (length,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(length).decode("utf-8"))
        data = np.frombuffer(fh.read(), dtype=np.float32)
    features = data.reshape(header["count"], header["dim"])
    return header, features


def build_index(
    manifest_path,
    feature_extractor,
    out_path,
    *,
    image_size: int = 32,
    batch_size: int = 64,
) -> Path:
    """Deterministic content-feature table keyed by record id.

    Incremental: entries from an existing index with a matching extractor
    fingerprint are reused instead of recomputed. Unreadable images are
    listed in the header's quarantine, not dropped silently.
    """
    records = read_jsonl(manifest_path)
    root = Path(manifest_path).parent
    out_path = Path(out_path)
    fingerprint = feature_extractor.fingerprint()

    cached: dict[str, np.ndarray] = {}
    if out_path.exists():
        try:
            old_header, old_features = read_index(out_path)
            if old_header.get("extractor_fingerprint") == fingerprint:
                cached = {rid: old_features[i] for i, rid in enumerate(old_header["ids"])}
        except (ConfigError, UnindexedCorpusError, KeyError):
            cached = {}

    ids: list[str] = []
    rows: list[np.ndarray] = []
    quarantined: list[str] = []
    pending: list[tuple[str, Path]] = []
    for rec in records:
        rid = str(rec["id"])
        if rid in cached:
            ids.append(rid)
            rows.append(cached[rid])
        else:
            pending.append((rid, root / rec["image_path"]))

    fresh: dict[str, np.ndarray] = {}
    for start in range(0, len(pending), batch_size):
        batch = pending[start : start + batch_size]
        images, ok_ids = [], []
        for rid, path in batch:
            try:
                images.append(load_image(path, size=image_size))
                ok_ids.append(rid)
            except (OSError, ValueError):
                quarantined.append(rid)
        if images:
            vectors = feature_extractor.content_vectors(images)
            for rid, vec in zip(ok_ids, vectors):
                fresh[rid] = vec.astype(np.float32)

    # Reassemble in manifest order.
    ids, rows = [], []
    for rec in records:
        rid = str(rec["id"])
        vec = cached.get(rid)
        if vec is None:
            vec = fresh.get(rid)
        if vec is not None:
            ids.append(rid)
            rows.append(np.asarray(vec, dtype=np.float32))

    dim = rows[0].shape[0] if rows else getattr(feature_extractor, "content_dim", 0)
    features = np.stack(rows) if rows else np.zeros((0, dim), dtype=np.float32)
    header = {
        "extractor_fingerprint": fingerprint,
        "dim": int(features.shape[1]),
        "count": int(features.shape[0]),
        "ids": ids,
        "quarantined": sorted(quarantined),
        "manifest_sha256": sha256_file(manifest_path),
    }
    write_index(out_path, header, features)
    return out_path


@dataclass
class CorpusIndex:
    """A queryable corpus: its source tag, manifest, and index file."""

    source: str  # e.g. "natural-corpus" | "exemplar-set"
    manifest_path: str
    index_path: str


@dataclass
class AttributionItem:
    source: str
    image_id: str
    score: float


@dataclass
class AttributionResult:
    query_id: str
    items: list[AttributionItem]
    method: str

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "method": self.method,
            "items": [
                {"source": it.source, "image_id": it.image_id, "score": it.score}
                for it in self.items
            ],
        }


def _feature_similarity_scores(
    query_image: np.ndarray, corpora: list[CorpusIndex], feature_extractor
) -> list[AttributionItem]:
    qv = feature_extractor.content_vectors([query_image])[0]
    qn = qv / (np.linalg.norm(qv) + 1e-12)
    items = []
    for corpus in corpora:
        header, features = read_index(corpus.index_path)
        if header["extractor_fingerprint"] != feature_extractor.fingerprint():
            raise ConfigError(
                f"index {corpus.index_path} was built with a different feature extractor"
            )
        norms = np.linalg.norm(features, axis=1) + 1e-12
        scores = (features @ qn) / norms
        for rid, score in zip(header["ids"], scores):
            items.append(AttributionItem(source=corpus.source, image_id=rid, score=float(score)))
    return items


def _loss_gradient(model, params, x0, cond_emb, probe_ts, probe_eps) -> np.ndarray:
    from .diffusion import forward_diffuse

    batch = probe_ts.shape[0]
    x0_rep = x0.expand(batch, -1, -1, -1)
    cond_rep = cond_emb.expand(batch, -1, -1)
    noised = forward_diffuse(x0_rep, probe_ts, probe_eps, model.schedule)
    pred = model.predict_eps(noised.x_t, noised.t, cond_rep)
    loss = ((pred - probe_eps) ** 2).mean()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    flat = [
        (g if g is not None else torch.zeros_like(p)).reshape(-1)
        for g, p in zip(grads, params)
    ]
    return torch.cat(flat).detach().numpy()


def _gradient_influence_scores(
    query_image: np.ndarray,
    query_caption: str,
    corpora: list[CorpusIndex],
    model,
    *,
    param_names: list[str] | None = None,
    n_probe_timesteps: int = 8,
    probe_seed: int = 0,
    image_size: int = 32,
) -> list[AttributionItem]:
    from .adapter import resolve_placement

    if param_names is None:
        param_names = resolve_placement(model.unet, "up")
    name_set = set(param_names)
    params = [
        p
        for name, module in model.unet.named_modules()
        if name in name_set
        for p in module.parameters(recurse=False)
    ]
    if not params:
        raise ConfigError("gradient influence needs a non-empty parameter subset")
    prior_states = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(True)

    T = model.schedule.T
    probe_ts = torch.linspace(1, T, n_probe_timesteps).round().long()
    gen = torch.Generator().manual_seed(probe_seed)
    latent_shape = model.codec.config.latent_shape
    probe_eps = torch.randn((n_probe_timesteps, *latent_shape), generator=gen)

    def grad_for(image: np.ndarray, caption: str) -> np.ndarray:
        pixels = torch.as_tensor(np.asarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
        with torch.no_grad():
            x0 = model.codec.encode(pixels)
        cond = model.text_encoder.encode_prompt(caption).embeddings[None]
        return _loss_gradient(model, params, x0, cond, probe_ts, probe_eps)

    try:
        g_query = grad_for(query_image, query_caption)
        items = []
        for corpus in corpora:
            records = read_jsonl(corpus.manifest_path)
            root = Path(corpus.manifest_path).parent
            for rec in records:
                img = load_image(root / rec["image_path"], size=image_size)
                g = grad_for(img, rec["caption"])
                items.append(
                    AttributionItem(
                        source=corpus.source, image_id=str(rec["id"]),
                        score=float(np.dot(g_query, g)),
                    )
                )
    finally:
        for p, state in zip(params, prior_states):
            p.requires_grad_(state)
    return items


def attribute(
    query_image: np.ndarray,
    query_manifest: dict,
    corpora: list[CorpusIndex],
    *,
    method: str = METHOD_FEATURES,
    k: int = 5,
    feature_extractor=None,
    model=None,
    image_size: int = 32,
) -> AttributionResult:
    """Rank corpus images by influence on the query; top-k, best first."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    if method == METHOD_FEATURES:
        if feature_extractor is None:
            raise ConfigError("feature-similarity attribution needs a feature extractor")
        items = _feature_similarity_scores(query_image, corpora, feature_extractor)
    elif method == METHOD_GRADIENTS:
        if model is None:
            raise ConfigError("gradient-influence attribution needs the model")
        caption = query_manifest.get("styled_prompt") or query_manifest.get("prompt") or ""
        items = _gradient_influence_scores(
            query_image, caption, corpora, model, image_size=image_size
        )
    else:
        raise ConfigError(f"unknown attribution method {method!r}")
    items.sort(key=lambda it: (-it.score, it.source, it.image_id))
    return AttributionResult(
        query_id=str(query_manifest.get("query_id", query_manifest.get("seed", "query"))),
        items=items[:k],
        method=method,
    )
