"""Joint image-text similarity scorer used for corpus filtering and alignment.

A deliberately small stand-in for a large pretrained contrastive model: a
handcrafted image descriptor feeding a tiny MLP tower, and a hashed
bag-of-words text tower, trained contrastively on the corpus being
filtered. Scores are reported as 100 x cosine so thresholds live on a
logit-like scale.
"""

from __future__ import annotations

import zlib
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, EmbedderError
from .fileio import read_jsonl, sha256_bytes
from .synthetic import load_image
from .words import word_tokenize

SCORE_SCALE = 100.0
N_TEXT_BUCKETS = 512
DESCRIPTOR_DIM = 26


def image_descriptor(img: np.ndarray) -> np.ndarray:
    """Fixed statistics of an HWC float image in [0, 1].

    Captures color distribution, edge structure, flatness and palette size,
    which is what separates graphic art from photographs at this scale.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise EmbedderError(f"expected HWC RGB image, got shape {img.shape}")
    feats = []
    # Per-channel 4-bin histograms.
    for c in range(3):
        hist, _ = np.histogram(img[:, :, c], bins=4, range=(0.0, 1.0))
        feats.extend(hist / img[:, :, c].size)
    # Channel means and stds.
    feats.extend(img.mean(axis=(0, 1)))
    feats.extend(img.std(axis=(0, 1)))
    # Edge energy.
    gray = img.mean(axis=2)
    gy, gx = np.gradient(gray)
    mag = np.sqrt(gx**2 + gy**2)
    feats.append(mag.mean() * 10.0)
    feats.append(mag.std() * 10.0)
    # Flatness: fraction of pixels identical to their right/down neighbor.
    same_x = np.mean(np.abs(np.diff(img, axis=1)).sum(axis=2) < 1e-3)
    same_y = np.mean(np.abs(np.diff(img, axis=0)).sum(axis=2) < 1e-3)
    feats.append(same_x)
    feats.append(same_y)
    # Palette size proxy: distinct colors after 3-bit quantization.
    quant = np.clip((img * 7.999).astype(np.int32), 0, 7)
    codes = quant[:, :, 0] * 64 + quant[:, :, 1] * 8 + quant[:, :, 2]
    feats.append(len(np.unique(codes)) / 64.0)
    # Saturation stats (max - min across channels).
    sat = img.max(axis=2) - img.min(axis=2)
    feats.append(sat.mean())
    feats.append(sat.std())
    # Border uniformity (frames of stamps/logos).
    border = np.concatenate([img[0].ravel(), img[-1].ravel(), img[:, 0].ravel(), img[:, -1].ravel()])
    feats.append(border.std())
    out = np.asarray(feats, dtype=np.float32)
    assert out.shape == (DESCRIPTOR_DIM,)
    return out


def hash_buckets(text: str, n_buckets: int = N_TEXT_BUCKETS) -> list[int]:
    """Stable word -> bucket ids (crc32, not Python's randomized hash)."""
    return [zlib.crc32(tok.encode("utf-8")) % n_buckets for tok in word_tokenize(text)]


class TinyDualEncoder(nn.Module):
    """Two-tower scorer: descriptor MLP for images, hashed embedding bag for text."""

    def __init__(self, embed_dim: int = 64, n_buckets: int = N_TEXT_BUCKETS, seed: int = 0):
        super().__init__()
        self.embed_dim = embed_dim
        self.n_buckets = n_buckets
        torch.manual_seed(seed)
        self.image_tower = nn.Sequential(
            nn.Linear(DESCRIPTOR_DIM, 64),
            nn.GELU(),
            nn.Linear(64, embed_dim),
        )
        self.text_tower = nn.EmbeddingBag(n_buckets, embed_dim, mode="mean")

    def embed_descriptors(self, desc: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.image_tower(desc), dim=-1)

    def embed_texts(self, texts: list[str]) -> torch.Tensor:
        ids, offsets = [], []
        for text in texts:
            buckets = hash_buckets(text, self.n_buckets)
            if not buckets:
                buckets = [0]
            offsets.append(len(ids))
            ids.extend(buckets)
        ids_t = torch.as_tensor(ids, dtype=torch.long)
        offsets_t = torch.as_tensor(offsets, dtype=torch.long)
        return F.normalize(self.text_tower(ids_t, offsets_t), dim=-1)

    @torch.no_grad()
    def score(self, images, texts: list[str]) -> np.ndarray:
        """Similarity matrix (n_images, n_texts) in 100 x cosine units."""
        desc = np.stack([image_descriptor(im) for im in images])
        img_emb = self.embed_descriptors(torch.as_tensor(desc))
        txt_emb = self.embed_texts(texts)
        return (SCORE_SCALE * img_emb @ txt_emb.T).numpy()

    def fingerprint(self) -> str:
        blobs = [p.detach().numpy().tobytes() for _, p in sorted(self.state_dict().items())]
        return sha256_bytes(b"".join(blobs))


def train_scorer(
    manifest_path,
    *,
    embed_dim: int = 64,
    steps: int = 400,
    batch_size: int = 32,
    lr: float = 3e-3,
    seed: int = 0,
    image_size: int = 32,
) -> TinyDualEncoder:
    """Contrastive training on (image, caption) pairs from a manifest."""
    records = read_jsonl(manifest_path)
    if not records:
        raise ConfigError("cannot train a scorer on an empty manifest")
    root = Path(manifest_path).parent
    descs, captions = [], []
    for rec in records:
        img = load_image(root / rec["image_path"], size=image_size)
        descs.append(image_descriptor(img))
        captions.append(rec["caption"])
    descs_t = torch.as_tensor(np.stack(descs))

    model = TinyDualEncoder(embed_dim=embed_dim, seed=seed)
    optimizer = torch.optim.AdamW(model.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    temperature = 0.07
    model.train()
    for _ in range(steps):
        idx = torch.randint(0, len(records), (batch_size,), generator=gen)
        img_emb = model.embed_descriptors(descs_t[idx])
        txt_emb = model.embed_texts([captions[int(i)] for i in idx])
        logits = img_emb @ txt_emb.T / temperature
        targets = torch.arange(batch_size)
        loss = 0.5 * (F.cross_entropy(logits, targets) + F.cross_entropy(logits.T, targets))
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    model.eval()
    return model


def save_scorer(model: TinyDualEncoder, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": "artlab-scorer-v1",
            "config": {"embed_dim": model.embed_dim, "n_buckets": model.n_buckets},
            "state": model.state_dict(),
        },
        path,
    )


def load_scorer(path) -> TinyDualEncoder:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    model = TinyDualEncoder(**payload["config"])
    model.load_state_dict(payload["state"])
    model.eval()
    return model


def calibrate_thresholds(
    scorer: TinyDualEncoder,
    manifest_path,
    labels: dict,
    concepts: list[str],
    *,
    image_size: int = 32,
    fpr_weight: float = 2.0,
) -> dict[str, float]:
    """Pick one threshold per concept from a labeled dev set.

    Sorts dev images by concept score and takes the cut maximizing
    true-art detection minus ``fpr_weight`` x natural false rejections,
    breaking ties toward the stricter (higher) threshold.
    """
    records = read_jsonl(manifest_path)
    root = Path(manifest_path).parent
    images = [load_image(root / rec["image_path"], size=image_size) for rec in records]
    is_art = np.array([bool(labels[rec["id"]]["art"]) for rec in records])
    kinds = [labels[rec["id"]].get("kind", "") for rec in records]
    scores = scorer.score(images, concepts)

    thresholds = {}
    for j, concept in enumerate(concepts):
        col = scores[:, j]
        # Positives: art of this kind if any exist, else all art.
        pos = np.array([k == concept for k in kinds])
        if not pos.any():
            pos = is_art
        neg = ~is_art
        candidates = np.unique(col)
        best_thr, best_score = float(col.max()) + 1.0, -np.inf
        for thr in candidates:
            tpr = float(np.mean(col[pos] >= thr)) if pos.any() else 0.0
            fpr = float(np.mean(col[neg] >= thr)) if neg.any() else 0.0
            j_stat = tpr - fpr_weight * fpr
            if j_stat > best_score or (j_stat == best_score and thr > best_thr):
                best_score, best_thr = j_stat, float(thr)
        thresholds[concept] = best_thr
    return thresholds
