"""Image <-> latent codec: a small convolutional VAE plus a passthrough mode.

Pixel tensors are (B, 3, H, W) floats in [0, 1]. Inference-time encoding
uses the posterior mean, so encode/decode are deterministic and inversion
round-trips are reproducible.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ArtlabError, ConfigError, DivergenceError, ShapeMismatchError
from .fileio import read_jsonl, sha256_bytes, sha256_file
from .synthetic import load_image


@dataclass
class CodecConfig:
    mode: str = "conv"  # "conv" | "passthrough"
    image_size: int = 32
    latent_channels: int = 4
    downsample: int = 2
    hidden: int = 48
    latent_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("conv", "passthrough"):
            raise ConfigError(f"unknown codec mode {self.mode!r}")
        if self.downsample < 1 or (self.downsample & (self.downsample - 1)) != 0:
            raise ConfigError("downsample factor must be a power of two")
        if self.latent_scale <= 0:
            raise ConfigError("latent scale must be positive")

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        if self.mode == "passthrough":
            return (3, self.image_size, self.image_size)
        side = self.image_size // self.downsample
        return (self.latent_channels, side, side)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "image_size": self.image_size,
            "latent_channels": self.latent_channels,
            "downsample": self.downsample,
            "hidden": self.hidden,
            "latent_scale": self.latent_scale,
            "seed": self.seed,
        }


class PassthroughCodec(nn.Module):
    """Identity codec so diffusion properties can be tested without a VAE."""

    def __init__(self, config: CodecConfig):
        super().__init__()
        self.config = config

    def _check(self, x: torch.Tensor, shape: tuple[int, int, int]) -> None:
        if x.ndim != 4 or tuple(x.shape[1:]) != shape:
            raise ShapeMismatchError(f"expected (B, {shape}), got {tuple(x.shape)}")

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        self._check(images, (3, self.config.image_size, self.config.image_size))
        return images

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        self._check(latents, self.config.latent_shape)
        return latents

    def fingerprint(self) -> str:
        return sha256_bytes(json.dumps(self.config.to_dict(), sort_keys=True).encode())


class ConvCodec(nn.Module):
    def __init__(self, config: CodecConfig):
        super().__init__()
        if config.mode != "conv":
            raise ConfigError("ConvCodec requires mode='conv'")
        self.config = config
        torch.manual_seed(config.seed)
        h = config.hidden
        n_down = int(math.log2(config.downsample))

        enc: list[nn.Module] = [nn.Conv2d(3, h, 3, padding=1), nn.SiLU()]
        for _ in range(n_down):
            enc += [nn.Conv2d(h, h, 3, stride=2, padding=1), nn.SiLU()]
        enc += [nn.Conv2d(h, h, 3, padding=1), nn.SiLU(),
                nn.Conv2d(h, 2 * config.latent_channels, 1)]
        self.encoder = nn.Sequential(*enc)

        dec: list[nn.Module] = [nn.Conv2d(config.latent_channels, h, 3, padding=1), nn.SiLU()]
        for _ in range(n_down):
            dec += [nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(h, h, 3, padding=1), nn.SiLU()]
        dec += [nn.Conv2d(h, h, 3, padding=1), nn.SiLU(), nn.Conv2d(h, 3, 1)]
        self.decoder = nn.Sequential(*dec)

    def _check_images(self, images: torch.Tensor) -> None:
        want = (3, self.config.image_size, self.config.image_size)
        if images.ndim != 4 or tuple(images.shape[1:]) != want:
            raise ShapeMismatchError(f"expected (B, {want}), got {tuple(images.shape)}")

    def posterior(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        self._check_images(images)
        out = self.encoder(images * 2.0 - 1.0)
        mean, logvar = out.chunk(2, dim=1)
        return mean, logvar.clamp(-20.0, 10.0)

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """Deterministic (posterior-mean) encoding, already scaled for diffusion."""
        mean, _ = self.posterior(images)
        return mean * self.config.latent_scale

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        if latents.ndim != 4 or tuple(latents.shape[1:]) != self.config.latent_shape:
            raise ShapeMismatchError(
                f"expected (B, {self.config.latent_shape}), got {tuple(latents.shape)}"
            )
        out = self.decoder(latents / self.config.latent_scale)
        return (out + 1.0) / 2.0

    def fingerprint(self) -> str:
        blobs = [p.detach().numpy().tobytes() for _, p in sorted(self.state_dict().items())]
        return sha256_bytes(b"".join(blobs))


def make_codec(config: CodecConfig) -> nn.Module:
    if config.mode == "passthrough":
        return PassthroughCodec(config)
    return ConvCodec(config)


def save_codec(codec: nn.Module, path, metadata: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": "artlab-codec-v1",
            "config": codec.config.to_dict(),
            "state": codec.state_dict(),
            "metadata": metadata or {},
        },
        path,
    )


def load_codec(path) -> nn.Module:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    codec = make_codec(CodecConfig(**payload["config"]))
    codec.load_state_dict(payload["state"])
    codec.requires_grad_(False)
    codec.eval()
    return codec


def psnr(a: torch.Tensor, b: torch.Tensor, peak: float = 1.0) -> float:
    mse = float(F.mse_loss(a, b))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(peak**2 / mse)


def load_manifest_images(manifest_path, image_size: int, split: str | None = None) -> torch.Tensor:
    records = read_jsonl(manifest_path)
    if split is not None:
        records = [r for r in records if r.get("split", "train") == split]
    root = Path(manifest_path).parent
    arrays = [load_image(root / rec["image_path"], size=image_size) for rec in records]
    if not arrays:
        return torch.zeros((0, 3, image_size, image_size))
    return torch.as_tensor(np.stack(arrays)).permute(0, 3, 1, 2).contiguous()


def train_codec(
    manifest_path,
    config: CodecConfig,
    *,
    steps: int = 1500,
    batch_size: int = 32,
    lr: float = 2e-3,
    kl_weight: float = 1e-5,
    seed: int = 0,
    checkpoint_path=None,
    log_every: int = 100,
    min_holdout_psnr: float | None = None,
) -> tuple[nn.Module, dict]:
    """Train the conv codec on a filtered manifest; returns (codec, metrics).

    Loss is pixel reconstruction plus a lightly weighted KL pull toward a
    unit Gaussian. After training the latent scale is set from the
    empirical std of training latents. On a non-finite loss the run aborts
    with the last good checkpoint left on disk.
    """
    if config.mode == "passthrough":
        codec = PassthroughCodec(config)
        if checkpoint_path is not None:
            save_codec(codec, checkpoint_path, {"trained": False})
        return codec, {"holdout_psnr": float("inf"), "steps": 0}

    train_images = load_manifest_images(manifest_path, config.image_size, split="train")
    val_images = load_manifest_images(manifest_path, config.image_size, split="validation")
    if val_images.shape[0] == 0:
        val_images = train_images[: max(1, train_images.shape[0] // 10)]
    if train_images.shape[0] == 0:
        raise ConfigError("manifest has no training images")

    codec = ConvCodec(config)
    optimizer = torch.optim.AdamW(codec.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    manifest_fingerprint = sha256_file(manifest_path)

    def checkpoint(metadata):
        if checkpoint_path is not None:
            save_codec(codec, checkpoint_path,
                       {"corpus_fingerprint": manifest_fingerprint, **metadata})

    checkpoint({"step": 0})
    losses = []
    codec.train()
    for step in range(1, steps + 1):
        idx = torch.randint(0, train_images.shape[0], (batch_size,), generator=gen)
        batch = train_images[idx]
        mean, logvar = codec.posterior(batch)
        noise = torch.randn(mean.shape, generator=gen)
        z = mean + noise * torch.exp(0.5 * logvar)
        recon = codec.decode(z * config.latent_scale)
        kl = 0.5 * (mean**2 + logvar.exp() - 1.0 - logvar).mean()
        loss = F.mse_loss(recon, batch) + kl_weight * kl
        if not torch.isfinite(loss):
            raise DivergenceError(f"codec loss became non-finite at step {step}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(loss.item())
        if step % log_every == 0 or step == steps:
            checkpoint({"step": step, "loss": losses[-1]})
    codec.requires_grad_(False)
    codec.eval()

    # Latent scaling so diffusion sees roughly unit-std inputs.
    with torch.no_grad():
        means, _ = codec.posterior(train_images[: min(256, train_images.shape[0])])
        std = float(means.std())
    codec.config = replace(config, latent_scale=1.0 / max(std, 1e-6))

    with torch.no_grad():
        recon = codec.decode(codec.encode(val_images))
        holdout = psnr(recon, val_images)
    metrics = {
        "holdout_psnr": holdout,
        "steps": steps,
        "final_loss": losses[-1] if losses else None,
        "latent_scale": codec.config.latent_scale,
        "trained_at": time.time(),
    }
    checkpoint({"step": steps, **{k: v for k, v in metrics.items() if k != "trained_at"}})
    if min_holdout_psnr is not None and holdout < min_holdout_psnr:
        raise ArtlabError(
            f"held-out reconstruction PSNR {holdout:.2f} dB below configured "
            f"bound {min_holdout_psnr:.2f} dB"
        )
    return codec, metrics
