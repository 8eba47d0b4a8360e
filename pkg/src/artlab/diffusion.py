"""Forward diffusion, denoiser training, and deterministic DDIM sampling/inversion.

The noised sample at timestep t is sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps
(cumulative variance-preserving form). The sampler and inverter walk one
shared integer time grid in opposite directions, so inversion followed by
sampling reconstructs up to discretization error.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .codec import load_manifest_images, make_codec, CodecConfig
from .errors import ConfigError, DivergenceError, ShapeMismatchError, TimestepRangeError
from .fileio import read_jsonl, sha256_bytes, sha256_file
from .schedule import NoiseSchedule, time_grid
from .text import Conditioning, TextEncoder, TextEncoderConfig
from .unet import UNet, UNetConfig

DEFAULT_GUIDANCE_SCALE = 7.5
DEFAULT_GUIDANCE_DROPOUT = 0.10


@dataclass
class NoisedSample:
    x_t: torch.Tensor
    t: torch.Tensor  # per-sample timesteps, shape (B,)
    eps: torch.Tensor | None = None


def _alpha_bar_at(schedule: NoiseSchedule, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    ab = torch.as_tensor(schedule.alpha_bar, dtype=like.dtype, device=like.device)
    view = (-1,) + (1,) * (like.ndim - 1)
    return ab[t].reshape(view)


def _as_timesteps(t, batch: int, T: int) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    if t.ndim == 0:
        t = t.repeat(batch)
    if t.shape != (batch,):
        raise ShapeMismatchError(f"timesteps must be scalar or shape ({batch},)")
    if bool((t < 0).any()) or bool((t > T).any()):
        raise TimestepRangeError(f"timestep outside [0, {T}]")
    return t


def forward_diffuse(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> NoisedSample:
    """Jump straight to timestep t: x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps."""
    if eps.shape != x0.shape:
        raise ShapeMismatchError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    t = _as_timesteps(t, x0.shape[0], schedule.T)
    ab = _alpha_bar_at(schedule, t, x0)
    x_t = torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps
    return NoisedSample(x_t=x_t, t=t, eps=eps)


def denoising_loss(
    predict_eps,
    schedule: NoiseSchedule,
    x0: torch.Tensor,
    cond_emb: torch.Tensor,
    t,
    eps: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Noise-prediction objective; returns (mean loss, per-sample losses)."""
    noised = forward_diffuse(x0, t, eps, schedule)
    pred = predict_eps(noised.x_t, noised.t, cond_emb)
    per_sample = ((pred - eps) ** 2).flatten(1).mean(dim=1)
    return per_sample.mean(), per_sample


class BaseModel:
    """Denoiser weights plus everything needed to run them: schedule, codec, prompts."""

    def __init__(
        self,
        unet: UNet,
        schedule: NoiseSchedule,
        codec: nn.Module,
        text_encoder: TextEncoder,
        guidance_dropout: float = DEFAULT_GUIDANCE_DROPOUT,
        metadata: dict | None = None,
    ):
        self.unet = unet
        self.schedule = schedule
        self.codec = codec
        self.text_encoder = text_encoder
        self.guidance_dropout = float(guidance_dropout)
        self.metadata = dict(metadata or {})
        self.adapter = None  # set by style_adapter.attach_adapter
        self._null = None

    @property
    def T(self) -> int:
        return self.schedule.T

    def null_conditioning(self) -> Conditioning:
        if self._null is None:
            self._null = self.text_encoder.encode_prompt("")
        return self._null

    def predict_eps(self, x_t: torch.Tensor, t: torch.Tensor, cond_emb: torch.Tensor) -> torch.Tensor:
        return self.unet(x_t, t, cond_emb)

    def weight_hash(self) -> str:
        """Hash of all base weights; adapter factors are external to the tree."""
        blobs = []
        for module in (self.unet, self.codec, self.text_encoder):
            for name, param in sorted(module.state_dict().items()):
                blobs.append(name.encode())
                blobs.append(param.detach().numpy().tobytes())
        return sha256_bytes(b"".join(blobs))

    def save(self, path, metadata: dict | None = None) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "format": "artlab-base-v1",
                "schedule": self.schedule.to_dict(),
                "unet": {"config": self.unet.config.to_dict(), "state": self.unet.state_dict()},
                "codec": {"config": self.codec.config.to_dict(), "state": self.codec.state_dict()},
                "text": {
                    "config": self.text_encoder.config.to_dict(),
                    "state": self.text_encoder.state_dict(),
                },
                "guidance_dropout": self.guidance_dropout,
                "metadata": {**self.metadata, **(metadata or {})},
            },
            path,
        )

    @classmethod
    def load(cls, path) -> "BaseModel":
        payload = torch.load(path, map_location="cpu", weights_only=True)
        unet = UNet(UNetConfig.from_dict(payload["unet"]["config"]))
        unet.load_state_dict(payload["unet"]["state"])
        unet.requires_grad_(False)
        unet.eval()
        codec = make_codec(CodecConfig(**payload["codec"]["config"]))
        codec.load_state_dict(payload["codec"]["state"])
        codec.requires_grad_(False)
        codec.eval()
        text_encoder = TextEncoder(TextEncoderConfig(**payload["text"]["config"]))
        text_encoder.load_state_dict(payload["text"]["state"])
        return cls(
            unet=unet,
            schedule=NoiseSchedule.from_dict(payload["schedule"]),
            codec=codec,
            text_encoder=text_encoder,
            guidance_dropout=payload["guidance_dropout"],
            metadata=payload.get("metadata", {}),
        )


@dataclass
class StepResult:
    loss: float
    nulled_fraction: float
    per_sample: np.ndarray


def training_step(
    model: BaseModel,
    x0: torch.Tensor,
    cond_emb: torch.Tensor,
    *,
    optimizer: torch.optim.Optimizer,
    rng: torch.Generator,
    ids: list[str] | None = None,
    dropout_rate: float | None = None,
) -> StepResult:
    """One denoiser update on a batch of clean latents and their conditionings.

    Each sample's conditioning is replaced by the null conditioning with
    probability ``dropout_rate`` (default: the model's configured rate), the
    classifier-free guidance recipe.
    """
    if x0.shape[0] == 0:
        raise ConfigError("training batch is empty")
    rate = model.guidance_dropout if dropout_rate is None else dropout_rate
    batch = x0.shape[0]
    t = torch.randint(1, model.T + 1, (batch,), generator=rng)
    eps = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
    nulled = torch.rand(batch, generator=rng) < rate
    if nulled.any():
        null_emb = model.null_conditioning().embeddings.to(cond_emb.dtype)
        cond_emb = torch.where(nulled[:, None, None], null_emb[None], cond_emb)
    loss, per_sample = denoising_loss(model.predict_eps, model.schedule, x0, cond_emb, t, eps)
    if not torch.isfinite(loss):
        bad = torch.nonzero(~torch.isfinite(per_sample)).flatten().tolist()
        bad_ids = [ids[i] for i in bad] if ids is not None else bad
        raise DivergenceError(f"non-finite training loss at batch items {bad_ids}", batch_ids=bad_ids)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return StepResult(
        loss=loss.item(), nulled_fraction=float(nulled.float().mean()),
        per_sample=per_sample.detach().numpy(),
    )


def guided_eps(eps_null: torch.Tensor, eps_cond: torch.Tensor, scale: float) -> torch.Tensor:
    """Classifier-free guidance extrapolation."""
    return eps_null + scale * (eps_cond - eps_null)


@dataclass
class SamplerStep:
    t: int
    adapter_enabled: bool


def _conditioning_at(conditioning, t: int) -> Conditioning:
    return conditioning(t) if callable(conditioning) else conditioning


@torch.no_grad()
def ddim_sample(
    model: BaseModel,
    conditioning,
    *,
    steps: int,
    guidance_scale: float = DEFAULT_GUIDANCE_SCALE,
    seeds: int | list[int] = 0,
    x_init: torch.Tensor | None = None,
    start_t: int | None = None,
    adapter_hook=None,
    step_callback=None,
) -> torch.Tensor:
    """Deterministic DDIM sampling; returns latents of shape (B, C, H, W).

    ``conditioning`` is a Conditioning or a per-timestep callable t -> Conditioning.
    ``adapter_hook(t) -> bool`` gates an attached adapter per step; absent, the
    adapter stays off. With ``x_init``/``start_t`` the walk starts mid-grid
    (start_t must be a grid point), which is how inverted latents re-enter.
    """
    if guidance_scale < 0:
        raise ConfigError("guidance scale must be >= 0")
    grid = time_grid(model.T, steps)
    if x_init is not None:
        if start_t is None:
            raise ConfigError("x_init requires start_t")
        matches = np.nonzero(grid == start_t)[0]
        if len(matches) == 0:
            raise ConfigError(f"start_t {start_t} is not on the {steps}-step grid")
        top = int(matches[0])
        x = x_init.clone()
    else:
        top = len(grid) - 1
        seed_list = [seeds] if isinstance(seeds, int) else list(seeds)
        shape = model.codec.config.latent_shape
        inits = []
        for seed in seed_list:
            gen = torch.Generator().manual_seed(int(seed))
            inits.append(torch.randn((1, *shape), generator=gen))
        x = torch.cat(inits, dim=0)

    batch = x.shape[0]
    ab = torch.as_tensor(model.schedule.alpha_bar, dtype=x.dtype)
    null_emb = model.null_conditioning().embeddings[None].expand(batch, -1, -1)

    try:
        for i in range(top, 0, -1):
            t_hi, t_lo = int(grid[i]), int(grid[i - 1])
            enabled = bool(adapter_hook(t_hi)) if adapter_hook is not None else False
            if model.adapter is not None:
                model.adapter.set_enabled(enabled)
            cond = _conditioning_at(conditioning, t_hi)
            cond_emb = cond.embeddings[None].expand(batch, -1, -1).to(x.dtype)
            t_batch = torch.full((batch,), t_hi, dtype=torch.long)
            eps_cond = model.predict_eps(x, t_batch, cond_emb)
            if guidance_scale == 1.0:
                eps = eps_cond
            else:
                eps_null = model.predict_eps(x, t_batch, null_emb)
                eps = guided_eps(eps_null, eps_cond, guidance_scale)
            x0_hat = (x - torch.sqrt(1.0 - ab[t_hi]) * eps) / torch.sqrt(ab[t_hi])
            x = torch.sqrt(ab[t_lo]) * x0_hat + torch.sqrt(1.0 - ab[t_lo]) * eps
            if step_callback is not None:
                step_callback(SamplerStep(t=t_hi, adapter_enabled=enabled))
    finally:
        if model.adapter is not None:
            model.adapter.set_enabled(False)
    return x


@torch.no_grad()
def ddim_invert(
    model: BaseModel,
    image: torch.Tensor,
    conditioning,
    target_step: int,
    *,
    steps: int,
    guidance_scale: float = 1.0,
) -> NoisedSample:
    """Walk the DDIM grid upward from the encoded image to target_step.

    Returns the noised latent at the largest grid point <= target_step.
    The adapter (if any) stays off during inversion.
    """
    if target_step < 0 or target_step > model.T:
        raise TimestepRangeError(f"target_step outside [0, {model.T}]")
    grid = time_grid(model.T, steps)
    x = model.codec.encode(image)
    if model.adapter is not None:
        model.adapter.set_enabled(False)
    ab = torch.as_tensor(model.schedule.alpha_bar, dtype=x.dtype)
    batch = x.shape[0]
    null_emb = model.null_conditioning().embeddings[None].expand(batch, -1, -1)
    reached = 0
    for i in range(len(grid) - 1):
        t_lo, t_hi = int(grid[i]), int(grid[i + 1])
        if t_hi > target_step:
            break
        cond = _conditioning_at(conditioning, t_hi)
        cond_emb = cond.embeddings[None].expand(batch, -1, -1).to(x.dtype)
        t_batch = torch.full((batch,), t_hi, dtype=torch.long)
        eps_cond = model.predict_eps(x, t_batch, cond_emb)
        if guidance_scale == 1.0:
            eps = eps_cond
        else:
            eps_null = model.predict_eps(x, t_batch, null_emb)
            eps = guided_eps(eps_null, eps_cond, guidance_scale)
        x0_hat = (x - torch.sqrt(1.0 - ab[t_lo]) * eps) / torch.sqrt(ab[t_lo])
        x = torch.sqrt(ab[t_hi]) * x0_hat + torch.sqrt(1.0 - ab[t_hi]) * eps
        reached = t_hi
    t = torch.full((batch,), reached, dtype=torch.long)
    return NoisedSample(x_t=x, t=t, eps=None)


@dataclass
class BaseTrainConfig:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 2e-4
    guidance_dropout: float = DEFAULT_GUIDANCE_DROPOUT
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 500
    val_every: int = 250
    val_batches: int = 4
    sample_every: int = 0
    sample_prompts: tuple[str, ...] = ()
    sample_steps: int = 20
    schedule_T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2


def train_base(
    manifest_path,
    codec: nn.Module,
    text_encoder: TextEncoder,
    unet_config: UNetConfig,
    config: BaseTrainConfig,
    *,
    checkpoint_path,
    log_path=None,
    sample_dir=None,
) -> tuple[BaseModel, dict]:
    """Train the denoiser on a filtered manifest; returns (model, metrics).

    Latents and prompt embeddings are precomputed once (codec and text
    encoder are frozen here). The loss log is line-delimited JSON; sample
    grids, when enabled, land in ``sample_dir``.
    """
    schedule = NoiseSchedule.linear(config.schedule_T, config.beta_start, config.beta_end)
    records = read_jsonl(manifest_path)
    train_recs = [r for r in records if r.get("split", "train") == "train"]
    val_recs = [r for r in records if r.get("split", "train") == "validation"]
    if not train_recs:
        raise ConfigError("manifest has no training records")
    if not val_recs:
        val_recs = train_recs[: max(1, len(train_recs) // 10)]

    image_size = codec.config.image_size

    def prepare(recs):
        root = Path(manifest_path).parent
        from .synthetic import load_image  # local import to keep module deps flat

        imgs = np.stack([load_image(root / r["image_path"], size=image_size) for r in recs])
        pixels = torch.as_tensor(imgs).permute(0, 3, 1, 2).contiguous()
        with torch.no_grad():
            latents = torch.cat(
                [codec.encode(pixels[i : i + 64]) for i in range(0, pixels.shape[0], 64)]
            )
            conds = torch.cat(
                [
                    text_encoder.encode_batch([r["caption"] for r in recs[i : i + 64]])
                    for i in range(0, len(recs), 64)
                ]
            )
        return latents, conds

    train_latents, train_conds = prepare(train_recs)
    val_latents, val_conds = prepare(val_recs)

    unet = UNet(unet_config)
    model = BaseModel(
        unet=unet,
        schedule=schedule,
        codec=codec,
        text_encoder=text_encoder,
        guidance_dropout=config.guidance_dropout,
        metadata={"corpus_fingerprint": sha256_file(manifest_path)},
    )
    optimizer = torch.optim.AdamW(unet.parameters(), lr=config.lr)
    rng = torch.Generator().manual_seed(config.seed)
    val_rng_seed = config.seed + 1

    log_rows: list[dict] = []

    def log(row):
        log_rows.append(row)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row) + "\n")

    def val_loss() -> float:
        gen = torch.Generator().manual_seed(val_rng_seed)  # same draws every eval
        total, count = 0.0, 0
        with torch.no_grad():
            for _ in range(config.val_batches):
                idx = torch.randint(0, val_latents.shape[0], (config.batch_size,), generator=gen)
                x0 = val_latents[idx]
                t = torch.randint(1, schedule.T + 1, (x0.shape[0],), generator=gen)
                eps = torch.randn(x0.shape, generator=gen)
                loss, _ = denoising_loss(
                    model.predict_eps, schedule, x0, val_conds[idx], t, eps
                )
                total += float(loss)
                count += 1
        return total / max(count, 1)

    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        Path(log_path).write_text("", encoding="utf-8")

    model.save(checkpoint_path, {"step": 0})
    unet.train()
    start = time.time()
    for step in range(1, config.steps + 1):
        idx = torch.randint(0, train_latents.shape[0], (config.batch_size,), generator=rng)
        result = training_step(
            model,
            train_latents[idx],
            train_conds[idx],
            optimizer=optimizer,
            rng=rng,
            ids=[train_recs[int(i)]["id"] for i in idx],
        )
        if step % config.log_every == 0 or step == config.steps:
            log({"step": step, "loss": result.loss, "lr": config.lr, "time": time.time() - start})
        if step % config.val_every == 0 or step == config.steps:
            unet.eval()
            log({"step": step, "val_loss": val_loss()})
            unet.train()
        if step % config.checkpoint_every == 0 or step == config.steps:
            model.save(checkpoint_path, {"step": step})
        if config.sample_every and sample_dir is not None and step % config.sample_every == 0:
            unet.eval()
            _emit_sample_grid(model, config, Path(sample_dir) / f"samples_{step:06d}.png")
            unet.train()
    unet.eval()

    val_curve = [row["val_loss"] for row in log_rows if "val_loss" in row]
    metrics = {
        "final_loss": log_rows[-1].get("loss") if log_rows else None,
        "val_curve": val_curve,
        "wall_clock_s": time.time() - start,
    }
    return model, metrics


def _emit_sample_grid(model: BaseModel, config: BaseTrainConfig, out_path: Path) -> None:
    from .inference import render_grid  # deferred: inference imports this module

    prompts = list(config.sample_prompts) or ["a photo"]
    images, labels = [], []
    for k, prompt in enumerate(prompts):
        cond = model.text_encoder.encode_prompt(prompt)
        latent = ddim_sample(
            model, cond, steps=config.sample_steps, guidance_scale=1.0, seeds=1000 + k
        )
        img = model.codec.decode(latent)[0].permute(1, 2, 0).clamp(0, 1).numpy()
        images.append(img)
        labels.append(prompt[:24])
    render_grid(images, labels, out_path=out_path)
