"""Low-rank style adapter: attach, train, and probe.

Adapter factors live outside the base module tree and act through forward
hooks, so the base state_dict (and its hash) is untouched by attachment or
training. The up-projection starts at zero: a freshly attached adapter is
the base model.
"""

from __future__ import annotations

import json
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .diffusion import BaseModel, forward_diffuse
from .errors import ConfigError, DivergenceError, IncompatibleAdapterError
from .fileio import sha256_bytes, sha256_file
from .synthetic import load_image
from .text import StyleToken, compose_style_prompt

PLACEMENT_UP = "up"
PLACEMENT_ALL = "all"
_BLOCK_PREFIXES = {
    PLACEMENT_UP: ("up_blocks.",),
    PLACEMENT_ALL: ("down_blocks.", "mid_block.", "up_blocks."),
}


def resolve_placement(unet: nn.Module, placement) -> list[str]:
    """Names of the Linear/Conv2d modules the adapter will wrap."""
    adaptable = {
        name: mod
        for name, mod in unet.named_modules()
        if isinstance(mod, (nn.Linear, nn.Conv2d))
    }
    if isinstance(placement, str):
        if placement not in _BLOCK_PREFIXES:
            raise ConfigError(f"placement must be 'up', 'all', or a layer list, got {placement!r}")
        prefixes = _BLOCK_PREFIXES[placement]
        return sorted(n for n in adaptable if n.startswith(prefixes))
    names = list(placement)
    for name in names:
        if name not in adaptable:
            raise IncompatibleAdapterError(f"unknown or non-adaptable layer {name!r}")
    return sorted(names)


class LoRAPair(nn.Module):
    """One low-rank factor pair for a Linear or Conv2d layer."""

    def __init__(self, base: nn.Module, rank: int, gen: torch.Generator):
        super().__init__()
        if isinstance(base, nn.Linear):
            self.kind = "linear"
            a = torch.empty(rank, base.in_features).normal_(0.0, 0.02, generator=gen)
            b = torch.zeros(base.out_features, rank)
            self.conv_meta = None
        elif isinstance(base, nn.Conv2d):
            if base.groups != 1:
                raise IncompatibleAdapterError("grouped convolutions are not adaptable")
            self.kind = "conv"
            a = torch.empty(rank, base.in_channels, *base.kernel_size).normal_(
                0.0, 0.02, generator=gen
            )
            b = torch.zeros(base.out_channels, rank, 1, 1)
            self.conv_meta = (base.stride, base.padding, base.dilation)
        else:
            raise IncompatibleAdapterError(f"cannot adapt module type {type(base).__name__}")
        self.A = nn.Parameter(a)
        self.B = nn.Parameter(b)

    def delta(self, x: torch.Tensor) -> torch.Tensor:
        if self.kind == "linear":
            return F.linear(F.linear(x, self.A), self.B)
        stride, padding, dilation = self.conv_meta
        h = F.conv2d(x, self.A, stride=stride, padding=padding, dilation=dilation)
        return F.conv2d(h, self.B)

    def effective_delta(self) -> torch.Tensor:
        """Materialized B @ A in the base layer's weight shape (unit scale)."""
        if self.kind == "linear":
            return self.B @ self.A
        return torch.tensordot(self.B[:, :, 0, 0], self.A, dims=([1], [0]))


def _key(name: str) -> str:
    return name.replace(".", "/")


class AdapterBundle(nn.Module):
    """Low-rank factors for a set of layers plus runtime gating state."""

    def __init__(
        self,
        rank: int,
        placement,
        layer_names: list[str],
        pairs: dict[str, LoRAPair],
        scale: float = 1.0,
        style_surface: str = "sks",
    ):
        super().__init__()
        if rank < 1:
            raise ConfigError("adapter rank must be >= 1")
        self.rank = rank
        self.placement = placement
        self.layer_names = list(layer_names)
        self.pairs = nn.ModuleDict({_key(n): pairs[n] for n in layer_names})
        self.scale = float(scale)
        self.style_surface = style_surface
        self.enabled = True
        self.forward_calls = 0
        self._handles: list = []
        self._model: BaseModel | None = None

    def pair(self, layer_name: str) -> LoRAPair:
        return self.pairs[_key(layer_name)]

    def set_enabled(self, flag: bool) -> None:
        self.enabled = bool(flag)

    @contextmanager
    def scaled(self, scale: float):
        previous = self.scale
        self.scale = float(scale)
        try:
            yield self
        finally:
            self.scale = previous

    def _make_hook(self, pair: LoRAPair):
        def hook(module, args, output):
            if not self.enabled:
                return output
            self.forward_calls += 1
            if self.scale == 0.0:
                return output
            return output + self.scale * pair.delta(args[0])

        return hook

    def attach(self, model: BaseModel) -> "AdapterBundle":
        if self._handles:
            raise ConfigError("adapter is already attached")
        modules = dict(model.unet.named_modules())
        for name in self.layer_names:
            if name not in modules:
                raise IncompatibleAdapterError(f"layer {name!r} missing from base model")
            self._handles.append(modules[name].register_forward_hook(self._make_hook(self.pair(name))))
        self._model = model
        model.adapter = self
        return self

    def detach(self) -> None:
        for handle in self._handles:
            handle.remove()
        self._handles = []
        if self._model is not None and self._model.adapter is self:
            self._model.adapter = None
        self._model = None

    def fingerprint(self) -> str:
        blobs = [p.detach().numpy().tobytes() for _, p in sorted(self.state_dict().items())]
        return sha256_bytes(b"".join(blobs))


def attach_adapter(
    model: BaseModel,
    *,
    rank: int = 1,
    placement=PLACEMENT_UP,
    scale: float = 1.0,
    style_surface: str = "sks",
    seed: int = 0,
) -> AdapterBundle:
    """Wrap the placement set with zero-initialized low-rank factors.

    B = 0 means the adapted model starts exactly equal to the base model;
    A is small-random from ``seed``.
    """
    names = resolve_placement(model.unet, placement)
    if not names:
        raise IncompatibleAdapterError(f"placement {placement!r} matched no layers")
    gen = torch.Generator().manual_seed(seed)
    modules = dict(model.unet.named_modules())
    pairs = {name: LoRAPair(modules[name], rank, gen) for name in names}
    bundle = AdapterBundle(
        rank=rank, placement=placement, layer_names=names, pairs=pairs,
        scale=scale, style_surface=style_surface,
    )
    return bundle.attach(model)


def save_adapter(bundle: AdapterBundle, path, metadata: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": "artlab-adapter-v1",
            "rank": bundle.rank,
            "placement": bundle.placement,
            "layer_names": bundle.layer_names,
            "scale": bundle.scale,
            "style_surface": bundle.style_surface,
            "state": bundle.state_dict(),
            "metadata": metadata or {},
        },
        path,
    )


def load_adapter(model: BaseModel, path) -> AdapterBundle:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    modules = dict(model.unet.named_modules())
    gen = torch.Generator().manual_seed(0)
    pairs = {}
    for name in payload["layer_names"]:
        if name not in modules:
            raise IncompatibleAdapterError(f"layer {name!r} missing from base model")
        pairs[name] = LoRAPair(modules[name], payload["rank"], gen)
    bundle = AdapterBundle(
        rank=payload["rank"],
        placement=payload["placement"],
        layer_names=payload["layer_names"],
        pairs=pairs,
        scale=payload["scale"],
        style_surface=payload["style_surface"],
    )
    bundle.load_state_dict(payload["state"])
    return bundle.attach(model)


@dataclass
class StyleExemplarSet:
    images: list[np.ndarray]  # HWC float in [0, 1]
    captions: list[str]
    label: str = "style"
    fingerprint: str = ""

    def __post_init__(self):
        if len(self.images) < 1:
            raise ConfigError("exemplar set needs at least one image")
        if len(self.images) != len(self.captions):
            raise ConfigError("each exemplar image needs a caption")

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def from_directory(cls, path, label: str | None = None, image_size: int | None = None):
        path = Path(path)
        captions_file = path / "captions.json"
        if not captions_file.exists():
            raise ConfigError(f"missing caption sidecar {captions_file}")
        caption_map = json.loads(captions_file.read_text(encoding="utf-8"))
        names = sorted(caption_map)
        images, captions, hashes = [], [], []
        for name in names:
            img_path = path / name
            images.append(load_image(img_path, size=image_size))
            captions.append(caption_map[name])
            hashes.append(sha256_file(img_path))
        fingerprint = sha256_bytes("".join(hashes).encode() + captions_file.read_bytes())
        return cls(images=images, captions=captions, label=label or path.name,
                   fingerprint=fingerprint)


@dataclass(frozen=True)
class AugmentParams:
    scale: float
    aspect: float
    top: int
    left: int
    crop_h: int
    crop_w: int


def sample_augment_params(rng: np.random.Generator, size: int) -> AugmentParams:
    """Scale uniform on [0.9, 1.0]; crop aspect log-uniform within [3/4, 4/3]."""
    scale = 0.9 + 0.1 * rng.random()
    aspect = math.exp(rng.uniform(math.log(3 / 4), math.log(4 / 3)))
    scaled = max(2, round(size * scale))
    if aspect >= 1.0:
        crop_w = scaled
        crop_h = max(2, math.ceil(scaled / aspect))
    else:
        crop_h = scaled
        crop_w = max(2, math.ceil(scaled * aspect))
    top = int(rng.integers(0, scaled - crop_h + 1))
    left = int(rng.integers(0, scaled - crop_w + 1))
    return AugmentParams(scale, aspect, top, left, crop_h, crop_w)


def augment(
    image: np.ndarray,
    rng: np.random.Generator | None = None,
    params: AugmentParams | None = None,
    out_size: int | None = None,
) -> np.ndarray:
    """Random-resized-crop at the exemplar augmentation settings.

    Resizes by the sampled scale, crops a window whose aspect ratio stays
    within [3/4, 4/3], and resizes back to model resolution.
    """
    size = image.shape[0]
    out_size = out_size or size
    if params is None:
        if rng is None:
            raise ConfigError("augment needs either params or an rng")
        params = sample_augment_params(rng, size)
    x = torch.as_tensor(image, dtype=torch.float32).permute(2, 0, 1)[None]
    scaled = max(2, round(size * params.scale))
    if scaled != size:
        x = F.interpolate(x, size=(scaled, scaled), mode="bilinear", align_corners=False)
    x = x[:, :, params.top : params.top + params.crop_h, params.left : params.left + params.crop_w]
    x = F.interpolate(x, size=(out_size, out_size), mode="bilinear", align_corners=False)
    return x[0].permute(1, 2, 0).clamp(0, 1).numpy()


@dataclass
class LossBreakdown:
    style_loss: float
    content_loss: float
    weight: float

    @property
    def total(self) -> float:
        return self.style_loss + self.weight * self.content_loss


def adapter_training_step(
    images: torch.Tensor,
    captions: list[str],
    model: BaseModel,
    bundle: AdapterBundle,
    *,
    w: float,
    optimizer: torch.optim.Optimizer,
    rng: torch.Generator,
    token: StyleToken,
) -> LossBreakdown:
    """One update of the adapter factors on an (augmented) exemplar batch.

    Style loss: denoising error under the style-suffixed prompt with the
    adapter active. Content loss: the adapted prediction under the plain
    prompt pulled toward the frozen base prediction, sharing the same
    (t, eps) draw so a zero adapter gives exactly zero content loss.
    """
    styled = [compose_style_prompt(c, token) for c in captions]
    cond_star = model.text_encoder.encode_batch(styled)
    cond_plain = model.text_encoder.encode_batch(captions)
    with torch.no_grad():
        x0 = model.codec.encode(images)
    batch = x0.shape[0]
    t = torch.randint(1, model.T + 1, (batch,), generator=rng)
    eps = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
    noised = forward_diffuse(x0, t, eps, model.schedule)

    bundle.set_enabled(True)
    pred_star = model.predict_eps(noised.x_t, noised.t, cond_star)
    style_loss = F.mse_loss(pred_star, eps)
    if w != 0.0:
        pred_plain = model.predict_eps(noised.x_t, noised.t, cond_plain)
        bundle.set_enabled(False)
        with torch.no_grad():
            base_pred = model.predict_eps(noised.x_t, noised.t, cond_plain)
        bundle.set_enabled(True)
        content_loss = F.mse_loss(pred_plain, base_pred.detach())
    else:
        content_loss = torch.zeros(())
    total = style_loss + w * content_loss
    if not torch.isfinite(total):
        raise DivergenceError("non-finite adapter loss")
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    return LossBreakdown(
        style_loss=style_loss.item(), content_loss=float(content_loss.detach()), weight=w
    )


@dataclass
class AdapterTrainConfig:
    rank: int = 1
    placement: str = PLACEMENT_UP
    w: float = 50.0
    steps: int = 1000
    batch_size: int = 5
    lr: float = 2e-4
    scale: float = 1.0
    style_surface: str = "sks"
    seed: int = 0
    augment: bool = True

    def to_dict(self) -> dict:
        return {
            "rank": self.rank, "placement": self.placement, "w": self.w,
            "steps": self.steps, "batch_size": self.batch_size, "lr": self.lr,
            "scale": self.scale, "style_surface": self.style_surface,
            "seed": self.seed, "augment": self.augment,
        }


def train_adapter(
    exemplars: StyleExemplarSet,
    model: BaseModel,
    config: AdapterTrainConfig,
    *,
    checkpoint_path=None,
    log_every: int = 100,
    verify_frozen: bool = True,
) -> tuple[AdapterBundle, dict]:
    """Train a fresh adapter on the exemplar set; only adapter factors move."""
    model.unet.requires_grad_(False)
    model.unet.eval()
    hash_before = model.weight_hash() if verify_frozen else None

    token = model.text_encoder.style_token(config.style_surface)
    bundle = attach_adapter(
        model, rank=config.rank, placement=config.placement, scale=config.scale,
        style_surface=token.surface_form, seed=config.seed,
    )
    optimizer = torch.optim.AdamW(bundle.parameters(), lr=config.lr)
    torch_rng = torch.Generator().manual_seed(config.seed)
    np_rng = np.random.default_rng(config.seed)
    image_size = model.codec.config.image_size

    history = []
    for step in range(1, config.steps + 1):
        idx = np_rng.integers(0, len(exemplars), size=config.batch_size)
        batch_imgs, batch_caps = [], []
        for i in idx:
            img = exemplars.images[int(i)]
            if config.augment:
                img = augment(img, np_rng, out_size=image_size)
            elif img.shape[0] != image_size:
                img = augment(
                    img,
                    params=AugmentParams(1.0, 1.0, 0, 0, img.shape[0], img.shape[1]),
                    out_size=image_size,
                )
            batch_imgs.append(img)
            batch_caps.append(exemplars.captions[int(i)])
        images = torch.as_tensor(np.stack(batch_imgs)).permute(0, 3, 1, 2).contiguous()
        breakdown = adapter_training_step(
            images, batch_caps, model, bundle,
            w=config.w, optimizer=optimizer, rng=torch_rng, token=token,
        )
        if step % log_every == 0 or step == config.steps:
            history.append({"step": step, "style_loss": breakdown.style_loss,
                            "content_loss": breakdown.content_loss, "total": breakdown.total})

    if verify_frozen and model.weight_hash() != hash_before:
        raise AssertionError("base weights changed during adapter training")

    metadata = {
        "config": config.to_dict(),
        "w": config.w,
        "exemplar_fingerprint": exemplars.fingerprint,
        "exemplar_label": exemplars.label,
        "history": history,
    }
    if checkpoint_path is not None:
        save_adapter(bundle, checkpoint_path, metadata)
    return bundle, metadata


@dataclass
class ProbeResult:
    embedding: torch.Tensor
    style_score: float
    images: list[np.ndarray] = field(default_factory=list)


def textual_inversion_probe(
    exemplars: StyleExemplarSet,
    model: BaseModel,
    *,
    steps: int,
    lr: float = 5e-2,
    batch_size: int = 5,
    seed: int = 0,
    style_surface: str = "sks",
    eval_prompts: list[str] | None = None,
    eval_seeds: list[int] | None = None,
    eval_steps: int = 20,
    guidance_scale: float = 1.0,
    style_embedder=None,
) -> ProbeResult:
    """Optimize only the pseudo-token embedding against the exemplars.

    The base model stays fully frozen (the learned vector is injected as a
    token override, never written into the table). Returns the vector plus
    the style score of generations made with it, for comparison against an
    adapter trained on the same exemplars.
    """
    from .diffusion import ddim_sample, denoising_loss  # local alias for clarity

    model.unet.requires_grad_(False)
    model.unet.eval()
    hash_before = model.weight_hash()

    token = model.text_encoder.style_token(style_surface)
    vector = nn.Parameter(token.embedding.clone())
    optimizer = torch.optim.Adam([vector], lr=lr)
    torch_rng = torch.Generator().manual_seed(seed)
    np_rng = np.random.default_rng(seed)
    image_size = model.codec.config.image_size
    overrides = {token.vocabulary_id: vector}

    if model.adapter is not None:
        model.adapter.set_enabled(False)

    for caption in exemplars.captions:
        ids, _ = model.text_encoder.tokenize(compose_style_prompt(caption, token))
        if token.vocabulary_id not in ids:
            raise ConfigError(
                f"style token truncated out of {caption!r}; raise the encoder's max_tokens"
            )

    for _ in range(steps):
        idx = np_rng.integers(0, len(exemplars), size=batch_size)
        imgs = [augment(exemplars.images[int(i)], np_rng, out_size=image_size) for i in idx]
        caps = [compose_style_prompt(exemplars.captions[int(i)], token) for i in idx]
        images = torch.as_tensor(np.stack(imgs)).permute(0, 3, 1, 2).contiguous()
        with torch.no_grad():
            x0 = model.codec.encode(images)
        cond = model.text_encoder.encode_batch(caps, token_overrides=overrides)
        t = torch.randint(1, model.T + 1, (x0.shape[0],), generator=torch_rng)
        eps = torch.randn(x0.shape, generator=torch_rng, dtype=x0.dtype)
        loss, _ = denoising_loss(model.predict_eps, model.schedule, x0, cond, t, eps)
        if not torch.isfinite(loss):
            raise DivergenceError("non-finite probe loss")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

    if model.weight_hash() != hash_before:
        raise AssertionError("base weights changed during textual inversion probe")

    prompts = eval_prompts if eval_prompts is not None else list(exemplars.captions)
    seeds = eval_seeds if eval_seeds is not None else list(range(len(prompts)))
    images_out: list[np.ndarray] = []
    learned = vector.detach()
    with torch.no_grad():
        for prompt, sd in zip(prompts, seeds):
            styled = compose_style_prompt(prompt, token)
            cond = model.text_encoder.encode_prompt(styled, token_overrides={token.vocabulary_id: learned})
            latent = ddim_sample(
                model, cond, steps=eval_steps, guidance_scale=guidance_scale, seeds=int(sd)
            )
            img = model.codec.decode(latent)[0].permute(1, 2, 0).clamp(0, 1).numpy()
            images_out.append(img)

    score = float("nan")
    if style_embedder is not None:
        from .evaluation import style_score as _style_score

        score = _style_score(images_out, exemplars, style_embedder)
    return ProbeResult(embedding=learned, style_score=score, images=images_out)
