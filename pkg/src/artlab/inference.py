"""User-facing generation and stylization with timestep-gated style injection.

The injection policy is expressed in diffusion-time units: the adapter is
active exactly at sampling steps whose timestep t satisfies t <= t_start,
so a larger t_start switches the style on earlier in the denoising walk
and yields a more stylized result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .diffusion import (
    DEFAULT_GUIDANCE_SCALE,
    BaseModel,
    SamplerStep,
    ddim_invert,
    ddim_sample,
)
from .errors import ConfigError, IncompatibleAdapterError, TimestepRangeError
from .text import compose_style_prompt

CONDITION_PLAIN = "plain"
CONDITION_STYLED = "styled"


@dataclass(frozen=True)
class InjectionPolicy:
    t_start: int
    scale: float = 1.0
    inactive_conditioning: str = CONDITION_PLAIN

    def __post_init__(self):
        if self.inactive_conditioning not in (CONDITION_PLAIN, CONDITION_STYLED):
            raise ConfigError(
                f"inactive_conditioning must be plain or styled, got {self.inactive_conditioning!r}"
            )

    def active_at(self, t: int) -> bool:
        return t <= self.t_start


@dataclass
class GenerationResult:
    image: np.ndarray
    latent: torch.Tensor
    trace: list[SamplerStep]
    manifest: dict


def _check_policy(policy: InjectionPolicy, T: int) -> None:
    if policy.t_start < 0 or policy.t_start > T:
        raise TimestepRangeError(f"t_start must be in [0, {T}]")


def _ensure_attached(model: BaseModel, adapter) -> None:
    if adapter is None:
        return
    if model.adapter is adapter:
        return
    if model.adapter is not None:
        raise IncompatibleAdapterError("another adapter is already attached to this model")
    adapter.attach(model)


def generate(
    model: BaseModel,
    adapter,
    prompt: str,
    *,
    policy: InjectionPolicy,
    guidance_scale: float = DEFAULT_GUIDANCE_SCALE,
    seed: int = 0,
    steps: int = 50,
) -> GenerationResult:
    """Text-to-image with the adapter gated by the injection policy.

    While the adapter is active the conditioning is the style-suffixed
    prompt; on inactive steps it follows the policy (plain content prompt
    by default). Deterministic given (weights, prompt, policy, seed).
    """
    if not prompt:
        raise ConfigError("prompt must be non-empty")
    _check_policy(policy, model.T)
    _ensure_attached(model, adapter)

    cond_plain = model.text_encoder.encode_prompt(prompt)
    if adapter is not None:
        token = model.text_encoder.style_token(adapter.style_surface)
        styled_prompt = compose_style_prompt(prompt, token)
        cond_styled = model.text_encoder.encode_prompt(styled_prompt)
    else:
        styled_prompt = prompt
        cond_styled = cond_plain

    inactive = cond_plain if policy.inactive_conditioning == CONDITION_PLAIN else cond_styled

    def conditioning(t: int):
        return cond_styled if policy.active_at(t) else inactive

    trace: list[SamplerStep] = []
    hook = policy.active_at if adapter is not None else None
    if adapter is not None:
        with adapter.scaled(policy.scale):
            latent = ddim_sample(
                model, conditioning, steps=steps, guidance_scale=guidance_scale,
                seeds=seed, adapter_hook=hook, step_callback=trace.append,
            )
    else:
        latent = ddim_sample(
            model, conditioning, steps=steps, guidance_scale=guidance_scale,
            seeds=seed, step_callback=trace.append,
        )
    with torch.no_grad():
        image = model.codec.decode(latent)[0].permute(1, 2, 0).clamp(0, 1).numpy()
    manifest = {
        "command": "generate",
        "prompt": prompt,
        "styled_prompt": styled_prompt,
        "t_start": policy.t_start,
        "adapter_scale": policy.scale,
        "inactive_conditioning": policy.inactive_conditioning,
        "guidance_scale": guidance_scale,
        "seed": seed,
        "steps": steps,
    }
    return GenerationResult(image=image, latent=latent, trace=trace, manifest=manifest)


def stylize(
    model: BaseModel,
    adapter,
    image: np.ndarray,
    content_prompt: str,
    *,
    invert_to: int | None = None,
    policy: InjectionPolicy,
    guidance_scale: float = DEFAULT_GUIDANCE_SCALE,
    steps: int = 50,
    invert_conditioning: str = "content",
) -> GenerationResult:
    """Invert a real image partway, then denoise with the style injected.

    ``invert_to`` defaults to 0.8 T. Inversion runs adapter-off and
    unguided with the content (or null) conditioning; the styled denoising
    then resumes from the reached grid point.
    """
    if not content_prompt:
        raise ConfigError("content prompt must be non-empty")
    _check_policy(policy, model.T)
    _ensure_attached(model, adapter)
    if invert_to is None:
        invert_to = int(round(0.8 * model.T))

    pixels = torch.as_tensor(np.asarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
    if invert_conditioning == "content":
        cond_invert = model.text_encoder.encode_prompt(content_prompt)
    elif invert_conditioning == "null":
        cond_invert = model.null_conditioning()
    else:
        raise ConfigError("invert_conditioning must be 'content' or 'null'")
    inverted = ddim_invert(
        model, pixels, cond_invert, invert_to, steps=steps, guidance_scale=1.0
    )

    cond_plain = model.text_encoder.encode_prompt(content_prompt)
    if adapter is not None:
        token = model.text_encoder.style_token(adapter.style_surface)
        styled_prompt = compose_style_prompt(content_prompt, token)
        cond_styled = model.text_encoder.encode_prompt(styled_prompt)
    else:
        styled_prompt = content_prompt
        cond_styled = cond_plain
    inactive = cond_plain if policy.inactive_conditioning == CONDITION_PLAIN else cond_styled

    def conditioning(t: int):
        return cond_styled if policy.active_at(t) else inactive

    trace: list[SamplerStep] = []
    hook = policy.active_at if adapter is not None else None
    start_t = int(inverted.t[0])
    if adapter is not None:
        with adapter.scaled(policy.scale):
            latent = ddim_sample(
                model, conditioning, steps=steps, guidance_scale=guidance_scale,
                x_init=inverted.x_t, start_t=start_t,
                adapter_hook=hook, step_callback=trace.append,
            )
    else:
        latent = ddim_sample(
            model, conditioning, steps=steps, guidance_scale=guidance_scale,
            x_init=inverted.x_t, start_t=start_t, step_callback=trace.append,
        )
    with torch.no_grad():
        out = model.codec.decode(latent)[0].permute(1, 2, 0).clamp(0, 1).numpy()
    manifest = {
        "command": "stylize",
        "content_prompt": content_prompt,
        "styled_prompt": styled_prompt,
        "invert_to": invert_to,
        "reached_step": start_t,
        "invert_conditioning": invert_conditioning,
        "t_start": policy.t_start,
        "adapter_scale": policy.scale,
        "guidance_scale": guidance_scale,
        "steps": steps,
    }
    return GenerationResult(image=out, latent=latent, trace=trace, manifest=manifest)


LABEL_STRIP_PX = 12


def render_grid(
    images: list[np.ndarray],
    labels: list[str] | None = None,
    *,
    out_path=None,
    columns: int | None = None,
) -> np.ndarray:
    """Tile images (with a label strip under each) into one grid image.

    Layout: ceil(sqrt(N)) columns. Returns the grid as a uint8 HWC array
    and writes a PNG when out_path is given.
    """
    if not images:
        raise ConfigError("render_grid needs at least one image")
    if labels is not None and len(labels) != len(images):
        raise ConfigError("one label per image required")
    n = len(images)
    cols = columns or math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    cell_h, cell_w = images[0].shape[0], images[0].shape[1]
    strip = LABEL_STRIP_PX if labels is not None else 0

    grid = Image.new("RGB", (cols * cell_w, rows * (cell_h + strip)), color=(255, 255, 255))
    draw = ImageDraw.Draw(grid)
    for i, img in enumerate(images):
        arr = np.clip(np.asarray(img, dtype=np.float32) * 255.0 + 0.5, 0, 255).astype(np.uint8)
        if arr.shape[:2] != (cell_h, cell_w):
            raise ConfigError("all grid images must share one size")
        r, c = divmod(i, cols)
        grid.paste(Image.fromarray(arr), (c * cell_w, r * (cell_h + strip)))
        if labels is not None:
            draw.text((c * cell_w + 1, r * (cell_h + strip) + cell_h), str(labels[i])[:20],
                      fill=(0, 0, 0))
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        grid.save(out_path)
    return np.asarray(grid)
