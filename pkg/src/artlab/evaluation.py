"""Quantitative harness: style similarity, content similarity, alignment, FID.

Desk-scale substitutes for the big pretrained metric networks: style
features are Gram (channel-correlation) statistics of a small conv stack,
content features are its pooled deepest activations, and alignment reuses
the corpus filter's joint image-text scorer. Scores are only comparable
within one embedder fingerprint, which every report records.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import DEFAULT_CAPTION_EXCLUSION_TERMS, keyword_filter
from .errors import ConfigError, EmbedderError
from .fileio import sha256_bytes
from .scoring import SCORE_SCALE

logger = logging.getLogger(__name__)

FID_REGULARIZATION_EPS = 1e-6


def _to_batch(images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        return images
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise EmbedderError(f"expected a list of HWC RGB images, got {arr.shape}")
    return torch.as_tensor(arr).permute(0, 3, 1, 2).contiguous()


class ConvFeatureStack(nn.Module):
    """Three-stage conv feature stack shared by the style and content metrics."""

    def __init__(self, channels: tuple[int, ...] = (16, 32, 64), seed: int = 0):
        super().__init__()
        self.channels = tuple(channels)
        torch.manual_seed(seed)
        layers = []
        in_ch = 3
        for out_ch in channels:
            layers.append(nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1))
            in_ch = out_ch
        self.convs = nn.ModuleList(layers)
        self.requires_grad_(False)
        self.eval()

    def activations(self, images) -> list[torch.Tensor]:
        x = _to_batch(images) * 2.0 - 1.0
        acts = []
        for conv in self.convs:
            x = F.silu(conv(x))
            acts.append(x)
        return acts

    @torch.no_grad()
    def style_vectors(self, images) -> np.ndarray:
        """Per-image channel-correlation (Gram) statistics, L2-normalized."""
        acts = self.activations(images)
        chunks = []
        for act in acts:
            b, c, h, w = act.shape
            flat = act.reshape(b, c, h * w)
            gram = flat @ flat.transpose(1, 2) / (h * w)
            iu, ju = torch.triu_indices(c, c)
            vec = gram[:, iu, ju]
            chunks.append(F.normalize(vec, dim=1))
        out = F.normalize(torch.cat(chunks, dim=1), dim=1)
        return out.numpy()

    @torch.no_grad()
    def content_vectors(self, images) -> np.ndarray:
        """Pooled deepest-layer activations (style-stripped content features)."""
        deepest = self.activations(images)[-1]
        pooled = deepest.mean(dim=(2, 3))
        return F.normalize(pooled, dim=1).numpy()

    def fingerprint(self) -> str:
        blobs = [p.detach().numpy().tobytes() for _, p in sorted(self.state_dict().items())]
        return sha256_bytes(b"".join(blobs))


def train_feature_stack(
    images: list[np.ndarray],
    *,
    channels: tuple[int, ...] = (16, 32, 64),
    steps: int = 300,
    batch_size: int = 32,
    lr: float = 2e-3,
    seed: int = 0,
) -> ConvFeatureStack:
    """Train the stack as a small autoencoder encoder, then freeze it."""
    stack = ConvFeatureStack(channels=channels, seed=seed)
    stack.requires_grad_(True)
    decoder_layers: list[nn.Module] = []
    in_ch = channels[-1]
    for out_ch in list(reversed(channels[:-1])) + [3]:
        decoder_layers += [
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.SiLU() if out_ch != 3 else nn.Identity(),
        ]
        in_ch = out_ch
    decoder = nn.Sequential(*decoder_layers)
    params = list(stack.parameters()) + list(decoder.parameters())
    optimizer = torch.optim.AdamW(params, lr=lr)
    data = _to_batch(images)
    gen = torch.Generator().manual_seed(seed)
    stack.train()
    for _ in range(steps):
        idx = torch.randint(0, data.shape[0], (batch_size,), generator=gen)
        batch = data[idx]
        recon = decoder(stack.activations(batch)[-1])
        loss = F.mse_loss(recon, batch * 2.0 - 1.0)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    stack.requires_grad_(False)
    stack.eval()
    return stack


def save_feature_stack(stack: ConvFeatureStack, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": "artlab-features-v1",
            "config": {"channels": list(stack.channels)},
            "state": stack.state_dict(),
        },
        path,
    )


def load_feature_stack(path) -> ConvFeatureStack:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    stack = ConvFeatureStack(channels=tuple(payload["config"]["channels"]))
    stack.load_state_dict(payload["state"])
    stack.eval()
    return stack


def _exemplar_images(exemplars) -> list[np.ndarray]:
    return list(exemplars.images) if hasattr(exemplars, "images") else list(exemplars)


def style_score(generated, exemplars, style_embedder) -> float:
    """Mean cosine between style vectors of generations and exemplars."""
    gen_list = _exemplar_images(generated)
    ex_list = _exemplar_images(exemplars)
    if not gen_list or not ex_list:
        raise ConfigError("style_score needs non-empty image sets")
    try:
        gv = style_embedder.style_vectors(gen_list)
        ev = style_embedder.style_vectors(ex_list)
    except Exception as exc:  # noqa: BLE001 - contract: typed error out
        raise EmbedderError(f"style embedder failed: {exc}") from exc
    return float(np.mean(gv @ ev.T))


def content_score(generated, reference, content_embedder) -> float:
    """Cosine of pooled content features; paired when lengths match."""
    gen_list = _exemplar_images(generated)
    ref_list = _exemplar_images(reference)
    if not gen_list or not ref_list:
        raise ConfigError("content_score needs non-empty image sets")
    try:
        gv = content_embedder.content_vectors(gen_list)
        rv = content_embedder.content_vectors(ref_list)
    except Exception as exc:  # noqa: BLE001
        raise EmbedderError(f"content embedder failed: {exc}") from exc
    if len(gen_list) == len(ref_list):
        return float(np.mean(np.sum(gv * rv, axis=1)))
    return float(np.mean(gv @ rv.T))


def alignment_score(generated, prompts, joint_embedder) -> float:
    """Image-text cosine from the joint scorer (paired when lengths match)."""
    gen_list = _exemplar_images(generated)
    prompt_list = [prompts] if isinstance(prompts, str) else list(prompts)
    try:
        matrix = joint_embedder.score(gen_list, prompt_list) / SCORE_SCALE
    except Exception as exc:  # noqa: BLE001
        raise EmbedderError(f"joint embedder failed: {exc}") from exc
    if len(prompt_list) == len(gen_list):
        return float(np.mean(np.diag(matrix)))
    return float(np.mean(matrix))


def frechet_distance(
    mu1: np.ndarray, sigma1: np.ndarray, mu2: np.ndarray, sigma2: np.ndarray,
    eps: float = FID_REGULARIZATION_EPS,
) -> float:
    """||mu1-mu2||^2 + tr(s1 + s2 - 2 (s1 s2)^(1/2)) with PSD regularization."""
    mu1 = np.asarray(mu1, dtype=np.float64)
    mu2 = np.asarray(mu2, dtype=np.float64)
    sigma1 = (np.asarray(sigma1, dtype=np.float64) + np.asarray(sigma1, dtype=np.float64).T) / 2.0
    sigma2 = (np.asarray(sigma2, dtype=np.float64) + np.asarray(sigma2, dtype=np.float64).T) / 2.0

    # Regularize only when a covariance is not PSD after symmetrization, so
    # clean inputs keep full precision.
    psd_tol = 10 * np.finfo(np.float64).eps * max(
        1.0, float(np.abs(sigma1).max()), float(np.abs(sigma2).max())
    )
    fixed = []
    for sigma in (sigma1, sigma2):
        min_eig = float(np.linalg.eigvalsh(sigma).min())
        if min_eig < -psd_tol:
            logger.warning(
                "covariance not PSD (min eig %.3e); regularizing with eps=%.1e", min_eig, eps
            )
            sigma = sigma + (eps - min_eig) * np.eye(sigma.shape[0])
        fixed.append(sigma)
    sigma1, sigma2 = fixed

    covmean, _ = scipy.linalg.sqrtm(sigma1 @ sigma2, disp=False)
    if not np.all(np.isfinite(covmean)):
        logger.warning("sqrtm failed; retrying with eps=%.1e offsets", eps)
        offset = eps * np.eye(sigma1.shape[0])
        covmean, _ = scipy.linalg.sqrtm((sigma1 + offset) @ (sigma2 + offset), disp=False)
    if np.iscomplexobj(covmean):
        imag_max = float(np.abs(covmean.imag).max())
        if imag_max > 1e-5 * max(1.0, float(np.abs(covmean.real).max())):
            logger.warning("sqrtm imaginary part %.3e; taking real part", imag_max)
        covmean = covmean.real

    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(sigma1 + sigma2 - 2.0 * covmean))
    return max(value, 0.0)


def fid(set_a, set_b, feature_extractor) -> float:
    """Frechet distance between Gaussian fits of content features."""
    a_list = _exemplar_images(set_a)
    b_list = _exemplar_images(set_b)
    if len(a_list) < 2 or len(b_list) < 2:
        raise ConfigError("fid needs at least two images per set")
    try:
        fa = feature_extractor.content_vectors(a_list).astype(np.float64)
        fb = feature_extractor.content_vectors(b_list).astype(np.float64)
    except Exception as exc:  # noqa: BLE001
        raise EmbedderError(f"feature extractor failed: {exc}") from exc
    return frechet_distance(
        fa.mean(axis=0), np.cov(fa, rowvar=False), fb.mean(axis=0), np.cov(fb, rowvar=False)
    )


@dataclass
class EvalReport:
    name: str
    style_score: float
    content_score: float
    alignment_score: float
    fid: float
    n_samples: int
    config_fingerprint: str
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "style_score": self.style_score,
            "content_score": self.content_score,
            "alignment_score": self.alignment_score,
            "fid": self.fid,
            "n_samples": self.n_samples,
            "config_fingerprint": self.config_fingerprint,
            "error": self.error,
        }


@dataclass
class BenchmarkAdapter:
    """One benchmark row: a named adapter checkpoint and its style exemplars."""

    name: str
    adapter_path: str
    exemplars: object  # StyleExemplarSet


@dataclass
class BenchmarkConfig:
    prompts: list[str]
    seeds: list[int]
    sampler_steps: int = 20
    guidance_scale: float = 7.5
    t_start: int | None = None  # None: adapter active at every step
    adapter_scale: float = 1.0
    reference_images: list | None = None  # FID reference; defaults to exemplars per row

    def fingerprint(self) -> str:
        payload = {
            "prompts": self.prompts,
            "seeds": self.seeds,
            "sampler_steps": self.sampler_steps,
            "guidance_scale": self.guidance_scale,
            "t_start": self.t_start,
            "adapter_scale": self.adapter_scale,
        }
        return sha256_bytes(json.dumps(payload, sort_keys=True).encode())


def check_prompts_art_free(prompts: list[str]) -> None:
    offenders = [
        (p, keyword_filter(p, DEFAULT_CAPTION_EXCLUSION_TERMS).term)
        for p in prompts
        if not keyword_filter(p, DEFAULT_CAPTION_EXCLUSION_TERMS).accept
    ]
    if offenders:
        raise ConfigError(f"benchmark prompts contain art terms: {offenders}")


def run_benchmark(
    model,
    adapters: list[BenchmarkAdapter],
    config: BenchmarkConfig,
    *,
    style_embedder,
    joint_embedder,
) -> list[EvalReport]:
    """Generate with each adapter over the prompt/seed grid and score it.

    Always emits a base-model row first. Rows that fail are reported with
    their error and the run continues.
    """
    from .adapter import load_adapter
    from .inference import InjectionPolicy, generate

    check_prompts_art_free(config.prompts)
    if not config.prompts or not config.seeds:
        raise ConfigError("benchmark needs prompts and seeds")
    fingerprint = config.fingerprint() + ":" + style_embedder.fingerprint()[:16]

    t_start = model.T if config.t_start is None else config.t_start
    reports: list[EvalReport] = []

    def base_images():
        images = []
        for k, prompt in enumerate(config.prompts):
            for seed in config.seeds:
                cond = model.text_encoder.encode_prompt(prompt)
                from .diffusion import ddim_sample

                latent = ddim_sample(
                    model, cond, steps=config.sampler_steps,
                    guidance_scale=config.guidance_scale, seeds=seed + 10_000 * k,
                )
                images.append(model.codec.decode(latent)[0].permute(1, 2, 0).clamp(0, 1).numpy())
        return images

    base = base_images()
    prompt_per_image = [p for p in config.prompts for _ in config.seeds]

    def score_row(name, images, exemplars) -> EvalReport:
        ref = config.reference_images
        fid_ref = ref if ref is not None else (_exemplar_images(exemplars) if exemplars else None)
        fid_value = float("nan")
        if fid_ref is not None and len(images) >= 2 and len(fid_ref) >= 2:
            fid_value = fid(images, fid_ref, style_embedder)
        return EvalReport(
            name=name,
            style_score=style_score(images, exemplars, style_embedder) if exemplars else float("nan"),
            content_score=content_score(images, base, style_embedder),
            alignment_score=alignment_score(images, prompt_per_image, joint_embedder),
            fid=fid_value,
            n_samples=len(images),
            config_fingerprint=fingerprint,
        )

    reports.append(score_row("base", base, None))

    for spec in adapters:
        try:
            bundle = load_adapter(model, spec.adapter_path)
            try:
                policy = InjectionPolicy(t_start=t_start, scale=config.adapter_scale)
                images = []
                for k, prompt in enumerate(config.prompts):
                    for seed in config.seeds:
                        out = generate(
                            model, bundle, prompt, policy=policy,
                            guidance_scale=config.guidance_scale,
                            seed=seed + 10_000 * k, steps=config.sampler_steps,
                        )
                        images.append(out.image)
                reports.append(score_row(spec.name, images, spec.exemplars))
            finally:
                bundle.detach()
        except Exception as exc:  # noqa: BLE001 - per-row failures must not kill the run
            logger.warning("benchmark row %s failed: %s", spec.name, exc)
            reports.append(
                EvalReport(
                    name=spec.name, style_score=float("nan"), content_score=float("nan"),
                    alignment_score=float("nan"), fid=float("nan"), n_samples=0,
                    config_fingerprint=fingerprint, error=str(exc),
                )
            )
    return reports


def render_report_table(reports: list[EvalReport]) -> str:
    header = f"{'name':<16} {'style':>7} {'content':>8} {'align':>7} {'fid':>9} {'n':>5}"
    lines = [header, "-" * len(header)]
    for rep in reports:
        lines.append(
            f"{rep.name:<16} {rep.style_score:>7.3f} {rep.content_score:>8.3f} "
            f"{rep.alignment_score:>7.3f} {rep.fid:>9.3f} {rep.n_samples:>5d}"
            + (f"  ERROR: {rep.error}" if rep.error else "")
        )
    return "\n".join(lines)
