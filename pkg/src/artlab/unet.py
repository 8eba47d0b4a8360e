"""Compact U-shaped noise predictor with cross-attention to prompt tokens.

Module structure is intentionally grouped under ``down_blocks``,
``mid_block`` and ``up_blocks`` so adapter placement rules can address
the up path by name.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeMismatchError


@dataclass
class UNetConfig:
    in_channels: int = 4
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2)
    text_dim: int = 64
    time_dim: int = 64
    n_heads: int = 4
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "base_channels": self.base_channels,
            "channel_mults": list(self.channel_mults),
            "text_dim": self.text_dim,
            "time_dim": self.time_dim,
            "n_heads": self.n_heads,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "UNetConfig":
        data = dict(data)
        data["channel_mults"] = tuple(data["channel_mults"])
        return cls(**data)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        groups = min(8, in_ch)
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(min(8, out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    def __init__(self, channels: int, text_dim: int, n_heads: int):
        super().__init__()
        assert channels % n_heads == 0
        self.n_heads = n_heads
        self.norm = nn.GroupNorm(min(8, channels), channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(text_dim, channels)
        self.to_v = nn.Linear(text_dim, channels)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        dh = c // self.n_heads
        q = self.to_q(self.norm(x).reshape(b, c, h * w).transpose(1, 2))
        k = self.to_k(text)
        v = self.to_v(text)
        q = q.reshape(b, h * w, self.n_heads, dh).transpose(1, 2)
        k = k.reshape(b, -1, self.n_heads, dh).transpose(1, 2)
        v = v.reshape(b, -1, self.n_heads, dh).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, h * w, c)
        out = self.to_out(out).transpose(1, 2).reshape(b, c, h, w)
        return x + out


class DownBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int, text_dim: int,
                 n_heads: int, downsample: bool):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch, time_dim)
        self.attn = CrossAttention(out_ch, text_dim, n_heads)
        self.down = nn.Conv2d(out_ch, out_ch, 3, stride=2, padding=1) if downsample else None

    def forward(self, x, temb, text):
        h = self.attn(self.res(x, temb), text)
        skip = h
        if self.down is not None:
            h = self.down(h)
        return h, skip


class MidBlock(nn.Module):
    def __init__(self, ch: int, time_dim: int, text_dim: int, n_heads: int):
        super().__init__()
        self.res1 = ResBlock(ch, ch, time_dim)
        self.attn = CrossAttention(ch, text_dim, n_heads)
        self.res2 = ResBlock(ch, ch, time_dim)

    def forward(self, x, temb, text):
        return self.res2(self.attn(self.res1(x, temb), text), temb)


class UpBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int, text_dim: int,
                 n_heads: int, upsample: bool):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch, time_dim)
        self.attn = CrossAttention(out_ch, text_dim, n_heads)
        self.up = nn.Conv2d(out_ch, out_ch, 3, padding=1) if upsample else None

    def forward(self, x, skip, temb, text):
        h = self.attn(self.res(torch.cat([x, skip], dim=1), temb), text)
        if self.up is not None:
            h = self.up(F.interpolate(h, scale_factor=2, mode="nearest"))
        return h


class UNet(nn.Module):
    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        torch.manual_seed(config.seed)
        b = config.base_channels
        chs = [b * m for m in config.channel_mults]
        n = len(chs)

        self.in_conv = nn.Conv2d(config.in_channels, b, 3, padding=1)
        self.time_mlp = nn.Sequential(
            nn.Linear(config.time_dim, config.time_dim),
            nn.SiLU(),
            nn.Linear(config.time_dim, config.time_dim),
        )
        self.down_blocks = nn.ModuleList(
            DownBlock(
                b if i == 0 else chs[i - 1], chs[i], config.time_dim, config.text_dim,
                config.n_heads, downsample=i < n - 1,
            )
            for i in range(n)
        )
        self.mid_block = MidBlock(chs[-1], config.time_dim, config.text_dim, config.n_heads)
        self.up_blocks = nn.ModuleList(
            UpBlock(
                chs[i] + (chs[-1] if i == n - 1 else chs[i + 1]), chs[i],
                config.time_dim, config.text_dim, config.n_heads, upsample=i > 0,
            )
            for i in reversed(range(n))
        )
        self.out_norm = nn.GroupNorm(min(8, chs[0]), chs[0])
        self.out_conv = nn.Conv2d(chs[0], config.in_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeMismatchError(f"bad latent shape {tuple(x.shape)}")
        if text.ndim != 3 or text.shape[-1] != self.config.text_dim:
            raise ShapeMismatchError(f"bad text embedding shape {tuple(text.shape)}")
        temb = self.time_mlp(timestep_embedding(t, self.config.time_dim))
        h = self.in_conv(x)
        skips = []
        for block in self.down_blocks:
            h, skip = block(h, temb, text)
            skips.append(skip)
        h = self.mid_block(h, temb, text)
        for block in self.up_blocks:
            h = block(h, skips.pop(), temb, text)
        return self.out_conv(F.silu(self.out_norm(h)))
