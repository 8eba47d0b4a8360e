"""Variance schedule for the diffusion process.

Convention: ``beta`` holds the per-step variances for steps 1..T, and
``alpha_bar`` holds the cumulative signal coefficient at every timestep
0..T, with ``alpha_bar[0] == 1`` (timestep 0 is the clean image).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 2e-2


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        if beta.ndim != 1 or alpha_bar.shape != (beta.shape[0] + 1,):
            raise ConfigError("alpha_bar must have exactly one more entry than beta")
        if not np.all((beta > 0.0) & (beta < 1.0)):
            raise ConfigError("beta values must lie in (0, 1)")
        if np.any(np.diff(beta) < 0.0):
            raise ConfigError("beta must be non-decreasing")
        if np.any(np.diff(alpha_bar) >= 0.0):
            raise ConfigError("alpha_bar must be strictly decreasing")
        if alpha_bar[0] < 0.99:
            raise ConfigError("alpha_bar[0] must be >= 0.99")

    @property
    def T(self) -> int:
        return int(self.beta.shape[0])

    @classmethod
    def from_beta(cls, beta) -> "NoiseSchedule":
        beta = np.asarray(beta, dtype=np.float64)
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
        return cls(beta=beta, alpha_bar=alpha_bar)

    @classmethod
    def linear(
        cls,
        T: int = DEFAULT_T,
        beta_start: float = DEFAULT_BETA_START,
        beta_end: float = DEFAULT_BETA_END,
    ) -> "NoiseSchedule":
        if T < 1:
            raise ConfigError("schedule needs at least one step")
        return cls.from_beta(np.linspace(beta_start, beta_end, T))

    def to_dict(self) -> dict:
        return {
            "kind": "explicit",
            "beta": self.beta.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NoiseSchedule":
        return cls.from_beta(np.asarray(data["beta"], dtype=np.float64))


def time_grid(T: int, steps: int) -> np.ndarray:
    """Ascending integer timesteps 0 = tau_0 < ... < tau_steps = T.

    Shared by the sampler and the inverter so the two traverse the same
    grid points in opposite directions.
    """
    if steps < 1 or steps > T:
        raise ConfigError(f"steps must be in [1, T={T}], got {steps}")
    return np.array([(i * T) // steps for i in range(steps + 1)], dtype=np.int64)
