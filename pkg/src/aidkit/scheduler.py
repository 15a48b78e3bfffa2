"""Forward noising and deterministic DDIM sampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DomainError

# Sentinel "previous" index for the final DDIM step; alpha_bar there is 1.
FINAL = -1


# Linear betas are defined on a 1000-step reference and stretched to
# train_steps, so the last step is (almost) pure noise at any length.
REFERENCE_STEPS = 1000
REFERENCE_BETA_START = 1e-4
REFERENCE_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    train_steps: int = 100
    beta_start: Optional[float] = None
    beta_end: Optional[float] = None
    betas: np.ndarray = field(init=False, repr=False, compare=False)
    alphas_cumprod: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.train_steps < 1:
            raise ConfigError("train_steps must be positive")
        scale = REFERENCE_STEPS / self.train_steps
        if self.beta_start is None:
            object.__setattr__(self, "beta_start", REFERENCE_BETA_START * scale)
        if self.beta_end is None:
            object.__setattr__(self, "beta_end", REFERENCE_BETA_END * scale)
        betas = np.linspace(self.beta_start, self.beta_end, self.train_steps)
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ConfigError("betas must lie in (0, 1)")
        abar = np.cumprod(1.0 - betas)
        if np.any(np.diff(abar) >= 0) or abar[-1] <= 0:
            raise ConfigError("alphas_cumprod must be strictly decreasing in (0, 1)")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas_cumprod", abar)

    def alpha_bar(self, j: int) -> float:
        if j == FINAL:
            return 1.0
        if not 0 <= j < self.train_steps:
            raise DomainError(f"step index {j} outside [0, {self.train_steps})")
        return float(self.alphas_cumprod[j])


@dataclass(frozen=True)
class SamplerConfig:
    inference_steps: int = 25
    eta: float = 0.0
    # clamp the predicted clean image to the data range before re-noising
    clip_sample: bool = True

    def __post_init__(self):
        if self.inference_steps < 1:
            raise ConfigError("inference_steps must be at least 1")
        if self.eta != 0.0:
            raise ConfigError("only deterministic DDIM (eta = 0) is supported")


def add_noise(x0: np.ndarray, eps: np.ndarray, j: int, sched: NoiseSchedule) -> np.ndarray:
    if x0.shape != eps.shape:
        raise ConfigError(f"x0 and eps shapes differ: {x0.shape} vs {eps.shape}")
    if not 0 <= j < sched.train_steps:
        raise DomainError(f"step index {j} outside [0, {sched.train_steps})")
    abar = sched.alphas_cumprod[j]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def predict_x0(z_j, eps_pred, j, sched: NoiseSchedule) -> np.ndarray:
    abar = sched.alpha_bar(j)
    if abar <= 0:
        raise DomainError(f"nonpositive alpha_bar at step {j}")
    return (z_j - np.sqrt(1.0 - abar) * eps_pred) / np.sqrt(abar)


def ddim_step(z_j, eps_pred, j: int, j_prev: int, cfg: SamplerConfig, sched: NoiseSchedule):
    """One eta=0 DDIM update from index ``j`` to ``j_prev`` (``FINAL`` = clean)."""
    if cfg.eta != 0.0:
        raise ConfigError("stochastic DDIM is not supported")
    if j_prev != FINAL and j_prev >= j:
        raise DomainError(f"j_prev={j_prev} must precede j={j}")
    x0_hat = predict_x0(z_j, eps_pred, j, sched)
    if cfg.clip_sample:
        x0_hat = np.clip(x0_hat, -1.0, 1.0)
    abar_prev = sched.alpha_bar(j_prev)
    if abar_prev == 1.0:
        return x0_hat
    return np.sqrt(abar_prev) * x0_hat + np.sqrt(1.0 - abar_prev) * eps_pred


def make_timesteps(cfg: SamplerConfig, sched: NoiseSchedule) -> list[int]:
    """Evenly strided indices descending from ``train_steps - 1``."""
    if cfg.inference_steps > sched.train_steps:
        raise ConfigError(
            f"inference_steps={cfg.inference_steps} exceeds train_steps={sched.train_steps}"
        )
    stride = sched.train_steps // cfg.inference_steps
    return [sched.train_steps - 1 - k * stride for k in range(cfg.inference_steps)]


@dataclass(frozen=True)
class Sampler:
    """A schedule plus sampler settings, with the resolved timestep list."""

    config: SamplerConfig = SamplerConfig()
    schedule: NoiseSchedule = NoiseSchedule()

    @property
    def timesteps(self) -> list[int]:
        return make_timesteps(self.config, self.schedule)

    @property
    def steps(self) -> int:
        return self.config.inference_steps

    def transitions(self):
        """Yield ``(position, j, j_prev)`` for every denoising step."""
        ts = self.timesteps
        for pos, j in enumerate(ts):
            yield pos, j, ts[pos + 1] if pos + 1 < len(ts) else FINAL

    def step(self, z_j, eps_pred, j, j_prev):
        return ddim_step(z_j, eps_pred, j, j_prev, self.config, self.schedule)
