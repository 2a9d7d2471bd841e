"""Discrete-time DDPM noise schedule.

Forward process, one step and closed-form marginal:

    q(x_t | x_{t-1}) = N(sqrt(1 - beta_t) x_{t-1}, beta_t I)
    q(x_t | x_0)     = N(sqrt(abar_t) x_0, (1 - abar_t) I)

with alpha_t = 1 - beta_t and abar_t = prod_{i<=t} alpha_i. Steps are indexed
1..T; abar_0 = 1 by convention. All randomness is passed in explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# DDPM's 1000-step reference range; rescaled by 1000/T for shorter chains.
REFERENCE_STEPS = 1000
REFERENCE_BETA_START = 1e-4
REFERENCE_BETA_END = 0.02
DEFAULT_T = 200


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed coefficient tables. Arrays are 0-based: ``betas[t - 1]`` is beta_t."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self) -> None:
        for arr in (self.betas, self.alphas, self.alpha_bars):
            arr.setflags(write=False)

    def check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"step index t={t} outside 1..{self.T}")

    def beta(self, t: int) -> float:
        self.check_t(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self.check_t(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        """abar_t for t in 0..T (abar_0 = 1)."""
        if t == 0:
            return 1.0
        self.check_t(t)
        return float(self.alpha_bars[t - 1])

    def to_config(self) -> dict:
        return {
            "T": self.T,
            "beta_start": float(self.betas[0]),
            "beta_end": float(self.betas[-1]),
        }


def make_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear-in-beta schedule from ``beta_start`` (t=1) to ``beta_end`` (t=T)."""
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    T = int(T)
    if not (0.0 < beta_start < 1.0 and 0.0 < beta_end < 1.0):
        raise ValueError(f"betas must lie in (0, 1), got {beta_start}, {beta_end}")
    if beta_start > beta_end:
        raise ValueError(f"beta_start={beta_start} exceeds beta_end={beta_end}")
    if T == 1:
        betas = np.array([float(beta_start)])
    else:
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))


def make_default_schedule(T: int = DEFAULT_T) -> NoiseSchedule:
    """The DDPM reference betas rescaled to ``T`` steps (keeps abar_T tiny)."""
    scale = REFERENCE_STEPS / T
    return make_linear_schedule(
        T, REFERENCE_BETA_START * scale, min(REFERENCE_BETA_END * scale, 0.999)
    )


def _check_shapes(x: np.ndarray, noise: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x.shape != noise.shape:
        raise ValueError(f"dimension mismatch: data {x.shape} vs noise {noise.shape}")
    return x, noise


def forward_step(x_prev, t: int, noise, sched: NoiseSchedule) -> np.ndarray:
    """One draw of q(x_t | x_{t-1})."""
    x_prev, noise = _check_shapes(x_prev, noise)
    beta = sched.beta(t)
    return np.sqrt(1.0 - beta) * x_prev + np.sqrt(beta) * noise


def forward_marginal(x0, t: int, noise, sched: NoiseSchedule) -> np.ndarray:
    """One draw of q(x_t | x_0); ``t=0`` returns ``x0`` unchanged.

    Also the training-pair generator: the regression target for the result is
    ``noise``.
    """
    x0, noise = _check_shapes(x0, noise)
    abar = sched.alpha_bar(t)
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * noise


def forward_marginal_batch(x0: np.ndarray, t: np.ndarray, noise: np.ndarray,
                           sched: NoiseSchedule) -> np.ndarray:
    """Row-wise marginal for a batch with per-row step indices ``t`` (1..T)."""
    x0, noise = _check_shapes(x0, noise)
    t = np.asarray(t)
    if t.min() < 1 or t.max() > sched.T:
        raise ValueError(f"step indices outside 1..{sched.T}")
    abar = sched.alpha_bars[t - 1][:, None]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * noise
