"""Noise schedules and the forward diffusion map.

A schedule is the per-step noise retention sequence alpha_t together with its
running product alpha_bar_t; signal and noise scales at step t are
sqrt(alpha_bar_t) and sqrt(1 - alpha_bar_t). Step index 0 is reserved for the
clean state (alpha_bar = 1 exactly).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidSteps, ShapeMismatch

SCHEDULE_KINDS = ("linear", "scaled_linear", "backend_provided")


@dataclass(frozen=True)
class NoiseSchedule:
    alphas: np.ndarray  # (T,), alpha_t in (0, 1]
    alpha_bars: np.ndarray  # (T,), strictly decreasing, last value in (0, 1)

    def __post_init__(self):
        alphas = np.asarray(self.alphas, dtype=np.float64)
        alpha_bars = np.asarray(self.alpha_bars, dtype=np.float64)
        if alphas.ndim != 1 or alphas.size < 1:
            raise InvalidSteps("schedule needs at least one step")
        if alphas.shape != alpha_bars.shape:
            raise InvalidSteps("alphas and alpha_bars must have equal length")
        if np.any(alphas <= 0) or np.any(alphas > 1):
            raise InvalidSteps("every alpha_t must lie in (0, 1]")
        if np.any(np.diff(alpha_bars) >= 0):
            raise InvalidSteps("alpha_bar must be strictly decreasing")
        if not 0 < alpha_bars[-1] < 1:
            raise InvalidSteps("terminal alpha_bar must lie in (0, 1)")
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @property
    def steps(self) -> int:
        return int(self.alphas.size)

    def alpha_bar(self, t: int) -> float:
        """alpha_bar at step t, with t = 0 meaning the clean state."""
        if not 0 <= t <= self.steps:
            raise InvalidSteps(f"step {t} outside [0, {self.steps}]")
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def signal_noise(self, t: int) -> tuple[float, float]:
        """(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t)) at step t."""
        bar = self.alpha_bar(t)
        return math.sqrt(bar), math.sqrt(1.0 - bar)


def make_schedule(
    steps: int,
    kind: str = "linear",
    *,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    alphas=None,
) -> NoiseSchedule:
    """Build a schedule of `steps` diffusion steps.

    linear: beta interpolated linearly between beta_start and beta_end.
    scaled_linear: beta interpolated in sqrt-space (the latent-diffusion
    convention).
    backend_provided: use the `alphas` sequence as-is.
    """
    if steps < 1:
        raise InvalidSteps(f"steps must be >= 1, got {steps}")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
        alpha_seq = 1.0 - betas
    elif kind == "scaled_linear":
        betas = np.linspace(beta_start**0.5, beta_end**0.5, steps, dtype=np.float64) ** 2
        alpha_seq = 1.0 - betas
    elif kind == "backend_provided":
        if alphas is None:
            raise InvalidSteps("backend_provided schedule requires the alphas sequence")
        alpha_seq = np.asarray(alphas, dtype=np.float64)
        if alpha_seq.size != steps:
            raise InvalidSteps(f"expected {steps} alphas, got {alpha_seq.size}")
    else:
        raise InvalidSteps(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    return NoiseSchedule(alphas=alpha_seq, alpha_bars=np.cumprod(alpha_seq))


def forward_diffuse(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Noise a clean latent to step t: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeMismatch(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    if not 1 <= t <= sched.steps:
        raise InvalidSteps(f"t must lie in [1, {sched.steps}], got {t}")
    signal, noise = sched.signal_noise(t)
    return signal * x0 + noise * eps
