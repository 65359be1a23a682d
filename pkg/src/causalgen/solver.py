"""Deterministic second-order multistep ODE stepping for inversion and denoising.

The probability-flow ODE is integrated in the data-prediction parameterization
over log-SNR time. Writing a_t = sqrt(alpha_bar_t), s_t = sqrt(1 - alpha_bar_t),
lam_t = log(a_t / s_t), and x0_pred = (x - s*eps) / a, one step from level
`cur` to level `next` is

    first order:   x' = (s_next / s_cur) * x - a_next * expm1(-h) * x0_pred
    second order:  x' = (s_next / s_cur) * x - a_next * expm1(-h) * D
                   D  = x0_pred + (x0_pred - x0_prev) / (2 * r)

with h = lam_next - lam_cur and r = (lam_cur - lam_prev) / h. The second-order
update keeps a one-deep history of data predictions; the first step of any
pass therefore falls back to first order. The same update integrates in both
directions (h may be negative), which is what makes inversion and re-denoising
share one code path.

Both clean endpoints need limits of the formulas above, since lam is infinite
at alpha_bar = 1:

  * leaving the clean state (s_cur = 0): the epsilon-form limit
    x' = a_next * x + s_next * eps, i.e. exact forward diffusion along the
    current noise estimate;
  * arriving at the clean state (s_next = 0): x' = x0_pred, i.e. the final
    step returns the data prediction.

Everything here is pure float64 numpy with no sampling, so trajectories are
bit-reproducible given identical model outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidSteps
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class Level:
    """One discretization point: a training timestep and its noise scales."""

    timestep: int
    signal: float  # a_t
    noise: float  # s_t

    @property
    def log_snr(self) -> float:
        # +inf at the clean endpoint; callers treat non-finite as "no history"
        if self.noise == 0.0:
            return math.inf
        return math.log(self.signal / self.noise)


def build_levels(sched: NoiseSchedule, solver_steps: int) -> list[Level]:
    """Evenly spaced levels 0..solver_steps over the training schedule.

    Level 0 is the clean state (timestep 0, alpha_bar = 1); level
    `solver_steps` is the schedule's terminal timestep.
    """
    if solver_steps < 1:
        raise InvalidSteps(f"solver steps must be >= 1, got {solver_steps}")
    if solver_steps > sched.steps:
        raise InvalidSteps(
            f"solver steps {solver_steps} exceed schedule length {sched.steps}"
        )
    levels = []
    for j in range(solver_steps + 1):
        t = round(j * sched.steps / solver_steps)
        a, s = sched.signal_noise(t)
        levels.append(Level(timestep=t, signal=a, noise=s))
    return levels


class MultistepSolver:
    """Carries the one-step data-prediction history across a single pass."""

    def __init__(self):
        self._prev_x0: np.ndarray | None = None
        self._prev_lam: float = math.inf

    def reset(self) -> None:
        self._prev_x0 = None
        self._prev_lam = math.inf

    def step(self, x: np.ndarray, eps: np.ndarray, cur: Level, nxt: Level) -> np.ndarray:
        if cur.noise == 0.0:
            # leaving the clean state: exact forward diffusion along eps
            x_next = nxt.signal * x + nxt.noise * eps
            self._prev_x0 = x.copy()
            self._prev_lam = math.inf
            return x_next

        x0_pred = (x - cur.noise * eps) / cur.signal

        if nxt.noise == 0.0:
            x_next = x0_pred
        else:
            h = nxt.log_snr - cur.log_snr
            use_second_order = self._prev_x0 is not None and math.isfinite(self._prev_lam)
            if use_second_order:
                r = (cur.log_snr - self._prev_lam) / h
                data_term = x0_pred + (x0_pred - self._prev_x0) / (2.0 * r)
            else:
                data_term = x0_pred
            x_next = (nxt.noise / cur.noise) * x - nxt.signal * math.expm1(-h) * data_term

        self._prev_x0 = x0_pred
        self._prev_lam = cur.log_snr
        return x_next
