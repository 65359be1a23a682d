"""Counterfactual editing: deterministic inversion, then guided re-denoising.

The three phases map onto the classic counterfactual recipe:

  * abduction — invert the clean latent to the noise that reproduces it under
    the deterministic solver, conditioned on the source prompt with
    classifier-free guidance at the source scale;
  * action — swap the conditioning to the intervention prompt;
  * prediction — re-denoise with the mask-gated descendant guidance added at
    every step.

The inversion trajectory is stored in denoising order: trajectory[0] is the
fully noised latent, trajectory[-1] the input. A skip ratio r starts the edit
at trajectory[ceil(r * steps)], trading edit strength for fidelity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidSteps
from .guidance import EditConfig, StepTrace, guided_epsilon
from .manipulator import EditPromptSet
from .solver import Level, MultistepSolver, build_levels
from .tensors import assert_finite, ensure_latent


@dataclass(frozen=True)
class InversionResult:
    """Inversion trajectory in denoising order, plus the skip entry point."""

    trajectory: list[np.ndarray]
    start_index: int
    levels: list[Level]  # levels[j] is the noise level of trajectory[j]

    @property
    def noise_latent(self) -> np.ndarray:
        return self.trajectory[0]


def _source_eps_fn(backend, prompt: str, guidance_scale: float):
    """Epsilon under source conditioning; plain conditional at scale 1."""

    def eps_fn(x: np.ndarray, t: int) -> np.ndarray:
        if not prompt:
            return backend.predict(x, t, "").eps
        if guidance_scale == 1.0:
            return backend.predict(x, t, prompt).eps
        cond, uncond = backend.batch_predict(x, t, [prompt, ""])
        return uncond.eps + guidance_scale * (cond.eps - uncond.eps)

    return eps_fn


def invert(
    x0_latent: np.ndarray,
    source_prompt: str,
    cfg: EditConfig,
    backend,
) -> InversionResult:
    """Abduction: march the clean latent up to full noise deterministically.

    Returns inversion_steps + 1 latents in denoising order and the index to
    resume editing from, ceil(skip_ratio * inversion_steps).
    """
    caps = backend.capabilities()
    x = ensure_latent(x0_latent, caps.latent_shape)
    levels = build_levels(caps.schedule, cfg.inversion_steps)
    eps_fn = _source_eps_fn(backend, source_prompt, cfg.source_guidance)

    solver = MultistepSolver()
    forward = [x]
    for j in range(cfg.inversion_steps):
        eps = eps_fn(x, levels[j].timestep)
        x = solver.step(x, eps, levels[j], levels[j + 1])
        assert_finite(x, f"inversion step {j}")
        forward.append(x)

    trajectory = forward[::-1]
    start_index = math.ceil(cfg.skip_ratio * cfg.inversion_steps)
    return InversionResult(
        trajectory=trajectory, start_index=start_index, levels=levels[::-1]
    )


def _denoise(
    inv: InversionResult,
    eps_fn: Callable[[np.ndarray, int, int], np.ndarray],
) -> np.ndarray:
    """Run the deterministic solver from the skip entry point down to clean.

    eps_fn(x, timestep, step_index) supplies the noise estimate; step_index
    counts performed denoising steps from 0.
    """
    levels = inv.levels  # denoising order: levels[0] is the noisiest
    position = inv.start_index
    x = inv.trajectory[position].copy()
    solver = MultistepSolver()
    total = len(levels) - 1
    for step_index, j in enumerate(range(position, total)):
        eps = eps_fn(x, levels[j].timestep, step_index)
        x = solver.step(x, eps, levels[j], levels[j + 1])
        assert_finite(x, f"denoise step {step_index}")
    return x


def reconstruct(
    x0_latent: np.ndarray,
    source_prompt: str,
    cfg: EditConfig,
    backend,
    inversion: InversionResult | None = None,
) -> np.ndarray:
    """Round-trip the latent: invert, then re-denoise under source conditioning."""
    inv = inversion or invert(x0_latent, source_prompt, cfg, backend)
    source_fn = _source_eps_fn(backend, source_prompt, cfg.source_guidance)
    return _denoise(inv, lambda x, t, _i: source_fn(x, t))


def edit(
    x0_latent: np.ndarray,
    source_prompt: str,
    prompts: EditPromptSet,
    cfg: EditConfig,
    backend,
    trace: list[StepTrace] | None = None,
    inversion: InversionResult | None = None,
) -> np.ndarray:
    """Produce the counterfactual latent for one validated intervention.

    Appends one StepTrace per performed step to `trace` when given.
    """
    inv = inversion or invert(x0_latent, source_prompt, cfg, backend)
    descendant_prompts = list(prompts.descendant_prompts)

    def eps_fn(x: np.ndarray, t: int, step_index: int) -> np.ndarray:
        step_trace = StepTrace(step_index=step_index, timestep=t) if trace is not None else None
        eps = guided_epsilon(
            backend,
            x,
            t,
            prompts.intervention_prompt,
            descendant_prompts,
            cfg,
            step_index,
            trace=step_trace,
        )
        if trace is not None:
            trace.append(step_trace)
        return eps

    return _denoise(inv, eps_fn)


def denoise_steps(inv: InversionResult) -> int:
    """Number of guided steps an edit from this inversion will perform."""
    return len(inv.levels) - 1 - inv.start_index
