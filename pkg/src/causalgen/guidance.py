"""Compositional, mask-gated guidance over a denoiser backend.

The edit signal for one concept prompt is the difference between the
conditional and unconditional noise estimates (psi), gated by the
intersection of two binary masks (the concept's cross-attention mask and the
quantile mask of the unconditional estimate) and scaled per concept (phi).
The total guidance (gamma) sums the gated signals over every descendant
prompt and is zero during warmup steps. The guided estimate is the backend's
conditional estimate on the intervention prompt plus gamma, literally.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch
from .masks import attention_mask, noise_mask
from .tensors import BinaryMask

DEFAULT_EDIT_SCALE = 8.0
DEFAULT_THRESHOLD = 0.7
DEFAULT_WARMUP_STEPS = 10
DEFAULT_INVERSION_STEPS = 100
DEFAULT_SKIP_RATIO = 0.15
DEFAULT_SOURCE_GUIDANCE = 3.5


@dataclass(frozen=True)
class EditConfig:
    """All guidance knobs; defaults are the reference operating point."""

    edit_scale: float = DEFAULT_EDIT_SCALE
    edit_scales: dict[str, float] = field(default_factory=dict)  # per-concept override
    threshold: float = DEFAULT_THRESHOLD
    warmup_steps: int = DEFAULT_WARMUP_STEPS
    inversion_steps: int = DEFAULT_INVERSION_STEPS
    skip_ratio: float = DEFAULT_SKIP_RATIO
    source_guidance: float = DEFAULT_SOURCE_GUIDANCE
    intersect_masks: bool = True
    # Off by default: classifier-free mixing on the edit pass base term.
    # 1.0 means the base term is the plain conditional estimate.
    edit_base_guidance: float = 1.0

    def __post_init__(self):
        if self.edit_scale <= 0:
            raise ValueError("edit_scale must be positive")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be non-negative")
        if self.inversion_steps < 1:
            raise ValueError("inversion_steps must be >= 1")
        if not 0.0 <= self.skip_ratio < 1.0:
            raise ValueError("skip_ratio must lie in [0, 1)")

    def scale_for(self, concept_id: str) -> float:
        return self.edit_scales.get(concept_id, self.edit_scale)

    @classmethod
    def from_json_dict(cls, data: dict) -> "EditConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class StepTrace:
    """Diagnostics for one guided denoising step."""

    step_index: int
    timestep: int
    concept_masks: dict[str, BinaryMask] = field(default_factory=dict)  # gated mask per concept
    guidance_norm: float = 0.0


def psi(backend, x_t: np.ndarray, t: int, prompt: str) -> np.ndarray:
    """Conditional-minus-unconditional noise estimate for one prompt."""
    cond, uncond = backend.batch_predict(x_t, t, [prompt, ""])
    return cond.eps - uncond.eps


def phi(
    psi_val: np.ndarray,
    m1: BinaryMask,
    m2: BinaryMask,
    s_c: float,
    intersect: bool = True,
) -> np.ndarray:
    """Scale the edit signal and gate it to the masked cells.

    The gate is m1 AND m2 when intersecting, else m1 alone; masks broadcast
    over channels.
    """
    psi_val = np.asarray(psi_val, dtype=np.float64)
    if psi_val.ndim != 3:
        raise ShapeMismatch(f"edit signal must be (C, H, W), got {psi_val.shape}")
    if m1.shape != psi_val.shape[1:] or m2.shape != psi_val.shape[1:]:
        raise ShapeMismatch(
            f"mask shapes {m1.shape}/{m2.shape} do not match spatial dims {psi_val.shape[1:]}"
        )
    gate = m1.intersect(m2) if intersect else m1
    return s_c * gate.bits[None, :, :] * psi_val


def _gamma_from_outputs(
    uncond_eps: np.ndarray,
    concept_outputs: list,  # [(concept_id, PredictOutput)]
    cfg: EditConfig,
    trace: StepTrace | None = None,
) -> np.ndarray:
    latent_hw = uncond_eps.shape[1:]
    m2 = noise_mask(uncond_eps, cfg.threshold)
    total = np.zeros_like(uncond_eps)
    for concept_id, out in concept_outputs:
        psi_val = out.eps - uncond_eps
        n_tokens = len(out.attention.token_maps)
        m1 = attention_mask(out.attention, (0, n_tokens), cfg.threshold, latent_hw)
        total += phi(psi_val, m1, m2, cfg.scale_for(concept_id), cfg.intersect_masks)
        if trace is not None:
            gate = m1.intersect(m2) if cfg.intersect_masks else m1
            trace.concept_masks[concept_id] = gate
    if trace is not None:
        trace.guidance_norm = float(np.abs(total).sum())
    return total


def gamma(
    backend,
    x_t: np.ndarray,
    t: int,
    descendant_prompts: list[tuple[str, str]],
    cfg: EditConfig,
    step_index: int,
    trace: StepTrace | None = None,
) -> np.ndarray:
    """Summed mask-gated guidance over the descendant prompts.

    Exactly zero during warmup (step_index < cfg.warmup_steps) and for an
    empty prompt list; in both cases no backend call is made.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    if step_index < cfg.warmup_steps or not descendant_prompts:
        return np.zeros_like(x_t)
    prompts = [""] + [prompt for _, prompt in descendant_prompts]
    outputs = backend.batch_predict(x_t, t, prompts)
    concept_outputs = list(zip((cid for cid, _ in descendant_prompts), outputs[1:]))
    return _gamma_from_outputs(outputs[0].eps, concept_outputs, cfg, trace)


def guided_epsilon(
    backend,
    x_t: np.ndarray,
    t: int,
    intervention_prompt: str,
    descendant_prompts: list[tuple[str, str]],
    cfg: EditConfig,
    step_index: int,
    trace: StepTrace | None = None,
) -> np.ndarray:
    """Base conditional estimate on the intervention prompt, plus gamma.

    All predictions for a step go through one batched backend call.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    guidance_active = step_index >= cfg.warmup_steps and bool(descendant_prompts)
    needs_uncond = guidance_active or cfg.edit_base_guidance != 1.0

    prompts = [intervention_prompt]
    if needs_uncond:
        prompts.insert(0, "")
    if guidance_active:
        prompts.extend(prompt for _, prompt in descendant_prompts)
    outputs = backend.batch_predict(x_t, t, prompts)

    offset = 1 if needs_uncond else 0
    base = outputs[offset].eps
    if cfg.edit_base_guidance != 1.0:
        base = outputs[0].eps + cfg.edit_base_guidance * (base - outputs[0].eps)

    if not guidance_active:
        # gamma is exactly zero here; returning base unchanged keeps warmup
        # steps bit-identical to an unguided pass
        return base
    concept_outputs = list(
        zip((cid for cid, _ in descendant_prompts), outputs[offset + 1 :])
    )
    return base + _gamma_from_outputs(outputs[0].eps, concept_outputs, cfg, trace)
