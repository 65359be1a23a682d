"""Binary masks from attention maps and noise estimates.

Both mask sources share one selection rule: keep the top
max(1, floor((1 - threshold) * N)) cells of a salience grid, where N is the
grid's cell count. Ties are broken toward the lower flat index so masks are
bit-deterministic. The threshold is a quantile, not an absolute cutoff.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import EmptySpan, ShapeMismatch
from .tensors import AttentionMap, BinaryMask

# Guards against float rounding at exact breakpoints, e.g. (1 - 0.8) * 10
# evaluating to 1.9999999999999996 and flooring to 1 instead of 2.
_QUANTILE_EPS = 1e-9


def mask_cardinality(n_cells: int, threshold: float) -> int:
    """Number of cells a quantile mask keeps: max(1, floor((1 - threshold) * N))."""
    return max(1, math.floor((1.0 - threshold) * n_cells + _QUANTILE_EPS))


def quantile_mask(salience: np.ndarray, threshold: float) -> BinaryMask:
    """Select the top cells of a 2-D salience grid by the quantile rule."""
    salience = np.asarray(salience, dtype=np.float64)
    if salience.ndim != 2:
        raise ShapeMismatch(f"salience grid must be 2-D, got {salience.shape}")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    k = mask_cardinality(salience.size, threshold)
    # Stable sort on the negated values keeps the original (lower flat index)
    # order among ties.
    order = np.argsort(-salience.ravel(), kind="stable")
    bits = np.zeros(salience.size, dtype=np.uint8)
    bits[order[:k]] = 1
    return BinaryMask(bits.reshape(salience.shape))


def nearest_resize(grid: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resample of a 2-D grid to (H, W)."""
    grid = np.asarray(grid, dtype=np.float64)
    in_h, in_w = grid.shape
    out_h, out_w = out_hw
    rows = np.minimum((np.arange(out_h) * in_h) // out_h, in_h - 1)
    cols = np.minimum((np.arange(out_w) * in_w) // out_w, in_w - 1)
    return grid[np.ix_(rows, cols)]


def attention_mask(
    attn: AttentionMap,
    concept_token_span: tuple[int, int],
    threshold: float,
    latent_hw: tuple[int, int],
) -> BinaryMask:
    """Mask of the latent cells most attended by a concept's tokens.

    Averages the grids of every token overlapping the span, resamples the
    average to latent resolution, then applies the quantile rule.
    """
    start, end = concept_token_span
    selected = [
        tm.grid for tm in attn.token_maps if tm.span[0] < end and tm.span[1] > start
    ]
    if not selected:
        raise EmptySpan(f"token span {concept_token_span} selects no attention maps")
    averaged = np.mean(selected, axis=0)
    return quantile_mask(nearest_resize(averaged, latent_hw), threshold)


def noise_mask(eps_uncond: np.ndarray, threshold: float) -> BinaryMask:
    """Mask of the cells where the unconditional noise estimate is largest.

    Salience is the channel-wise L2 magnitude per spatial cell.
    """
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    if eps_uncond.ndim != 3:
        raise ShapeMismatch(f"noise estimate must be (C, H, W), got {eps_uncond.shape}")
    magnitude = np.sqrt(np.sum(eps_uncond**2, axis=0))
    return quantile_mask(magnitude, threshold)
