"""Small value types around numpy arrays used by the guidance engine.

Latents are plain float ndarrays of shape (channels, height, width); helpers
here validate shape and finiteness. Attention maps and binary masks get thin
dataclasses because their structure (token spans, popcounts) carries meaning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteLatent, ShapeMismatch


def ensure_latent(values, shape: tuple[int, int, int] | None = None) -> np.ndarray:
    """Validate a (C, H, W) float array: 3 dims, all dims >= 1, finite."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 3 or any(d < 1 for d in arr.shape):
        raise ShapeMismatch(f"latent must be (C, H, W) with dims >= 1, got {arr.shape}")
    if shape is not None and tuple(arr.shape) != tuple(shape):
        raise ShapeMismatch(f"latent shape {arr.shape} != expected {tuple(shape)}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteLatent("latent contains NaN or infinity")
    return arr


def assert_finite(arr: np.ndarray, context: str = "") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteLatent(f"non-finite values{': ' + context if context else ''}")
    return arr


@dataclass(frozen=True)
class TokenAttention:
    """Spatial attention grid for one token span of a prompt."""

    span: tuple[int, int]
    grid: np.ndarray  # (h, w), non-negative

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=np.float64)
        if grid.ndim != 2:
            raise ShapeMismatch(f"attention grid must be 2-D, got {grid.shape}")
        if not np.all(np.isfinite(grid)) or np.any(grid < 0):
            raise ShapeMismatch("attention grid must be finite and non-negative")
        object.__setattr__(self, "grid", grid)


@dataclass(frozen=True)
class AttentionMap:
    """Per-token attention grids; all grids share one resolution."""

    token_maps: tuple[TokenAttention, ...]

    def __post_init__(self):
        maps = tuple(self.token_maps)
        shapes = {m.grid.shape for m in maps}
        if len(shapes) > 1:
            raise ShapeMismatch(f"attention grids disagree on shape: {shapes}")
        object.__setattr__(self, "token_maps", maps)

    @property
    def resolution(self) -> tuple[int, int]:
        if not self.token_maps:
            raise ShapeMismatch("empty attention map has no resolution")
        return self.token_maps[0].grid.shape


@dataclass(frozen=True)
class BinaryMask:
    """A {0,1} grid over latent cells."""

    bits: np.ndarray  # (H, W) uint8

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise ShapeMismatch(f"mask must be 2-D, got {bits.shape}")
        if not np.isin(bits, (0, 1)).all():
            raise ShapeMismatch("mask values must be 0 or 1")
        object.__setattr__(self, "bits", bits.astype(np.uint8))

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def popcount(self) -> int:
        return int(self.bits.sum())

    def intersect(self, other: "BinaryMask") -> "BinaryMask":
        if self.shape != other.shape:
            raise ShapeMismatch(f"mask shapes differ: {self.shape} vs {other.shape}")
        return BinaryMask(self.bits & other.bits)
