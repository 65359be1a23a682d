from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causalgen.errors import EmptySpan, ShapeMismatch
from causalgen.masks import (
    attention_mask,
    mask_cardinality,
    nearest_resize,
    noise_mask,
    quantile_mask,
)
from causalgen.tensors import AttentionMap, TokenAttention

from .oracles import top_k_cells


def selected(mask) -> set[int]:
    return set(np.flatnonzero(mask.bits.ravel()))


class TestQuantileMask:
    def test_two_by_two_example(self):
        grid = np.array([[0.9, 0.1], [0.2, 0.8]])
        mask = quantile_mask(grid, 0.5)
        # oracle: k = floor(0.5 * 4) = 2, top cells are 0.9 (idx 0) and 0.8 (idx 3)
        assert selected(mask) == top_k_cells(grid, 2) == {0, 3}

    def test_uniform_grid_tie_break(self):
        grid = np.ones((4, 5))
        mask = quantile_mask(grid, 0.7)
        k = mask_cardinality(20, 0.7)
        assert k == 6
        assert selected(mask) == set(range(6))

    def test_threshold_near_one_keeps_single_max(self):
        grid = np.arange(16, dtype=float).reshape(4, 4)
        mask = quantile_mask(grid, 0.999)
        assert mask.popcount() == 1
        assert selected(mask) == {15}

    def test_matches_sort_oracle_on_random_grids(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            grid = rng.normal(size=(6, 7))
            lam = float(rng.uniform(0.05, 0.95))
            mask = quantile_mask(grid, lam)
            k = mask_cardinality(grid.size, lam)
            assert selected(mask) == top_k_cells(grid, k)
            assert mask.popcount() == k

    def test_deterministic_under_ties(self):
        grid = np.zeros((5, 5))
        grid[::2, ::2] = 1.0
        first = quantile_mask(grid, 0.6)
        second = quantile_mask(grid, 0.6)
        assert np.array_equal(first.bits, second.bits)

    @settings(max_examples=200, deadline=None)
    @given(
        st.integers(2, 12),
        st.integers(2, 12),
        st.floats(0.01, 0.99),
        st.integers(0, 2**31 - 1),
    )
    def test_popcount_property(self, h, w, lam, seed):
        grid = np.random.default_rng(seed).normal(size=(h, w))
        mask = quantile_mask(grid, lam)
        assert mask.popcount() == mask_cardinality(h * w, lam)

    def test_exact_breakpoint_cardinalities(self):
        # decimal thresholds at exact breakpoints must floor like real numbers
        for tenths in range(1, 10):
            lam = tenths / 10
            assert mask_cardinality(10, lam) == max(1, 10 - tenths)
            assert mask_cardinality(100, lam) == max(1, (10 - tenths) * 10)


class TestNearestResize:
    def test_identity(self):
        grid = np.arange(12, dtype=float).reshape(3, 4)
        assert np.array_equal(nearest_resize(grid, (3, 4)), grid)

    def test_upsample_blocks(self):
        grid = np.array([[1.0, 2.0], [3.0, 4.0]])
        up = nearest_resize(grid, (4, 4))
        assert np.array_equal(up[:2, :2], np.ones((2, 2)))
        assert np.array_equal(up[2:, 2:], np.full((2, 2), 4.0))

    def test_downsample(self):
        grid = np.arange(16, dtype=float).reshape(4, 4)
        down = nearest_resize(grid, (2, 2))
        assert down.shape == (2, 2)
        assert down[0, 0] == grid[0, 0]


def single_map(grid: np.ndarray, tokens: int = 1) -> AttentionMap:
    return AttentionMap(
        token_maps=tuple(TokenAttention(span=(i, i + 1), grid=grid) for i in range(tokens))
    )


class TestAttentionMask:
    def test_span_averaging(self):
        low = np.zeros((2, 2))
        high = np.array([[4.0, 0.0], [0.0, 0.0]])
        attn = AttentionMap(
            token_maps=(
                TokenAttention(span=(0, 1), grid=low),
                TokenAttention(span=(1, 2), grid=high),
            )
        )
        mask = attention_mask(attn, (0, 2), 0.5, (2, 2))
        # mean grid is [[2,0],[0,0]]; k = 2; ties at 0 resolved to index 1
        assert selected(mask) == {0, 1}

    def test_upsampled_to_latent_resolution(self):
        grid = np.array([[1.0, 0.0], [0.0, 0.0]])
        mask = attention_mask(single_map(grid), (0, 1), 0.7, (4, 4))
        assert mask.shape == (4, 4)
        # top-left 2x2 block carries the high values; k = floor(0.3*16) = 4
        assert selected(mask) == {0, 1, 4, 5}

    def test_empty_span(self):
        with pytest.raises(EmptySpan):
            attention_mask(single_map(np.ones((2, 2))), (5, 6), 0.5, (2, 2))

    def test_span_selects_subset(self):
        a = np.array([[1.0, 0.0], [0.0, 0.0]])
        b = np.array([[0.0, 0.0], [0.0, 1.0]])
        attn = AttentionMap(
            token_maps=(TokenAttention(span=(0, 1), grid=a), TokenAttention(span=(1, 2), grid=b))
        )
        mask = attention_mask(attn, (1, 2), 0.999, (2, 2))
        assert selected(mask) == {3}


class TestNoiseMask:
    def test_single_channel_example(self):
        eps = np.array([[[3.0, 1.0], [1.0, 1.0]]])
        mask = noise_mask(eps, 0.7)
        # oracle: k = max(1, floor(0.3*4)) = 1; magnitude peaks at flat index 0
        assert selected(mask) == top_k_cells(np.abs(eps[0]), 1) == {0}

    def test_all_equal_magnitudes(self):
        eps = np.full((2, 3, 3), 0.5)
        mask = noise_mask(eps, 0.5)
        k = mask_cardinality(9, 0.5)
        assert selected(mask) == set(range(k))

    def test_exact_count_on_random_grid(self):
        eps = np.random.default_rng(11).normal(size=(4, 10, 10))
        mask = noise_mask(eps, 0.7)
        assert mask.popcount() == 30

    def test_channel_l2_magnitude(self):
        eps = np.zeros((2, 2, 2))
        eps[0, 0, 0] = 3.0
        eps[1, 0, 0] = 4.0  # L2 magnitude 5 at cell 0
        eps[0, 1, 1] = 4.5  # single-channel 4.5 at cell 3
        mask = noise_mask(eps, 0.8)
        assert selected(mask) == {0}

    def test_wrong_rank(self):
        with pytest.raises(ShapeMismatch):
            noise_mask(np.ones((2, 2)), 0.5)
