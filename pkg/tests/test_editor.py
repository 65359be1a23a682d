from __future__ import annotations

import numpy as np
import pytest

from causalgen.backends import ToyBackend, ToyConcept, ToyWorld
from causalgen.editor import denoise_steps, edit, invert, reconstruct
from causalgen.errors import InvalidSteps
from causalgen.guidance import EditConfig
from causalgen.manipulator import EditPromptSet
from causalgen.solver import build_levels


def toy_backend(shape=(1, 16, 16)):
    world = ToyWorld(
        shape=shape,
        base_mean=0.0,
        sigma2=1.0,
        vocabulary={"red patch": ToyConcept(shift=2.0, region=(3, 3, 13, 13))},
    )
    return ToyBackend(world)


def latent(seed=42, shape=(1, 16, 16)):
    return np.random.default_rng(seed).normal(size=shape)


PATCH_PROMPTS = EditPromptSet(
    base_prompt="", intervention_prompt="", descendant_prompts=(("c1", "red patch"),)
)


class TestInvert:
    def test_trajectory_length(self):
        cfg = EditConfig(inversion_steps=100, skip_ratio=0.0, source_guidance=1.0)
        inv = invert(latent(), "", cfg, toy_backend())
        assert len(inv.trajectory) == 101

    def test_start_index_from_skip_ratio(self):
        cfg = EditConfig(inversion_steps=100, skip_ratio=0.15, source_guidance=1.0)
        inv = invert(latent(), "", cfg, toy_backend())
        assert inv.start_index == 15
        assert denoise_steps(inv) == 85

    def test_start_index_rounds_up(self):
        cfg = EditConfig(inversion_steps=50, skip_ratio=0.15, source_guidance=1.0)
        inv = invert(latent(), "", cfg, toy_backend())
        assert inv.start_index == 8  # ceil(7.5)

    def test_trajectory_is_denoise_ordered(self):
        cfg = EditConfig(inversion_steps=20, skip_ratio=0.0, source_guidance=1.0)
        x0 = latent()
        inv = invert(x0, "", cfg, toy_backend())
        assert np.array_equal(inv.trajectory[-1], x0)
        assert inv.levels[0].noise > inv.levels[-1].noise

    def test_round_trip_mse(self):
        cfg = EditConfig(inversion_steps=100, skip_ratio=0.0, source_guidance=1.0)
        backend = toy_backend()
        x0 = latent()
        inv = invert(x0, "", cfg, backend)
        rec = reconstruct(x0, "", cfg, backend, inversion=inv)
        assert float(np.mean((rec - x0) ** 2)) <= 1e-4

    def test_round_trip_mse_with_source_guidance(self):
        cfg = EditConfig(inversion_steps=100, skip_ratio=0.0, source_guidance=3.5)
        backend = toy_backend()
        x0 = latent(1)
        rec = reconstruct(x0, "red patch", cfg, backend)
        assert float(np.mean((rec - x0) ** 2)) <= 1e-4

    def test_deterministic(self):
        cfg = EditConfig(inversion_steps=30, skip_ratio=0.1, source_guidance=3.5)
        backend = toy_backend()
        x0 = latent(2)
        first = invert(x0, "red patch", cfg, backend)
        second = invert(x0, "red patch", cfg, backend)
        for a, b in zip(first.trajectory, second.trajectory):
            assert a.tobytes() == b.tobytes()

    def test_too_many_solver_steps(self):
        backend = toy_backend()
        cfg = EditConfig(inversion_steps=2000, skip_ratio=0.0)
        with pytest.raises(InvalidSteps):
            invert(latent(), "", cfg, backend)


class TestEdit:
    def test_zero_scales_reproduce_reconstruction(self):
        backend = toy_backend()
        x0 = latent(3)
        # edit_scale must stay positive; zero the per-concept scale instead
        cfg = EditConfig(
            inversion_steps=100,
            skip_ratio=0.0,
            source_guidance=1.0,
            warmup_steps=0,
            edit_scales={"c1": 0.0},
        )
        out = edit(x0, "", PATCH_PROMPTS, cfg, backend)
        assert float(np.mean((out - x0) ** 2)) <= 1e-4

    def test_warmup_beyond_steps_is_bitwise_reconstruction(self):
        backend = toy_backend()
        x0 = latent(4)
        cfg = EditConfig(
            inversion_steps=50, skip_ratio=0.15, source_guidance=1.0, warmup_steps=10_000
        )
        out = edit(x0, "", PATCH_PROMPTS, cfg, backend)
        rec = reconstruct(x0, "", cfg, backend)
        assert out.tobytes() == rec.tobytes()

    def test_region_localized_change(self):
        backend = toy_backend()
        x0 = latent(5)
        cfg = EditConfig(
            inversion_steps=50, skip_ratio=0.15, source_guidance=1.0, warmup_steps=5
        )
        trace = []
        out = edit(x0, "", PATCH_PROMPTS, cfg, backend, trace=trace)
        rec = reconstruct(x0, "", cfg, backend)
        delta = np.abs(out - rec)
        assert delta.sum() > 0

        union = np.zeros((16, 16), dtype=bool)
        for step in trace:
            for mask in step.concept_masks.values():
                union |= mask.bits.astype(bool)
        inside = float(delta[:, union].sum())
        assert inside / float(delta.sum()) >= 0.90

    def test_trace_records_one_entry_per_step(self):
        backend = toy_backend()
        cfg = EditConfig(
            inversion_steps=20, skip_ratio=0.0, source_guidance=1.0, warmup_steps=3
        )
        trace = []
        edit(latent(6), "", PATCH_PROMPTS, cfg, backend, trace=trace)
        assert len(trace) == 20
        assert [t.step_index for t in trace] == list(range(20))
        # warmup steps carry no masks
        assert all(not t.concept_masks for t in trace[:3])
        assert all(t.concept_masks for t in trace[3:])

    def test_edit_deterministic(self):
        backend = toy_backend()
        x0 = latent(7)
        cfg = EditConfig(inversion_steps=25, skip_ratio=0.2, source_guidance=1.0, warmup_steps=2)
        a = edit(x0, "", PATCH_PROMPTS, cfg, backend)
        b = edit(x0, "", PATCH_PROMPTS, cfg, backend)
        assert a.tobytes() == b.tobytes()


class TestLevels:
    def test_level_grid_endpoints(self):
        backend = toy_backend()
        levels = build_levels(backend.schedule, 10)
        assert levels[0].timestep == 0
        assert levels[0].noise == 0.0 and levels[0].signal == 1.0
        assert levels[-1].timestep == backend.schedule.steps

    def test_levels_strictly_noisier(self):
        backend = toy_backend()
        levels = build_levels(backend.schedule, 25)
        noises = [lv.noise for lv in levels]
        assert all(b > a for a, b in zip(noises, noises[1:]))
