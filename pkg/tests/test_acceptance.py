"""Acceptance suite: one test per release criterion, each printing a verdict line.

Tolerances are pinned here and nowhere else; the oracles (matrix powering,
sort-and-count selection, closed forms) are independent of the library code
paths they check.
"""

from __future__ import annotations

import json
import random
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from causalgen.backends import ToyBackend, ToyConcept, ToyWorld
from causalgen.cli import main as cli_main
from causalgen.editor import edit, invert, reconstruct
from causalgen.evaluation import EvalRecord, aggregate
from causalgen.gateway import FixtureVlmClient
from causalgen.graph import descendants, from_json_dict, non_descendants, validate_graph
from causalgen.guidance import EditConfig, StepTrace, gamma, guided_epsilon
from causalgen.manipulator import EditPromptSet
from causalgen.masks import quantile_mask
from causalgen.schedule import forward_diffuse, make_schedule

from .fixtures import DESCRIBE_RAW, EVALUATOR_RAWS, EXTRACTOR_RAW, INTERVENTIONS_RAW
from .oracles import closure_by_matrix_powers, random_dag
from .test_pipeline_cli import fixture_config, make_datasets, make_fixture_dir


@contextmanager
def criterion(name: str):
    started = time.monotonic()
    try:
        yield
    except Exception:
        print(f"FAIL — {name}")
        raise
    print(f"PASS — {name} ({time.monotonic() - started:.2f}s)")


def toy_backend(shape=(1, 16, 16)):
    world = ToyWorld(
        shape=shape,
        base_mean=0.0,
        sigma2=1.0,
        vocabulary={
            "red patch": ToyConcept(shift=2.0, region=(3, 3, 13, 13)),
            "blue blob": ToyConcept(shift=-1.5, region=(8, 8, 16, 16)),
        },
    )
    return ToyBackend(world)


def test_graph_oracle_equivalence():
    """descendants/non_descendants match O(n^3) closure on 1,000 random DAGs."""
    with criterion("graph oracle equivalence (1,000 random DAGs, exact, < 5 s)"):
        started = time.monotonic()
        rng = random.Random(987123)
        for _ in range(1000):
            n, int_edges = random_dag(rng, max_nodes=8)
            ids = [f"c{i}" for i in range(n)]
            graph = validate_graph(
                [{"id": cid, "name": f"n {cid}", "current_value": "v"} for cid in ids],
                [
                    {"id": f"r{k}", "cause_id": f"c{a}", "effect_id": f"c{b}"}
                    for k, (a, b) in enumerate(int_edges)
                ],
            )
            closure = closure_by_matrix_powers(n, int_edges)
            for i, cid in enumerate(ids):
                expected = {f"c{j}" for j in range(n) if closure[i, j]}
                assert descendants(graph, cid) == expected
                assert non_descendants(graph, cid) == set(ids) - expected - {cid}
        assert time.monotonic() - started < 5.0


def test_forward_diffusion_arithmetic():
    """forward_diffuse matches the closed form within 1e-12 on random tensors."""
    with criterion("forward diffusion arithmetic (1e-12, < 1 s)"):
        started = time.monotonic()
        rng = np.random.default_rng(2024)
        sched = make_schedule(100, "linear")
        for _ in range(200):
            t = int(rng.integers(1, 101))
            x0 = rng.normal(size=(3, 8, 8))
            eps = rng.normal(size=(3, 8, 8))
            bar = sched.alpha_bar(t)
            expected = np.sqrt(bar) * x0 + np.sqrt(1.0 - bar) * eps
            got = forward_diffuse(x0, t, eps, sched)
            assert np.max(np.abs(got - expected)) <= 1e-12
        assert time.monotonic() - started < 1.0


def test_inversion_round_trip():
    """invert(skip=0, steps=100) then re-denoise reconstructs x0, MSE <= 1e-4."""
    with criterion("inversion round-trip (MSE <= 1e-4, < 10 s)"):
        started = time.monotonic()
        backend = toy_backend()
        cfg = EditConfig(inversion_steps=100, skip_ratio=0.0, source_guidance=1.0)
        x0 = np.random.default_rng(31337).normal(size=(1, 16, 16))
        inversion = invert(x0, "", cfg, backend)
        assert len(inversion.trajectory) == 101
        rec = reconstruct(x0, "", cfg, backend, inversion=inversion)
        assert float(np.mean((rec - x0) ** 2)) <= 1e-4
        # the same bound must hold under source guidance on a known prompt
        cfg_guided = EditConfig(inversion_steps=100, skip_ratio=0.0, source_guidance=3.5)
        rec_guided = reconstruct(x0, "red patch", cfg_guided, backend)
        assert float(np.mean((rec_guided - x0) ** 2)) <= 1e-4
        assert time.monotonic() - started < 10.0


def test_guidance_sparsity():
    """gamma is exactly zero wherever every gated concept mask is zero."""
    with criterion("guidance sparsity (100 random trials, exact zeros)"):
        backend = toy_backend()
        cfg = EditConfig(warmup_steps=0)
        prompts = [("c_red", "red patch"), ("c_blue", "blue blob")]
        rng = np.random.default_rng(555)
        for _ in range(100):
            x = rng.normal(size=(1, 16, 16))
            t = int(rng.integers(1, 1001))
            trace = StepTrace(step_index=0, timestep=t)
            out = gamma(backend, x, t, prompts, cfg, step_index=0, trace=trace)
            gated_union = np.zeros((16, 16), dtype=bool)
            for mask in trace.concept_masks.values():
                gated_union |= mask.bits.astype(bool)
            assert np.all(out[:, ~gated_union] == 0.0)


def test_guided_epsilon_literalism_and_additivity():
    """guided - base == gamma within 1e-7; gamma is additive within 1e-9."""
    with criterion("score update literalism + additivity (1e-7 / 1e-9)"):
        backend = toy_backend()
        cfg = EditConfig(warmup_steps=0)
        rng = np.random.default_rng(777)
        part_a = [("c_red", "red patch")]
        part_b = [("c_blue", "blue blob")]
        for _ in range(25):
            x = rng.normal(size=(1, 16, 16))
            t = int(rng.integers(1, 1001))
            step = int(rng.integers(0, 7))
            guided = guided_epsilon(
                backend, x, t, "red patch", part_a + part_b, cfg, step
            )
            base = backend.predict(x, t, "red patch").eps
            total = gamma(backend, x, t, part_a + part_b, cfg, step)
            assert np.max(np.abs(guided - base - total)) <= 1e-7
            split_sum = gamma(backend, x, t, part_a, cfg, step) + gamma(
                backend, x, t, part_b, cfg, step
            )
            assert np.max(np.abs(total - split_sum)) <= 1e-9


def test_warmup_behavior():
    """gamma is the zero tensor before warmup; full warmup reproduces the
    reconstruction bit-for-bit."""
    with criterion("warmup (zero tensor below 10; full warmup bit-identical)"):
        backend = toy_backend()
        cfg = EditConfig()  # default warmup_steps = 10
        x = np.random.default_rng(888).normal(size=(1, 16, 16))
        for step_index in range(10):
            out = gamma(
                backend, x, 500, [("c_red", "red patch")], cfg, step_index
            )
            assert out.shape == x.shape
            assert np.all(out == 0.0)

        cfg_full = EditConfig(
            inversion_steps=50, skip_ratio=0.15, source_guidance=1.0, warmup_steps=10_000
        )
        prompts = EditPromptSet(
            base_prompt="", intervention_prompt="", descendant_prompts=(("c_red", "red patch"),)
        )
        edited = edit(x, "", prompts, cfg_full, backend)
        rec = reconstruct(x, "", cfg_full, backend)
        assert edited.tobytes() == rec.tobytes()


def test_mask_cardinality():
    """Every quantile mask keeps max(1, floor((1 - lam) * N)) cells."""
    with criterion("mask cardinality across lam in {0.1..0.9}, tie-deterministic"):
        rng = np.random.default_rng(999)
        for tenths in range(1, 10):
            lam = tenths / 10
            for h, w in ((4, 4), (10, 10), (16, 16), (7, 9)):
                n = h * w
                expected = max(1, (10 - tenths) * n // 10)
                grid = rng.normal(size=(h, w))
                assert quantile_mask(grid, lam).popcount() == expected
                # tie-heavy grid: same popcount, deterministic selection
                ties = np.zeros((h, w))
                ties[: h // 2] = 1.0
                first = quantile_mask(ties, lam)
                second = quantile_mask(ties, lam)
                assert first.popcount() == expected
                assert first.bits.tobytes() == second.bits.tobytes()


def test_counterfactual_state_soundness_and_offline_pipeline(tmp_path):
    """Offline fixture pipeline exits 0 and every intervention only changes
    the target or its descendants (checked against the closure oracle)."""
    with criterion("fixture pipeline exit 0 + counterfactual-state soundness"):
        cfg = fixture_config(tmp_path)
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps(cfg.to_json_dict()), encoding="utf-8")
        result = CliRunner().invoke(
            cli_main, ["run", "--config", str(config_path)], catch_exceptions=False
        )
        assert result.exit_code == 0, result.output

        checked = 0
        for iv_path in sorted(Path(cfg.output_dir).glob("*/interventions.json")):
            graph_data = json.loads((iv_path.parent / "graph.json").read_text())
            graph = from_json_dict(graph_data)
            ids = graph.concept_ids()
            index = {cid: i for i, cid in enumerate(ids)}
            closure = closure_by_matrix_powers(
                len(ids), [(index[e.cause_id], index[e.effect_id]) for e in graph.edges]
            )
            for iv in json.loads(iv_path.read_text())["interventions"]:
                target = iv["target_concept_id"]
                reachable = {
                    ids[j] for j in range(len(ids)) if closure[index[target], j]
                }
                assert set(iv["final_concept_states"]) <= {target} | reachable
                checked += 1
        assert checked >= 3


def test_toy_locality():
    """At least 90% of the edit-vs-reconstruction change mass lies inside the
    union of the per-step gated masks."""
    with criterion("toy locality (>= 90% change mass inside gated masks)"):
        backend = toy_backend()
        cfg = EditConfig(
            inversion_steps=50, skip_ratio=0.15, source_guidance=1.0, warmup_steps=5
        )
        prompts = EditPromptSet(
            base_prompt="", intervention_prompt="", descendant_prompts=(("c_red", "red patch"),)
        )
        x0 = np.random.default_rng(4242).normal(size=(1, 16, 16))
        trace: list[StepTrace] = []
        edited = edit(x0, "", prompts, cfg, backend, trace=trace)
        rec = reconstruct(x0, "", cfg, backend)
        delta = np.abs(edited - rec)
        assert delta.sum() > 0, "guidance had no effect"
        union = np.zeros((16, 16), dtype=bool)
        for step in trace:
            for mask in step.concept_masks.values():
                union |= mask.bits.astype(bool)
        inside_fraction = float(delta[:, union].sum()) / float(delta.sum())
        assert inside_fraction >= 0.90


def test_aggregation_reference_row():
    """Dataset-column means reproduce the published average column exactly."""
    with criterion("aggregation fixture (0.808 / 0.1865 exactly)"):
        result = aggregate(
            [
                EvalRecord(
                    method="csg", dataset="celeba_hq", intervention_id="i1",
                    vlm_eff=0.854, lpips=0.1980,
                ),
                EvalRecord(
                    method="csg", dataset="ms_coco", intervention_id="i2",
                    vlm_eff=0.762, lpips=0.1750,
                ),
            ]
        )
        assert result.average == (0.808, 0.1865)
        # the other two reference rows obey the same averaging rule up to the
        # half-unit rounding of their printed precision (0.7665 -> 0.767)
        assert (0.792 + 0.741) / 2 == pytest.approx(0.767, abs=5.1e-4)
        assert (0.756 + 0.655) / 2 == pytest.approx(0.705, abs=5.1e-4)
        assert (0.4836 + 0.4759) / 2 == pytest.approx(0.4798, abs=5.1e-5)
        assert (0.2244 + 0.2035) / 2 == pytest.approx(0.2139, abs=5.1e-5)
