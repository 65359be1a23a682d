"""Effectiveness and minimality scoring of counterfactual images.

Effectiveness asks a judge model whether each changed concept value is
visible in the generated image; the numeric score is the fraction of
checklist items confirmed. Minimality is perceptual distance to the factual
image, served remotely, with a plain pixel-MSE fallback that is explicitly
labeled non-comparable. Aggregation reports per-dataset means and their
unweighted average.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, field

import httpx

from . import prompts
from .errors import (
    EmptyInput,
    EmptyStates,
    SchemaInvalid,
    ServiceUnavailable,
    ShapeMismatch,
)
from .gateway import ImagePayload, ModelRequest, extract_json
from .manipulator import Intervention
from .schemas import ConceptCheck, validate_schema

EVAL_TEMPERATURE = 0.0
EVAL_MAX_TOKENS = 1024

LPIPS_REMOTE = "lpips_remote"
PIXEL_MSE_FALLBACK = "pixel_mse_fallback"
FALLBACK_LABEL = "pixel_mse_fallback (not comparable to LPIPS)"


@dataclass(frozen=True)
class Checklist:
    """Concept/value pairs the counterfactual image must exhibit."""

    items: tuple[tuple[str, str], ...]  # (concept name, expected value)

    def as_text(self) -> str:
        return "\n".join(f"{name}: {value}" for name, value in self.items)


@dataclass(frozen=True)
class EvalVerdict:
    intervention_id: str
    concept_checks: tuple[ConceptCheck, ...]
    verdict: str  # success | partial | failure
    reasoning: str

    def score(self) -> float:
        yes = sum(1 for check in self.concept_checks if check.present == "yes")
        return yes / len(self.concept_checks)


@dataclass(frozen=True)
class EvalRecord:
    method: str
    dataset: str
    intervention_id: str
    vlm_eff: float
    lpips: float | None = None
    lpips_method: str = ""


@dataclass(frozen=True)
class EvalResult:
    per_example: tuple[EvalRecord, ...]
    per_dataset: dict[str, tuple[float, float | None]]  # dataset -> (eff, lpips)
    average: tuple[float, float | None]


def build_checklist(iv: Intervention) -> Checklist:
    """One item per final concept state: target first, then propagated order."""
    if not iv.final_concept_states:
        raise EmptyStates(f"{iv.id} has no final concept states")
    names = {iv.target_concept_id: iv.target_concept_name}
    for change in iv.propagated_changes:
        names[change.concept_id] = change.concept_name
    items = tuple(
        (names.get(cid, cid), value) for cid, value in iv.final_concept_states.items()
    )
    return Checklist(items=items)


def check_rubric(verdict: str, checks: tuple[ConceptCheck, ...], target_name: str) -> str | None:
    """Return a violation description if the verdict contradicts the rubric."""
    yeses = sum(1 for c in checks if c.present == "yes")
    noes = len(checks) - yeses
    all_yes = noes == 0
    target_no = any(c.present == "no" and c.concept_name == target_name for c in checks)

    if all_yes and verdict != "success":
        return f"all checks are yes but verdict is {verdict!r}"
    if verdict == "success" and not all_yes:
        return "verdict is success but some checks are no"
    if verdict == "failure" and not (target_no or 2 * noes > len(checks)):
        return "verdict is failure but the target is visible and most checks are yes"
    return None


class Evaluator:
    def __init__(self, client, model_name: str):
        self.client = client
        self.model_name = model_name
        self._system = prompts.load_template("evaluator_system")
        self._user = prompts.load_template("evaluator_user")

    def render_prompt(self, iv: Intervention, generation_prompt: str) -> tuple[str, str]:
        checklist = build_checklist(iv)
        user = prompts.render(
            self._user,
            {
                "generation_prompt": generation_prompt,
                "target_concept_name": iv.target_concept_name,
                "original_value": iv.original_value,
                "new_value": iv.new_value,
                "checklist_text": checklist.as_text(),
            },
        )
        return self._system, user

    def vlm_eff(
        self, image_cf: ImagePayload, iv: Intervention, generation_prompt: str
    ) -> tuple[EvalVerdict, float]:
        """Judge one counterfactual image; returns (verdict, checklist fraction)."""
        system_text, user_text = self.render_prompt(iv, generation_prompt)
        resp = self.client.complete(
            ModelRequest(
                model_name=self.model_name,
                system_text=system_text,
                user_text=user_text,
                image=image_cf,
                temperature=EVAL_TEMPERATURE,
                max_tokens=EVAL_MAX_TOKENS,
            )
        )
        record = validate_schema(extract_json(resp.raw_text), "evaluator")
        violation = check_rubric(
            record.verdict, tuple(record.concept_checks), iv.target_concept_name
        )
        if violation is not None:
            raise SchemaInvalid(f"{iv.id}: {violation}")
        verdict = EvalVerdict(
            intervention_id=iv.id,  # trusted from context, not the model echo
            concept_checks=tuple(record.concept_checks),
            verdict=record.verdict,
            reasoning=record.reasoning,
        )
        return verdict, verdict.score()


# --- perceptual distance -----------------------------------------------------


def pixel_mse(image_a_png: bytes, image_b_png: bytes) -> float:
    """Mean squared pixel difference over RGB scaled to [0, 1]."""
    import io

    import numpy as np
    from PIL import Image

    with Image.open(io.BytesIO(image_a_png)) as img_a:
        a = np.asarray(img_a.convert("RGB"), dtype=np.float64) / 255.0
    with Image.open(io.BytesIO(image_b_png)) as img_b:
        b = np.asarray(img_b.convert("RGB"), dtype=np.float64) / 255.0
    if a.shape != b.shape:
        raise ShapeMismatch(f"image dimensions differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def remote_lpips(
    image_a_png: bytes,
    image_b_png: bytes,
    service_url: str,
    client: httpx.Client | None = None,
) -> float:
    """Perceptual distance as reported by the metric service."""
    http = client or httpx.Client(timeout=120.0)
    try:
        resp = http.post(
            f"{service_url.rstrip('/')}/v1/lpips",
            json={
                "image_a_png_b64": base64.b64encode(image_a_png).decode("ascii"),
                "image_b_png_b64": base64.b64encode(image_b_png).decode("ascii"),
            },
        )
    except httpx.HTTPError as err:
        raise ServiceUnavailable(f"metric service unreachable: {err}") from err
    finally:
        if client is None:
            http.close()
    if resp.status_code == 400:
        raise ShapeMismatch(f"metric service rejected the pair: {resp.text[:200]}")
    if resp.status_code != 200:
        raise ServiceUnavailable(f"metric service returned HTTP {resp.status_code}")
    return float(resp.json()["lpips"])


def perceptual_distance(
    image_a_png: bytes,
    image_b_png: bytes,
    method: str = PIXEL_MSE_FALLBACK,
    *,
    service_url: str = "",
    client: httpx.Client | None = None,
) -> float:
    if method == LPIPS_REMOTE:
        if not service_url:
            raise ServiceUnavailable("no metric service configured")
        return remote_lpips(image_a_png, image_b_png, service_url, client)
    if method == PIXEL_MSE_FALLBACK:
        return pixel_mse(image_a_png, image_b_png)
    raise ValueError(f"unknown perceptual distance method {method!r}")


def metric_label(method: str) -> str:
    return FALLBACK_LABEL if method == PIXEL_MSE_FALLBACK else method


# --- aggregation ---------------------------------------------------------------


def _mean(values: list[float]) -> float | None:
    return sum(values) / len(values) if values else None


def aggregate(records: list[EvalRecord]) -> EvalResult:
    """Per-dataset means plus their unweighted cross-dataset average."""
    if not records:
        raise EmptyInput("no evaluation records to aggregate")

    datasets: dict[str, list[EvalRecord]] = {}
    for record in records:
        datasets.setdefault(record.dataset, []).append(record)

    per_dataset: dict[str, tuple[float, float | None]] = {}
    for name in sorted(datasets):
        group = datasets[name]
        eff = sum(r.vlm_eff for r in group) / len(group)
        lpips = _mean([r.lpips for r in group if r.lpips is not None])
        per_dataset[name] = (eff, lpips)

    eff_means = [eff for eff, _ in per_dataset.values()]
    lpips_means = [lp for _, lp in per_dataset.values() if lp is not None]
    average = (
        sum(eff_means) / len(eff_means),
        _mean(lpips_means),
    )
    return EvalResult(
        per_example=tuple(records), per_dataset=per_dataset, average=average
    )


def result_to_json_dict(result: EvalResult) -> dict:
    return {
        "per_example": [
            {
                "method": r.method,
                "dataset": r.dataset,
                "intervention_id": r.intervention_id,
                "vlm_eff": r.vlm_eff,
                "lpips": r.lpips,
                "lpips_method": r.lpips_method,
            }
            for r in result.per_example
        ],
        "per_dataset": {
            name: {"vlm_eff": eff, "lpips": lpips}
            for name, (eff, lpips) in result.per_dataset.items()
        },
        "average": {"vlm_eff": result.average[0], "lpips": result.average[1]},
    }


def result_to_csv(result: EvalResult, method: str = "csg") -> str:
    """Summary table with columns (method, dataset, vlm_eff, lpips)."""
    lines = ["method,dataset,vlm_eff,lpips"]
    for name, (eff, lpips) in result.per_dataset.items():
        lines.append(f"{method},{name},{eff:.6g},{'' if lpips is None else f'{lpips:.6g}'}")
    eff, lpips = result.average
    lines.append(f"{method},Average,{eff:.6g},{'' if lpips is None else f'{lpips:.6g}'}")
    return "\n".join(lines) + "\n"
