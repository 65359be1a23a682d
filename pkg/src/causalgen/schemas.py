"""Strict validation of structured model output for the three pipeline stages.

validate_schema checks required keys and kinds, trims strings, drops unknown
keys, and reports failures with a JSON-path string (e.g.
"interventions[0].generation_prompt"). It never raises anything other than
MissingField / WrongKind / EmptyValue, no matter how hostile the input.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import EmptyValue, MissingField, WrongKind

VERDICTS = ("success", "partial", "failure")
PRESENT_VALUES = ("yes", "no")


@dataclass(frozen=True)
class ConceptCheck:
    concept_name: str
    expected_value: str
    present: str  # "yes" | "no"


@dataclass(frozen=True)
class ExtractorRecord:
    concepts: list[dict]
    relationships: list[dict]
    scene_summary: str


@dataclass(frozen=True)
class ManipulatorRecord:
    interventions: list[dict]


@dataclass(frozen=True)
class EvaluatorRecord:
    intervention_id: str
    concept_checks: list[ConceptCheck]
    verdict: str
    reasoning: str


def _require(data, key: str, path: str):
    if not isinstance(data, dict):
        raise WrongKind(path, f"expected object at {path}")
    if key not in data:
        raise MissingField(f"{path}.{key}" if path else key)
    return data[key]


def _string(value, path: str, *, required_nonempty: bool = True) -> str:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        value = str(value)
    if not isinstance(value, str):
        raise WrongKind(path, f"expected string at {path}, got {type(value).__name__}")
    value = value.strip()
    if required_nonempty and not value:
        raise EmptyValue(path)
    return value


def _list(value, path: str) -> list:
    if not isinstance(value, list):
        raise WrongKind(path, f"expected array at {path}, got {type(value).__name__}")
    return value


def _enum(value, path: str, allowed: tuple[str, ...]) -> str:
    text = _string(value, path)
    if text not in allowed:
        raise WrongKind(path, f"expected one of {'|'.join(allowed)} at {path}, got {text!r}")
    return text


def _extractor(data) -> ExtractorRecord:
    concepts = []
    for i, raw in enumerate(_list(_require(data, "concepts", ""), "concepts")):
        path = f"concepts[{i}]"
        concepts.append(
            {
                "id": _string(_require(raw, "id", path), f"{path}.id"),
                "name": _string(_require(raw, "name", path), f"{path}.name"),
                "current_value": _string(
                    _require(raw, "current_value", path), f"{path}.current_value"
                ),
                "description": _string(
                    raw.get("description", ""), f"{path}.description", required_nonempty=False
                ),
            }
        )
    relationships = []
    for i, raw in enumerate(_list(_require(data, "relationships", ""), "relationships")):
        path = f"relationships[{i}]"
        relationships.append(
            {
                "id": _string(_require(raw, "id", path), f"{path}.id"),
                "cause_id": _string(_require(raw, "cause_id", path), f"{path}.cause_id"),
                "effect_id": _string(_require(raw, "effect_id", path), f"{path}.effect_id"),
                "description": _string(
                    raw.get("description", ""), f"{path}.description", required_nonempty=False
                ),
            }
        )
    summary = _string(_require(data, "scene_summary", ""), "scene_summary")
    return ExtractorRecord(concepts=concepts, relationships=relationships, scene_summary=summary)


def _propagated_change(raw, path: str) -> dict:
    return {
        "concept_id": _string(_require(raw, "concept_id", path), f"{path}.concept_id"),
        "concept_name": _string(
            raw.get("concept_name", ""), f"{path}.concept_name", required_nonempty=False
        ),
        "original_value": _string(
            raw.get("original_value", ""), f"{path}.original_value", required_nonempty=False
        ),
        "new_value": _string(_require(raw, "new_value", path), f"{path}.new_value"),
        "reason": _string(raw.get("reason", ""), f"{path}.reason", required_nonempty=False),
    }


def _intervention(raw, path: str) -> dict:
    out = {
        "id": _string(_require(raw, "id", path), f"{path}.id"),
        "target_concept_id": _string(
            _require(raw, "target_concept_id", path), f"{path}.target_concept_id"
        ),
        "target_concept_name": _string(
            raw.get("target_concept_name", ""),
            f"{path}.target_concept_name",
            required_nonempty=False,
        ),
        "intervention_description": _string(
            raw.get("intervention_description", ""),
            f"{path}.intervention_description",
            required_nonempty=False,
        ),
        "original_value": _string(
            raw.get("original_value", ""), f"{path}.original_value", required_nonempty=False
        ),
        "new_value": _string(_require(raw, "new_value", path), f"{path}.new_value"),
        "generation_prompt": _string(
            _require(raw, "generation_prompt", path), f"{path}.generation_prompt"
        ),
    }
    changes = []
    for i, raw_change in enumerate(
        _list(_require(raw, "propagated_changes", path), f"{path}.propagated_changes")
    ):
        changes.append(_propagated_change(raw_change, f"{path}.propagated_changes[{i}]"))
    out["propagated_changes"] = changes

    states_path = f"{path}.final_concept_states"
    states_raw = _require(raw, "final_concept_states", path)
    if not isinstance(states_raw, dict):
        raise WrongKind(states_path, f"expected object at {states_path}")
    out["final_concept_states"] = {
        _string(k, f"{states_path}.<key>"): _string(v, f"{states_path}.{k}")
        for k, v in states_raw.items()
    }
    return out


def _manipulator(data) -> ManipulatorRecord:
    interventions = []
    for i, raw in enumerate(_list(_require(data, "interventions", ""), "interventions")):
        interventions.append(_intervention(raw, f"interventions[{i}]"))
    return ManipulatorRecord(interventions=interventions)


def _evaluator(data) -> EvaluatorRecord:
    checks = []
    for i, raw in enumerate(_list(_require(data, "concept_checks", ""), "concept_checks")):
        path = f"concept_checks[{i}]"
        checks.append(
            ConceptCheck(
                concept_name=_string(_require(raw, "concept_name", path), f"{path}.concept_name"),
                expected_value=_string(
                    _require(raw, "expected_value", path), f"{path}.expected_value"
                ),
                present=_enum(_require(raw, "present", path), f"{path}.present", PRESENT_VALUES),
            )
        )
    return EvaluatorRecord(
        intervention_id=_string(_require(data, "intervention_id", ""), "intervention_id"),
        concept_checks=checks,
        verdict=_enum(_require(data, "verdict", ""), "verdict", VERDICTS),
        reasoning=_string(
            data.get("reasoning", "") if isinstance(data, dict) else "",
            "reasoning",
            required_nonempty=False,
        ),
    )


_VALIDATORS = {
    "extractor": _extractor,
    "manipulator": _manipulator,
    "evaluator": _evaluator,
}


def validate_schema(data, schema: str):
    """Validate parsed JSON against one of the three stage schemas.

    Returns an ExtractorRecord, ManipulatorRecord, or EvaluatorRecord.
    """
    try:
        validator = _VALIDATORS[schema]
    except KeyError:
        raise ValueError(f"unknown schema {schema!r}; expected one of {sorted(_VALIDATORS)}")
    if not isinstance(data, dict):
        raise WrongKind("", f"expected a JSON object, got {type(data).__name__}")
    return validator(data)
