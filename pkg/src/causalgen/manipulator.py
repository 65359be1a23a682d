"""Intervention proposal and validation against the causal graph.

The model proposes three interventions on distinct concepts; each one is then
reconciled against the graph: propagated changes are restricted to strict
descendants of the target, no-op changes are removed, over-long values are
truncated to three words, and the final concept states are rebuilt as
{target} plus the surviving propagated values. The edit prompts handed to the
guidance engine come from the validated intervention, never from the model's
free-form generation prompt.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace

from . import prompts
from .errors import (
    DuplicateTargets,
    GatewayError,
    ManipulationFailed,
    MissingTargetState,
    SchemaError,
    UnknownConcept,
)
from .extractor import SceneDescription
from .gateway import ImagePayload, ModelRequest, extract_json
from .graph import ConceptGraph, descendants, to_json_dict
from .schemas import validate_schema

logger = logging.getLogger(__name__)

PROPOSE_TEMPERATURE = 0.2
PROPOSE_MAX_TOKENS = 3072
INTERVENTIONS_PER_IMAGE = 3
MAX_VALUE_WORDS = 3


@dataclass(frozen=True)
class PropagatedChange:
    concept_id: str
    concept_name: str
    original_value: str
    new_value: str
    reason: str = ""


@dataclass(frozen=True)
class Intervention:
    """One do-operation with its propagated effects and final states."""

    id: str
    target_concept_id: str
    target_concept_name: str
    intervention_description: str
    original_value: str
    new_value: str
    propagated_changes: tuple[PropagatedChange, ...]
    final_concept_states: dict[str, str]
    generation_prompt: str


@dataclass(frozen=True)
class EditPromptSet:
    """Prompts consumed by the guidance engine for one intervention."""

    base_prompt: str
    intervention_prompt: str
    descendant_prompts: tuple[tuple[str, str], ...]  # (concept_id, phrase value)


def _truncate_words(value: str, path: str, warnings: list[str]) -> str:
    words = value.split()
    if len(words) > MAX_VALUE_WORDS:
        warnings.append(
            f"{path}: value {value!r} truncated to first {MAX_VALUE_WORDS} words"
        )
        return " ".join(words[:MAX_VALUE_WORDS])
    return value


def intervention_from_record(record: dict) -> Intervention:
    return Intervention(
        id=record["id"],
        target_concept_id=record["target_concept_id"],
        target_concept_name=record["target_concept_name"],
        intervention_description=record["intervention_description"],
        original_value=record["original_value"],
        new_value=record["new_value"],
        propagated_changes=tuple(
            PropagatedChange(**change) for change in record["propagated_changes"]
        ),
        final_concept_states=dict(record["final_concept_states"]),
        generation_prompt=record["generation_prompt"],
    )


def validate_intervention(
    graph: ConceptGraph, iv: Intervention
) -> tuple[Intervention, list[str]]:
    """Reconcile an intervention with the graph; returns (cleaned, warnings).

    Validation is a fixpoint: re-validating the cleaned intervention yields
    an equal intervention and no new warnings.
    """
    if not graph.has_concept(iv.target_concept_id):
        raise UnknownConcept(f"intervention target {iv.target_concept_id!r} not in graph")

    warnings: list[str] = []
    new_value = _truncate_words(iv.new_value.strip(), f"{iv.id}.new_value", warnings)
    if not new_value:
        raise MissingTargetState(f"{iv.id}: empty new value for target")

    allowed = descendants(graph, iv.target_concept_id)
    target = graph.concept(iv.target_concept_id)
    surviving: list[PropagatedChange] = []
    seen: set[str] = set()
    for i, change in enumerate(iv.propagated_changes):
        path = f"{iv.id}.propagated_changes[{i}]"
        if not graph.has_concept(change.concept_id):
            warnings.append(f"{path}: unknown concept {change.concept_id!r}, dropped")
            continue
        if change.concept_id not in allowed:
            warnings.append(
                f"{path}: {change.concept_id!r} is not a descendant of "
                f"{iv.target_concept_id!r}, dropped"
            )
            continue
        if change.concept_id in seen:
            warnings.append(f"{path}: duplicate change to {change.concept_id!r}, dropped")
            continue
        value = _truncate_words(change.new_value.strip(), f"{path}.new_value", warnings)
        if not value:
            warnings.append(f"{path}: empty new value, dropped")
            continue
        if value == change.original_value.strip():
            warnings.append(f"{path}: new value equals original, removed as a no-op")
            continue
        seen.add(change.concept_id)
        surviving.append(replace(change, new_value=value))

    # Final states are rebuilt, target first, then surviving propagated order.
    states = {iv.target_concept_id: new_value}
    for change in surviving:
        states[change.concept_id] = change.new_value
    omitted = set(iv.final_concept_states) - set(states)
    if omitted:
        warnings.append(
            f"{iv.id}: final_concept_states entries {sorted(omitted)} not backed by "
            "the target or a surviving propagated change, dropped"
        )

    cleaned = replace(
        iv,
        target_concept_name=iv.target_concept_name or target.name,
        original_value=iv.original_value or target.current_value,
        new_value=new_value,
        propagated_changes=tuple(surviving),
        final_concept_states=states,
    )
    return cleaned, warnings


def build_edit_prompts(iv: Intervention, scene: SceneDescription) -> EditPromptSet:
    """Derive the guidance prompts from a validated intervention.

    The intervention prompt is the target's phrase value; descendant prompts
    are the surviving propagated phrase values in list order. With no
    propagated changes the target's own value is used as the single
    descendant prompt, so the guidance sum is never empty.
    """
    descendant_prompts = tuple(
        (change.concept_id, change.new_value) for change in iv.propagated_changes
    )
    if not descendant_prompts:
        descendant_prompts = ((iv.target_concept_id, iv.new_value),)
    return EditPromptSet(
        base_prompt=scene.text,
        intervention_prompt=iv.new_value,
        descendant_prompts=descendant_prompts,
    )


class ConceptManipulator:
    def __init__(self, client, model_name: str, *, max_attempts: int = 3):
        self.client = client
        self.model_name = model_name
        self.max_attempts = max_attempts
        self._system = prompts.load_template("manipulator_system")
        self._user = prompts.load_template("manipulator_user")

    def render_propose_prompt(
        self, graph: ConceptGraph, scene: SceneDescription
    ) -> tuple[str, str]:
        graph_json = to_json_dict(graph)
        user = prompts.render(
            self._user,
            {
                "scene_summary": graph.scene_summary or scene.text,
                "concepts_json": json.dumps(graph_json["concepts"], indent=2),
                "relationships_json": json.dumps(graph_json["relationships"], indent=2),
                "base_prompt": scene.text,
            },
        )
        return self._system, user

    def propose_interventions(
        self, image: ImagePayload, scene: SceneDescription, graph: ConceptGraph
    ) -> tuple[list[Intervention], list[str]]:
        """Ask for three interventions on distinct targets; returns (list, warnings)."""
        system_text, user_text = self.render_propose_prompt(graph, scene)
        last_error: Exception | None = None
        for attempt in range(self.max_attempts):
            resp = self.client.complete(
                ModelRequest(
                    model_name=self.model_name,
                    system_text=system_text,
                    user_text=user_text,
                    image=image,
                    temperature=PROPOSE_TEMPERATURE,
                    max_tokens=PROPOSE_MAX_TOKENS,
                    attempt=attempt,
                )
            )
            try:
                record = validate_schema(extract_json(resp.raw_text), "manipulator")
                return self._accept(graph, record.interventions)
            except (GatewayError, SchemaError, DuplicateTargets, UnknownConcept,
                    MissingTargetState, ManipulationFailed) as err:
                last_error = err
                logger.warning("proposal attempt %d: %s", attempt, err)

        if isinstance(last_error, DuplicateTargets):
            raise last_error
        raise ManipulationFailed(type(last_error).__name__, str(last_error))

    def _accept(
        self, graph: ConceptGraph, records: list[dict]
    ) -> tuple[list[Intervention], list[str]]:
        if len(records) != INTERVENTIONS_PER_IMAGE:
            raise ManipulationFailed(
                "WrongCount",
                f"expected {INTERVENTIONS_PER_IMAGE} interventions, got {len(records)}",
            )
        targets = [r["target_concept_id"] for r in records]
        if len(set(targets)) != len(targets):
            raise DuplicateTargets(f"targets are not distinct: {targets}")

        cleaned: list[Intervention] = []
        warnings: list[str] = []
        for record in records:
            iv, iv_warnings = validate_intervention(graph, intervention_from_record(record))
            cleaned.append(iv)
            warnings.extend(iv_warnings)
        return cleaned, warnings


# --- persistence -------------------------------------------------------------


def intervention_to_json_dict(iv: Intervention) -> dict:
    return {
        "id": iv.id,
        "target_concept_id": iv.target_concept_id,
        "target_concept_name": iv.target_concept_name,
        "intervention_description": iv.intervention_description,
        "original_value": iv.original_value,
        "new_value": iv.new_value,
        "propagated_changes": [
            {
                "concept_id": c.concept_id,
                "concept_name": c.concept_name,
                "original_value": c.original_value,
                "new_value": c.new_value,
                "reason": c.reason,
            }
            for c in iv.propagated_changes
        ],
        "final_concept_states": dict(iv.final_concept_states),
        "generation_prompt": iv.generation_prompt,
    }
