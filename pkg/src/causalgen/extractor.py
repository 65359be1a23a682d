"""Scene description and causal concept-graph discovery via a reasoning VLM.

Two calls per image: a short captioning request that yields the base prompt,
then the structured two-part extraction request whose JSON answer is parsed,
schema-checked, and validated into a ConceptGraph. Invalid JSON, bad schema,
out-of-range concept counts, and cyclic graphs are retried with a fresh
attempt index; a graph that stays cyclic after the retry budget is repaired
by pruning back-edges deterministically.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from . import prompts
from .errors import (
    CycleDetected,
    ExtractionFailed,
    GatewayError,
    GraphError,
    SchemaError,
)
from .gateway import ImagePayload, ModelRequest, extract_json
from .graph import ConceptGraph, prune_back_edges, validate_graph
from .schemas import validate_schema

logger = logging.getLogger(__name__)

MIN_CONCEPTS = 5
MAX_CONCEPTS = 20

DESCRIBE_TEMPERATURE = 0.1
DESCRIBE_MAX_TOKENS = 256
EXTRACT_TEMPERATURE = 0.1
EXTRACT_MAX_TOKENS = 2048


@dataclass(frozen=True)
class SceneDescription:
    """The base prompt: a 1-3 sentence caption of the factual image."""

    text: str


class ConceptExtractor:
    def __init__(self, client, model_name: str, *, max_attempts: int = 3):
        self.client = client
        self.model_name = model_name
        self.max_attempts = max_attempts
        self._describe_system = prompts.load_template("describe_system")
        self._describe_user = prompts.load_template("describe_user")
        self._extract_system = prompts.load_template("extractor_system")
        self._extract_user = prompts.load_template("extractor_user")

    def describe_scene(self, image: ImagePayload) -> SceneDescription:
        resp = self.client.complete(
            ModelRequest(
                model_name=self.model_name,
                system_text=self._describe_system,
                user_text=self._describe_user,
                image=image,
                temperature=DESCRIBE_TEMPERATURE,
                max_tokens=DESCRIBE_MAX_TOKENS,
            )
        )
        text = " ".join(resp.raw_text.split()).strip()
        if not text:
            raise ExtractionFailed("EmptyDescription", "model returned an empty caption")
        return SceneDescription(text=text)

    def render_extract_prompt(self, scene: SceneDescription) -> tuple[str, str]:
        return self._extract_system, prompts.render(self._extract_user, {"prompt": scene.text})

    def extract(self, image: ImagePayload, scene: SceneDescription) -> ConceptGraph:
        """Run the two-part extraction prompt and return a validated graph."""
        system_text, user_text = self.render_extract_prompt(scene)
        last_reason = "InvalidJson"
        last_record = None
        for attempt in range(self.max_attempts):
            resp = self.client.complete(
                ModelRequest(
                    model_name=self.model_name,
                    system_text=system_text,
                    user_text=user_text,
                    image=image,
                    temperature=EXTRACT_TEMPERATURE,
                    max_tokens=EXTRACT_MAX_TOKENS,
                    attempt=attempt,
                )
            )
            try:
                record = validate_schema(extract_json(resp.raw_text), "extractor")
            except (GatewayError, SchemaError) as err:
                last_reason = "InvalidJson"
                logger.warning("extraction attempt %d: %s", attempt, err)
                continue

            count = len(record.concepts)
            if count < MIN_CONCEPTS:
                last_reason = "TooFewConcepts"
                logger.warning("extraction attempt %d: only %d concepts", attempt, count)
                continue
            if count > MAX_CONCEPTS:
                last_reason = "TooManyConcepts"
                logger.warning("extraction attempt %d: %d concepts", attempt, count)
                continue

            try:
                return validate_graph(
                    record.concepts, record.relationships, record.scene_summary
                )
            except CycleDetected as err:
                last_reason = "CyclicGraph"
                last_record = record
                logger.warning("extraction attempt %d: %s", attempt, err)
                continue
            except GraphError as err:
                last_reason = "InvalidGraph"
                logger.warning("extraction attempt %d: %s", attempt, err)
                continue

        if last_reason == "CyclicGraph" and last_record is not None:
            # Last resort: drop the back edges found in edge-list order.
            kept, dropped = prune_back_edges(last_record.concepts, last_record.relationships)
            logger.warning(
                "pruned %d cycle-closing edge(s) after %d attempts: %s",
                len(dropped),
                self.max_attempts,
                [e.id for e in dropped],
            )
            return validate_graph(last_record.concepts, kept, last_record.scene_summary)

        raise ExtractionFailed(last_reason)
