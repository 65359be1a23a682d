from __future__ import annotations

import json

import pytest

from causalgen.errors import ExtractionFailed
from causalgen.extractor import ConceptExtractor, SceneDescription
from causalgen.gateway import FixtureVlmClient, ImagePayload

from .fixtures import CYCLIC_EXTRACTOR_JSON, DESCRIBE_RAW, EXTRACTOR_RAW, TOO_FEW_JSON

IMAGE = ImagePayload(data=b"not really a png", media_type="image/png")
SCENE = SceneDescription(text="a close-up portrait of a young woman with long blonde hair")


def extractor_with(raws: dict[str, list[str]]) -> tuple[ConceptExtractor, FixtureVlmClient]:
    client = FixtureVlmClient(raws)
    return ConceptExtractor(client, "fixture-model"), client


class TestDescribeScene:
    def test_returns_caption(self):
        ex, _ = extractor_with({"describe": [DESCRIBE_RAW]})
        scene = ex.describe_scene(IMAGE)
        assert scene.text
        assert scene.text.count(".") <= 3
        assert "\n" not in scene.text

    def test_degenerate_image_does_not_crash(self):
        ex, _ = extractor_with({"describe": ["a black square"]})
        assert ex.describe_scene(ImagePayload(data=b"\x00")).text == "a black square"

    def test_caption_request_parameters(self):
        ex, client = extractor_with({"describe": [DESCRIBE_RAW]})
        ex.describe_scene(IMAGE)
        _, req = client.calls[0]
        assert req.temperature == 0.1
        assert req.max_tokens == 256


class TestExtract:
    def test_fixture_replay(self):
        ex, client = extractor_with({"extract": [EXTRACTOR_RAW]})
        graph = ex.extract(IMAGE, SCENE)
        assert len(graph.concepts) == 7
        assert len(graph.edges) == 5
        assert len(client.calls) == 1
        _, req = client.calls[0]
        assert req.temperature == 0.1
        assert req.max_tokens == 2048

    def test_cyclic_then_acyclic_uses_one_retry(self):
        ex, client = extractor_with(
            {"extract": [json.dumps(CYCLIC_EXTRACTOR_JSON), EXTRACTOR_RAW]}
        )
        graph = ex.extract(IMAGE, SCENE)
        assert len(client.calls) == 2
        assert len(graph.edges) == 5

    def test_too_few_concepts(self):
        ex, _ = extractor_with({"extract": [json.dumps(TOO_FEW_JSON)]})
        with pytest.raises(ExtractionFailed) as err:
            ex.extract(IMAGE, SCENE)
        assert err.value.reason == "TooFewConcepts"

    def test_persistent_cycle_falls_back_to_pruning(self):
        ex, client = extractor_with({"extract": [json.dumps(CYCLIC_EXTRACTOR_JSON)]})
        graph = ex.extract(IMAGE, SCENE)
        # all three attempts consumed, then the back edge r6 is pruned
        assert len(client.calls) == 3
        assert [e.id for e in graph.edges] == ["r1", "r2", "r3", "r4", "r5"]

    def test_invalid_json_exhausts_retries(self):
        ex, client = extractor_with({"extract": ["no json at all"]})
        with pytest.raises(ExtractionFailed) as err:
            ex.extract(IMAGE, SCENE)
        assert err.value.reason == "InvalidJson"
        assert len(client.calls) == 3

    def test_retry_attempts_carry_distinct_indices(self):
        ex, client = extractor_with({"extract": ["garbage"]})
        with pytest.raises(ExtractionFailed):
            ex.extract(IMAGE, SCENE)
        assert [req.attempt for _, req in client.calls] == [0, 1, 2]

    def test_prompt_contains_context_block_and_part_headers(self):
        ex, _ = extractor_with({"extract": [EXTRACTOR_RAW]})
        system_text, user_text = ex.render_extract_prompt(SCENE)
        rendered = system_text + "\n" + user_text
        assert "<context>" in rendered and "</context>" in rendered
        assert SCENE.text in rendered
        assert "PART 1 — CONCEPT EXTRACTION" in rendered
        assert "PART 2 — CAUSAL RELATIONSHIP DISCOVERY" in rendered
        assert "{prompt}" not in rendered
