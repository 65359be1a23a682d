"""Canned model outputs shared by extractor, manipulator, and pipeline tests.

The graph is a portrait scene: age -> hair color, age -> skin texture,
gender -> facial hair, plus two isolated concepts. Fixture texts deliberately
include fences and prose so that the JSON extraction path is exercised.
"""

from __future__ import annotations

import json

SEVEN_CONCEPTS = [
    {"id": "c1", "name": "apparent age", "current_value": "young adult",
     "description": "Estimated age bracket of the person."},
    {"id": "c2", "name": "hair color", "current_value": "blonde",
     "description": "Dominant color of the hair."},
    {"id": "c3", "name": "gender presentation", "current_value": "female",
     "description": "Presented gender of the subject."},
    {"id": "c4", "name": "facial hair", "current_value": "none",
     "description": "Amount and style of facial hair."},
    {"id": "c5", "name": "skin texture", "current_value": "smooth skin",
     "description": "Surface quality of the skin."},
    {"id": "c6", "name": "clothing style", "current_value": "casual sweater",
     "description": "Type of clothing worn."},
    {"id": "c7", "name": "background setting", "current_value": "plain studio",
     "description": "What is behind the subject."},
]

FIVE_EDGES = [
    {"id": "r1", "cause_id": "c1", "effect_id": "c2",
     "description": "Aging turns hair grey."},
    {"id": "r2", "cause_id": "c1", "effect_id": "c5",
     "description": "Aging wrinkles the skin."},
    {"id": "r3", "cause_id": "c3", "effect_id": "c4",
     "description": "Gender influences facial hair."},
    {"id": "r4", "cause_id": "c3", "effect_id": "c2",
     "description": "Gender correlates with hair styling."},
    {"id": "r5", "cause_id": "c1", "effect_id": "c6",
     "description": "Age influences clothing style."},
]

EXTRACTOR_JSON = {
    "concepts": SEVEN_CONCEPTS,
    "relationships": FIVE_EDGES,
    "scene_summary": "A studio portrait of a young blonde woman in a sweater.",
}

EXTRACTOR_RAW = "```json\n" + json.dumps(EXTRACTOR_JSON, indent=2) + "\n```"

CYCLIC_EXTRACTOR_JSON = {
    "concepts": SEVEN_CONCEPTS,
    "relationships": FIVE_EDGES
    + [{"id": "r6", "cause_id": "c2", "effect_id": "c1", "description": "backwards"}],
    "scene_summary": "A studio portrait of a young blonde woman in a sweater.",
}

TOO_FEW_JSON = {
    "concepts": SEVEN_CONCEPTS[:3],
    "relationships": [],
    "scene_summary": "A cropped portrait.",
}

INTERVENTIONS_JSON = {
    "interventions": [
        {
            "id": "intervention_1",
            "target_concept_id": "c1",
            "target_concept_name": "apparent age",
            "intervention_description": "Make the person elderly.",
            "original_value": "young adult",
            "new_value": "elderly",
            "propagated_changes": [
                {"concept_id": "c2", "concept_name": "hair color",
                 "original_value": "blonde", "new_value": "grey hair",
                 "reason": "hair greys with age"},
                {"concept_id": "c5", "concept_name": "skin texture",
                 "original_value": "smooth skin", "new_value": "wrinkled skin",
                 "reason": "skin wrinkles with age"},
            ],
            "final_concept_states": {"c1": "elderly", "c2": "grey hair",
                                     "c5": "wrinkled skin"},
            "generation_prompt": "a studio portrait of an elderly woman with grey hair",
        },
        {
            "id": "intervention_2",
            "target_concept_id": "c3",
            "target_concept_name": "gender presentation",
            "intervention_description": "Change the presented gender to male.",
            "original_value": "female",
            "new_value": "male",
            "propagated_changes": [
                {"concept_id": "c4", "concept_name": "facial hair",
                 "original_value": "none", "new_value": "full beard",
                 "reason": "male presentation often has facial hair"},
                {"concept_id": "c7", "concept_name": "background setting",
                 "original_value": "plain studio", "new_value": "office",
                 "reason": "over-propagated, background is not a descendant"},
            ],
            "final_concept_states": {"c3": "male", "c4": "full beard"},
            "generation_prompt": "a studio portrait of a young man with a beard",
        },
        {
            "id": "intervention_3",
            "target_concept_id": "c7",
            "target_concept_name": "background setting",
            "intervention_description": "Move the subject outdoors.",
            "original_value": "plain studio",
            "new_value": "garden backdrop",
            "propagated_changes": [],
            "final_concept_states": {"c7": "garden backdrop"},
            "generation_prompt": "a portrait of a young blonde woman in a garden",
        },
    ]
}

INTERVENTIONS_RAW = "Here you go:\n" + json.dumps(INTERVENTIONS_JSON, indent=2)


def evaluator_json(intervention_id: str, checks: list[tuple[str, str, str]], verdict: str,
                   reasoning: str = "fixture verdict") -> dict:
    return {
        "intervention_id": intervention_id,
        "concept_checks": [
            {"concept_name": name, "expected_value": value, "present": present}
            for name, value, present in checks
        ],
        "verdict": verdict,
        "reasoning": reasoning,
    }


EVALUATOR_RAWS = [
    json.dumps(
        evaluator_json(
            "intervention_1",
            [("apparent age", "elderly", "yes"), ("hair color", "grey hair", "yes"),
             ("skin texture", "wrinkled skin", "yes")],
            "success",
        )
    ),
    json.dumps(
        evaluator_json(
            "intervention_2",
            [("gender presentation", "male", "yes"), ("facial hair", "full beard", "no")],
            "partial",
        )
    ),
    json.dumps(
        evaluator_json(
            "intervention_3",
            [("background setting", "garden backdrop", "yes")],
            "success",
        )
    ),
]

DESCRIBE_RAW = "A close-up studio portrait of a young woman with long blonde hair."
