"""End-to-end orchestration: configuration, per-image runs, dataset sweeps.

A run walks each image through describe -> extract -> propose -> (per
intervention) edit -> decode -> evaluate, persisting every intermediate
artifact under out/<image_id>/. A failure in one intervention is recorded and
does not abort the others; only a failed extraction is fatal for an image.
Wall-clock timings are persisted separately from the run record so that
record files are byte-identical across warm-cache reruns.
"""

from __future__ import annotations

import json
import logging
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .backends import RemoteBackend, ToyBackend, ToyWorld
from .errors import CausalGenError, DatasetEmpty, InsufficientItems
from .evaluation import (
    PIXEL_MSE_FALLBACK,
    EvalRecord,
    EvalResult,
    Evaluator,
    aggregate,
    metric_label,
    perceptual_distance,
    result_to_csv,
    result_to_json_dict,
)
from .extractor import ConceptExtractor, SceneDescription
from .gateway import FixtureVlmClient, ImagePayload, VlmClient
from .graph import to_json_dict
from .guidance import EditConfig
from .manipulator import (
    ConceptManipulator,
    build_edit_prompts,
    intervention_to_json_dict,
)
from . import editor
from .backends import array_to_wire

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

DEFAULT_MODELS = {
    "extractor": "qwen3-vl-30b-a3b-instruct",
    "manipulator": "qwen3-vl-30b-a3b-instruct",
    "evaluator": "qwen3-vl-30b-a3b-instruct",
}


@dataclass
class RunConfig:
    models: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_MODELS))
    vlm_base_url: str = ""
    vlm_api_key: str = ""
    diffusion_service_url: str = ""
    edit: EditConfig = field(default_factory=EditConfig)
    datasets: dict[str, str] = field(default_factory=dict)
    sample_count: int = 75
    seed: int = 20240501
    output_dir: str = "out"
    backend: str = "toy"  # toy | remote
    toy_world: dict = field(default_factory=dict)
    fixtures_dir: str = ""
    cache_dir: str = ""
    workers: int = 2
    lpips_method: str = PIXEL_MSE_FALLBACK

    def __post_init__(self):
        if isinstance(self.edit, dict):
            self.edit = EditConfig.from_json_dict(self.edit)
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if self.backend not in ("toy", "remote"):
            raise ValueError(f"backend must be 'toy' or 'remote', got {self.backend!r}")

    @classmethod
    def from_json_file(cls, path: str | Path, env: dict | None = None) -> "RunConfig":
        """Load the single JSON config document; env vars override credentials only."""
        import os

        env = env if env is not None else dict(os.environ)
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        edit_cfg = EditConfig.from_json_dict(data.pop("edit", {}))
        known = {f for f in cls.__dataclass_fields__} - {"edit"}
        cfg = cls(edit=edit_cfg, **{k: v for k, v in data.items() if k in known})
        cfg.vlm_base_url = env.get("CAUSALGEN_BASE_URL", cfg.vlm_base_url)
        cfg.vlm_api_key = env.get("CAUSALGEN_API_KEY", cfg.vlm_api_key)
        return cfg

    def to_json_dict(self) -> dict:
        data = {f: getattr(self, f) for f in self.__dataclass_fields__}
        data["edit"] = {
            f: getattr(self.edit, f) for f in EditConfig.__dataclass_fields__
        }
        data.pop("vlm_api_key")  # never persist credentials
        return data


@dataclass
class PipelineDeps:
    """Live collaborators for one run; built from config or injected by tests."""

    vlm_client: object
    backend: object
    service_url: str = ""

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "PipelineDeps":
        if cfg.fixtures_dir:
            vlm_client = FixtureVlmClient.from_directory(cfg.fixtures_dir)
        else:
            vlm_client = VlmClient(
                cfg.vlm_base_url or "http://localhost:8000/v1",
                api_key=cfg.vlm_api_key,
                cache_dir=cfg.cache_dir or None,
            )
        if cfg.backend == "toy":
            world = ToyWorld.from_json_dict(cfg.toy_world) if cfg.toy_world else ToyWorld()
            backend = ToyBackend(world)
        else:
            backend = RemoteBackend(cfg.diffusion_service_url)
        return cls(vlm_client=vlm_client, backend=backend, service_url=cfg.diffusion_service_url)


# --- per-image stages -----------------------------------------------------------


def image_output_dir(cfg: RunConfig, image_id: str) -> Path:
    path = Path(cfg.output_dir) / image_id
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_image_payload(image_path: str | Path) -> ImagePayload:
    data = Path(image_path).read_bytes()
    suffix = Path(image_path).suffix.lower()
    media = "image/jpeg" if suffix in (".jpg", ".jpeg") else "image/png"
    return ImagePayload(data=data, media_type=media)


def obtain_scene(
    image: ImagePayload, caption: str | None, extractor: ConceptExtractor
) -> tuple[SceneDescription, str]:
    """Sidecar caption when present, else a model-written description."""
    if caption:
        return SceneDescription(text=" ".join(caption.split())), "sidecar"
    return extractor.describe_scene(image), "model"


def stage_extract(deps: PipelineDeps, cfg: RunConfig, image: ImagePayload,
                  scene: SceneDescription, out_dir: Path):
    extractor = ConceptExtractor(deps.vlm_client, cfg.models["extractor"])
    graph = extractor.extract(image, scene)
    _write_json(out_dir / "graph.json", to_json_dict(graph))
    return graph


def stage_manipulate(deps: PipelineDeps, cfg: RunConfig, image: ImagePayload,
                     scene: SceneDescription, graph, out_dir: Path):
    manipulator = ConceptManipulator(deps.vlm_client, cfg.models["manipulator"])
    interventions, warnings = manipulator.propose_interventions(image, scene, graph)
    _write_json(
        out_dir / "interventions.json",
        {
            "interventions": [intervention_to_json_dict(iv) for iv in interventions],
            "warnings": warnings,
            "graph_ref": graph.fingerprint(),
        },
    )
    return interventions, warnings


def stage_edit_one(deps: PipelineDeps, cfg: RunConfig, scene: SceneDescription,
                   iv, x0_latent, index: int, out_dir: Path):
    """Run the guided edit for one intervention; persists the latent artifact."""
    prompt_set = build_edit_prompts(iv, scene)
    cf_latent = editor.edit(x0_latent, scene.text, prompt_set, cfg.edit, deps.backend)
    if cfg.backend == "toy":
        cf_path = out_dir / f"cf_{index}.tensor.json"
        _write_json(cf_path, array_to_wire(cf_latent))
    else:
        cf_path = out_dir / f"cf_{index}.png"
        cf_path.write_bytes(deps.backend.decode_latent(cf_latent))
    return cf_latent, cf_path


def stage_evaluate_one(deps: PipelineDeps, cfg: RunConfig, image: ImagePayload,
                       iv, cf_latent, index: int, out_dir: Path):
    """Judge one counterfactual and measure its distance to the factual image."""
    cf_png = deps.backend.decode_latent(cf_latent)
    evaluator = Evaluator(deps.vlm_client, cfg.models["evaluator"])
    verdict, score = evaluator.vlm_eff(
        ImagePayload(data=cf_png), iv, iv.generation_prompt
    )

    lpips_value = None
    lpips_err = ""
    try:
        factual_png = _match_dimensions(image.data, cf_png)
        lpips_value = perceptual_distance(
            factual_png, cf_png, cfg.lpips_method, service_url=deps.service_url
        )
    except CausalGenError as err:
        lpips_err = str(err)
        logger.warning("perceptual distance failed for %s: %s", iv.id, err)

    payload = {
        "intervention_id": verdict.intervention_id,
        "concept_checks": [
            {
                "concept_name": c.concept_name,
                "expected_value": c.expected_value,
                "present": c.present,
            }
            for c in verdict.concept_checks
        ],
        "verdict": verdict.verdict,
        "reasoning": verdict.reasoning,
        "vlm_eff": score,
        "lpips": lpips_value,
        "lpips_method": metric_label(cfg.lpips_method) if lpips_value is not None else "",
        "lpips_error": lpips_err,
    }
    _write_json(out_dir / f"eval_{index}.json", payload)
    return payload


def _match_dimensions(factual_png: bytes, cf_png: bytes) -> bytes:
    """Resize the factual image to the counterfactual's dimensions for the metric."""
    import io

    from PIL import Image

    with Image.open(io.BytesIO(cf_png)) as cf_img:
        size = cf_img.size
    with Image.open(io.BytesIO(factual_png)) as factual:
        if factual.size == size:
            return factual_png
        resized = factual.convert("RGB").resize(size, Image.BILINEAR)
    buf = io.BytesIO()
    resized.save(buf, format="PNG")
    return buf.getvalue()


def run_single(image_path: str | Path, caption: str | None, cfg: RunConfig,
               deps: PipelineDeps, dataset: str = "", image_id: str = "") -> dict:
    """Full pipeline for one image; returns the run record as a JSON dict.

    The record is persisted to out/<image_id>/record.json; wall-clock timings
    go to timings.json so the record itself is deterministic.
    """
    image_id = image_id or Path(image_path).stem
    out_dir = image_output_dir(cfg, image_id)
    timings: dict[str, float] = {}
    record: dict = {
        "image_id": image_id,
        "dataset": dataset,
        "image_path": str(image_path),
        "status": "ok",
        "error": "",
        "interventions": [],
    }

    def timed(stage_name, fn, *args):
        started = time.monotonic()
        try:
            return fn(*args)
        finally:
            timings[stage_name] = time.monotonic() - started

    try:
        image = load_image_payload(image_path)
        extractor = ConceptExtractor(deps.vlm_client, cfg.models["extractor"])
        scene, scene_source = timed("describe", obtain_scene, image, caption, extractor)
        record["scene"] = {"text": scene.text, "source": scene_source}
        _write_json(out_dir / "scene.json", record["scene"])
        graph = timed("extract", stage_extract, deps, cfg, image, scene, out_dir)
        record["graph_path"] = "graph.json"
    except CausalGenError as err:
        record["status"] = "failed"
        record["error"] = f"{type(err).__name__}: {err}"
        _write_json(out_dir / "record.json", record)
        _write_json(out_dir / "timings.json", timings)
        return record

    try:
        interventions, warnings = timed(
            "manipulate", stage_manipulate, deps, cfg, image, scene, graph, out_dir
        )
        record["interventions_path"] = "interventions.json"
        record["warnings"] = warnings
    except CausalGenError as err:
        record["status"] = "failed"
        record["error"] = f"{type(err).__name__}: {err}"
        _write_json(out_dir / "record.json", record)
        _write_json(out_dir / "timings.json", timings)
        return record

    x0_latent = deps.backend.encode_image(image.data)
    for index, iv in enumerate(interventions, start=1):
        entry = {"intervention_id": iv.id, "target": iv.target_concept_id, "status": "ok"}
        try:
            cf_latent, cf_path = timed(
                f"edit_{index}", stage_edit_one, deps, cfg, scene, iv, x0_latent, index, out_dir
            )
            entry["cf_path"] = cf_path.name
            evaluation = timed(
                f"evaluate_{index}",
                stage_evaluate_one, deps, cfg, image, iv, cf_latent, index, out_dir,
            )
            entry["eval_path"] = f"eval_{index}.json"
            entry["vlm_eff"] = evaluation["vlm_eff"]
            entry["verdict"] = evaluation["verdict"]
            entry["lpips"] = evaluation["lpips"]
        except CausalGenError as err:
            entry["status"] = "error"
            entry["error"] = f"{type(err).__name__}: {err}"
            logger.warning("intervention %s failed: %s", iv.id, err)
        record["interventions"].append(entry)

    _write_json(out_dir / "record.json", record)
    _write_json(out_dir / "timings.json", timings)
    return record


# --- dataset sweeps ---------------------------------------------------------------


def list_dataset(path: str | Path) -> list[Path]:
    root = Path(path)
    if not root.is_dir():
        raise DatasetEmpty(f"dataset directory {root} does not exist")
    items = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not items:
        raise DatasetEmpty(f"no images under {root}")
    return items


def sample_dataset(name: str, path: str | Path, count: int, seed: int) -> list[Path]:
    """Sample `count` images without replacement, reproducibly per (seed, name)."""
    items = list_dataset(path)
    if len(items) < count:
        raise InsufficientItems(
            f"dataset {name!r} has {len(items)} items, need {count}"
        )
    rng = random.Random(f"{seed}:{name}")
    return rng.sample(items, count)


def sidecar_caption(image_path: Path) -> str | None:
    sidecar = image_path.with_suffix(".txt")
    if sidecar.exists():
        text = sidecar.read_text(encoding="utf-8").strip()
        return text or None
    return None


def run_dataset(cfg: RunConfig, deps: PipelineDeps | None = None) -> tuple[EvalResult | None, dict]:
    """Sample and run every configured dataset; returns (EvalResult, manifest)."""
    deps = deps or PipelineDeps.from_config(cfg)
    out_root = Path(cfg.output_dir)
    out_root.mkdir(parents=True, exist_ok=True)

    tasks: list[tuple[str, Path]] = []
    for name, path in cfg.datasets.items():
        for item in sample_dataset(name, path, cfg.sample_count, cfg.seed):
            tasks.append((name, item))

    def process(task):
        dataset, image_path = task
        return run_single(
            image_path,
            sidecar_caption(image_path),
            cfg,
            deps,
            dataset=dataset,
            image_id=f"{dataset}_{image_path.stem}",
        )

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            records = list(pool.map(process, tasks))
    else:
        records = [process(task) for task in tasks]

    eval_records = collect_eval_records(records)
    result = aggregate(eval_records) if eval_records else None
    manifest = {
        "seed": cfg.seed,
        "config": cfg.to_json_dict(),
        "records": [
            {"image_id": r["image_id"], "dataset": r["dataset"], "status": r["status"]}
            for r in records
        ],
    }
    _write_json(out_root / "manifest.json", manifest)
    if result is not None:
        _write_json(out_root / "report.json", result_to_json_dict(result))
        (out_root / "report.csv").write_text(result_to_csv(result), encoding="utf-8")
    return result, manifest


def collect_eval_records(records: list[dict], method: str = "csg") -> list[EvalRecord]:
    out = []
    for record in records:
        for entry in record.get("interventions", []):
            if entry.get("status") != "ok" or "vlm_eff" not in entry:
                continue
            out.append(
                EvalRecord(
                    method=method,
                    dataset=record.get("dataset") or "default",
                    intervention_id=f"{record['image_id']}/{entry['intervention_id']}",
                    vlm_eff=entry["vlm_eff"],
                    lpips=entry.get("lpips"),
                )
            )
    return out


def reaggregate_output(output_dir: str | Path) -> EvalResult | None:
    """Rebuild the report from persisted per-intervention eval files."""
    out_root = Path(output_dir)
    eval_records = []
    for eval_path in sorted(out_root.glob("*/eval_*.json")):
        payload = json.loads(eval_path.read_text(encoding="utf-8"))
        image_dir = eval_path.parent
        dataset = "default"
        record_path = image_dir / "record.json"
        if record_path.exists():
            dataset = json.loads(record_path.read_text(encoding="utf-8")).get(
                "dataset"
            ) or "default"
        eval_records.append(
            EvalRecord(
                method="csg",
                dataset=dataset,
                intervention_id=f"{image_dir.name}/{payload['intervention_id']}",
                vlm_eff=payload["vlm_eff"],
                lpips=payload.get("lpips"),
                lpips_method=payload.get("lpips_method", ""),
            )
        )
    if not eval_records:
        return None
    result = aggregate(eval_records)
    _write_json(out_root / "report.json", result_to_json_dict(result))
    (out_root / "report.csv").write_text(result_to_csv(result), encoding="utf-8")
    return result


def fully_succeeded(record: dict) -> bool:
    """True when every stage of the record, including all interventions, passed."""
    if record.get("status") != "ok":
        return False
    entries = record.get("interventions", [])
    return bool(entries) and all(e.get("status") == "ok" for e in entries)
