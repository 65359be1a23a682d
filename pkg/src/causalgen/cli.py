"""Command-line surface: each pipeline stage independently invokable, plus
full runs and report re-aggregation.

Exit code 0 means the requested stages succeeded for at least one image.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path

import click

from . import editor, pipeline
from .backends import array_to_wire, wire_to_array
from .errors import CausalGenError
from .evaluation import aggregate, result_to_csv, result_to_json_dict
from .extractor import ConceptExtractor, SceneDescription
from .gateway import ImagePayload
from .graph import from_json_dict
from .manipulator import build_edit_prompts, intervention_from_record
from .pipeline import PipelineDeps, RunConfig

logger = logging.getLogger(__name__)


def common_options(fn):
    @click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                  default=None, help="JSON run configuration.")
    @click.option("--backend", type=click.Choice(["toy", "remote"]), default=None,
                  help="Denoiser backend override.")
    @click.option("--fixtures", "fixtures_dir", type=click.Path(exists=True, file_okay=False),
                  default=None, help="Directory of canned model responses (offline mode).")
    @click.option("--seed", type=int, default=None, help="Sampling seed override.")
    @click.option("--out", "output_dir", type=click.Path(file_okay=False), default=None,
                  help="Output directory override.")
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        return fn(*args, **kwargs)

    return wrapper


def build_config(config_path, backend, fixtures_dir, seed, output_dir) -> RunConfig:
    cfg = RunConfig.from_json_file(config_path) if config_path else RunConfig()
    if backend:
        cfg.backend = backend
    if fixtures_dir:
        cfg.fixtures_dir = fixtures_dir
    if seed is not None:
        cfg.seed = seed
    if output_dir:
        cfg.output_dir = output_dir
    return cfg


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
def main(verbose: bool):
    """Causal concept extraction, intervention reasoning, and counterfactual editing."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )


def _load_scene(out_dir: Path) -> SceneDescription:
    data = json.loads((out_dir / "scene.json").read_text(encoding="utf-8"))
    return SceneDescription(text=data["text"])


def _image_id(image_path: str) -> str:
    return Path(image_path).stem


@main.command()
@common_options
@click.option("--image", "image_path", required=True, type=click.Path(exists=True))
@click.option("--caption", default=None, help="Base prompt; read from sidecar .txt if omitted.")
def extract(config_path, backend, fixtures_dir, seed, output_dir, image_path, caption):
    """Describe the image and extract its causal concept graph."""
    cfg = build_config(config_path, backend, fixtures_dir, seed, output_dir)
    deps = PipelineDeps.from_config(cfg)
    out_dir = pipeline.image_output_dir(cfg, _image_id(image_path))
    try:
        image = pipeline.load_image_payload(image_path)
        extractor = ConceptExtractor(deps.vlm_client, cfg.models["extractor"])
        caption = caption or pipeline.sidecar_caption(Path(image_path))
        scene, source = pipeline.obtain_scene(image, caption, extractor)
        (out_dir / "scene.json").write_text(
            json.dumps({"text": scene.text, "source": source}, indent=2) + "\n"
        )
        graph = pipeline.stage_extract(deps, cfg, image, scene, out_dir)
    except CausalGenError as err:
        raise click.ClickException(f"{type(err).__name__}: {err}")
    click.echo(f"extracted {len(graph.concepts)} concepts, {len(graph.edges)} edges "
               f"-> {out_dir / 'graph.json'}")


@main.command()
@common_options
@click.option("--image", "image_path", required=True, type=click.Path(exists=True))
def manipulate(config_path, backend, fixtures_dir, seed, output_dir, image_path):
    """Propose three interventions over a previously extracted graph."""
    cfg = build_config(config_path, backend, fixtures_dir, seed, output_dir)
    deps = PipelineDeps.from_config(cfg)
    out_dir = pipeline.image_output_dir(cfg, _image_id(image_path))
    try:
        image = pipeline.load_image_payload(image_path)
        graph = from_json_dict(
            json.loads((out_dir / "graph.json").read_text(encoding="utf-8"))
        )
        scene = _load_scene(out_dir)
        interventions, warnings = pipeline.stage_manipulate(
            deps, cfg, image, scene, graph, out_dir
        )
    except FileNotFoundError as err:
        raise click.ClickException(f"run `extract` first: missing {err.filename}")
    except CausalGenError as err:
        raise click.ClickException(f"{type(err).__name__}: {err}")
    click.echo(f"proposed {len(interventions)} interventions "
               f"({len(warnings)} warnings) -> {out_dir / 'interventions.json'}")


def _load_interventions(out_dir: Path):
    data = json.loads((out_dir / "interventions.json").read_text(encoding="utf-8"))
    return [intervention_from_record(r) for r in data["interventions"]]


@main.command()
@common_options
@click.option("--image", "image_path", required=True, type=click.Path(exists=True))
def edit(config_path, backend, fixtures_dir, seed, output_dir, image_path):
    """Render counterfactual latents for previously proposed interventions."""
    cfg = build_config(config_path, backend, fixtures_dir, seed, output_dir)
    deps = PipelineDeps.from_config(cfg)
    out_dir = pipeline.image_output_dir(cfg, _image_id(image_path))
    try:
        image = pipeline.load_image_payload(image_path)
        scene = _load_scene(out_dir)
        interventions = _load_interventions(out_dir)
        x0_latent = deps.backend.encode_image(image.data)
        for index, iv in enumerate(interventions, start=1):
            _, cf_path = pipeline.stage_edit_one(
                deps, cfg, scene, iv, x0_latent, index, out_dir
            )
            click.echo(f"{iv.id} -> {cf_path}")
    except FileNotFoundError as err:
        raise click.ClickException(f"run `manipulate` first: missing {err.filename}")
    except CausalGenError as err:
        raise click.ClickException(f"{type(err).__name__}: {err}")


@main.command()
@common_options
@click.option("--image", "image_path", required=True, type=click.Path(exists=True))
def evaluate(config_path, backend, fixtures_dir, seed, output_dir, image_path):
    """Judge previously rendered counterfactuals and measure minimality."""
    cfg = build_config(config_path, backend, fixtures_dir, seed, output_dir)
    deps = PipelineDeps.from_config(cfg)
    out_dir = pipeline.image_output_dir(cfg, _image_id(image_path))
    try:
        image = pipeline.load_image_payload(image_path)
        interventions = _load_interventions(out_dir)
        for index, iv in enumerate(interventions, start=1):
            tensor_path = out_dir / f"cf_{index}.tensor.json"
            if tensor_path.exists():
                cf_latent = wire_to_array(
                    json.loads(tensor_path.read_text(encoding="utf-8"))
                )
            else:
                png_path = out_dir / f"cf_{index}.png"
                cf_latent = deps.backend.encode_image(png_path.read_bytes())
            evaluation = pipeline.stage_evaluate_one(
                deps, cfg, image, iv, cf_latent, index, out_dir
            )
            click.echo(f"{iv.id}: verdict={evaluation['verdict']} "
                       f"vlm_eff={evaluation['vlm_eff']:.3f}")
    except FileNotFoundError as err:
        raise click.ClickException(f"run `edit` first: missing {err.filename}")
    except CausalGenError as err:
        raise click.ClickException(f"{type(err).__name__}: {err}")


@main.command()
@common_options
@click.option("--image", "image_path", default=None, type=click.Path(exists=True),
              help="Run a single image instead of the configured datasets.")
def run(config_path, backend, fixtures_dir, seed, output_dir, image_path):
    """Full pipeline: extraction, manipulation, editing, evaluation, report."""
    cfg = build_config(config_path, backend, fixtures_dir, seed, output_dir)
    deps = PipelineDeps.from_config(cfg)

    if image_path:
        record = pipeline.run_single(
            image_path, pipeline.sidecar_caption(Path(image_path)), cfg, deps
        )
        records = [record]
        eval_records = pipeline.collect_eval_records(records)
        if eval_records:
            result = aggregate(eval_records)
            out_root = Path(cfg.output_dir)
            (out_root / "report.json").write_text(
                json.dumps(result_to_json_dict(result), indent=2, sort_keys=True) + "\n"
            )
            (out_root / "report.csv").write_text(result_to_csv(result))
    else:
        if not cfg.datasets:
            raise click.ClickException("no datasets configured; pass --image or a config")
        try:
            result, manifest = pipeline.run_dataset(cfg, deps)
        except CausalGenError as err:
            raise click.ClickException(f"{type(err).__name__}: {err}")
        records = [
            json.loads(
                (Path(cfg.output_dir) / r["image_id"] / "record.json").read_text()
            )
            for r in manifest["records"]
        ]

    succeeded = sum(1 for r in records if pipeline.fully_succeeded(r))
    click.echo(f"{succeeded}/{len(records)} image(s) fully succeeded")
    if succeeded == 0:
        sys.exit(1)


@main.command()
@click.option("--out", "output_dir", required=True, type=click.Path(exists=True, file_okay=False))
def report(output_dir):
    """Re-aggregate the report from persisted per-image records."""
    result = pipeline.reaggregate_output(output_dir)
    if result is None:
        raise click.ClickException("no successful evaluations found")
    eff, lpips = result.average
    click.echo(f"average vlm_eff={eff:.4f} lpips={'n/a' if lpips is None else f'{lpips:.4f}'}")


if __name__ == "__main__":
    main()
