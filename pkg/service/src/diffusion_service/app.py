"""HTTP surface of the inference service.

Endpoints (all tensors in the base64 float32 wire format):

  GET  /v1/health        -> {"status": "ok"} (503 while the engine loads)
  GET  /v1/capabilities  -> model id, latent shape, attention resolution,
                            schedule alphas, active perceptual metric
  POST /v1/predict_noise -> per prompt: eps and, for non-empty prompts,
                            per-token attention grids
  POST /v1/encode        -> image (PNG, base64) to latent
  POST /v1/decode        -> latent to image (PNG, base64)
  POST /v1/lpips         -> perceptual distance between two images

Responses are pure functions of the request body: the engine is
deterministic, and the per-session lock only serializes concurrent calls
sharing a session id.
"""

from __future__ import annotations

import base64
import binascii
import threading
from collections import defaultdict

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .engines import Engine, EngineError, build_engine
from .metrics import MetricError, load_metric
from .wire import WireError, array_to_wire, wire_to_array


class TensorPayload(BaseModel):
    shape: list[int]
    data_b64: str


class PredictNoiseRequest(BaseModel):
    session: str = "default"
    latent: TensorPayload
    timestep: int = Field(ge=0)
    prompts: list[str]


class EncodeRequest(BaseModel):
    image_png_b64: str


class DecodeRequest(BaseModel):
    latent: TensorPayload


class LpipsRequest(BaseModel):
    image_a_png_b64: str
    image_b_png_b64: str


def _b64_image(data: str, field_name: str) -> bytes:
    try:
        return base64.b64decode(data, validate=True)
    except (binascii.Error, ValueError) as err:
        raise HTTPException(400, f"{field_name} is not valid base64: {err}") from err


def create_app(
    engine: Engine | None = None,
    *,
    engine_name: str = "reference",
    engine_config: dict | None = None,
    prefer_lpips: bool = True,
    defer_load: bool = False,
) -> FastAPI:
    """Build the app. With defer_load the engine and metric load on server
    startup instead of here, and requests arriving before that see 503."""

    from contextlib import asynccontextmanager

    state: dict = {"engine": engine, "metric": None}
    session_locks: dict[str, threading.Lock] = defaultdict(threading.Lock)

    def load() -> None:
        if state["engine"] is None:
            state["engine"] = build_engine(engine_name, engine_config)
        if state["metric"] is None:
            state["metric"] = load_metric(prefer_lpips=prefer_lpips)

    if not defer_load:
        load()

    @asynccontextmanager
    async def lifespan(_app: FastAPI):
        load()
        yield

    app = FastAPI(title="diffusion-service", lifespan=lifespan)

    def engine_or_503() -> Engine:
        if state["engine"] is None:
            raise HTTPException(503, "model is still loading")
        return state["engine"]

    def metric_or_503():
        if state["metric"] is None:
            raise HTTPException(503, "metric is still loading")
        return state["metric"]

    @app.get("/v1/health")
    def health():
        engine_or_503()
        return {"status": "ok"}

    @app.get("/v1/capabilities")
    def capabilities():
        eng = engine_or_503()
        return {
            "model_id": eng.model_id,
            "latent_shape": list(eng.latent_shape),
            "attention_resolution": list(eng.attention_hw),
            "alphas": eng.alphas().tolist(),
            "lpips_metric": metric_or_503().name,
            "notes": (
                "attention grids average text-conditioning cross-attention layers "
                "and heads; token spans index the primary tokenizer's tokens"
            ),
        }

    @app.post("/v1/predict_noise")
    def predict_noise(req: PredictNoiseRequest):
        eng = engine_or_503()
        try:
            latent = wire_to_array(req.latent.model_dump())
        except WireError as err:
            raise HTTPException(400, str(err)) from err
        if tuple(latent.shape) != tuple(eng.latent_shape):
            raise HTTPException(
                400, f"latent shape {list(latent.shape)} != {list(eng.latent_shape)}"
            )
        outputs = []
        with session_locks[req.session]:
            for prompt in req.prompts:
                try:
                    eps, token_grids = eng.predict(latent, req.timestep, prompt)
                except EngineError as err:
                    raise HTTPException(400, str(err)) from err
                entry = {"eps": array_to_wire(eps), "attention": None}
                if token_grids is not None:
                    entry["attention"] = {
                        "resolution": list(eng.attention_hw),
                        "token_maps": [
                            {"span": list(tg.span), "grid": array_to_wire(tg.grid)}
                            for tg in token_grids
                        ],
                    }
                outputs.append(entry)
        return {"outputs": outputs}

    @app.post("/v1/encode")
    def encode(req: EncodeRequest):
        eng = engine_or_503()
        png = _b64_image(req.image_png_b64, "image_png_b64")
        try:
            latent = eng.encode(png)
        except EngineError as err:
            raise HTTPException(400, str(err)) from err
        return {"latent": array_to_wire(latent)}

    @app.post("/v1/decode")
    def decode(req: DecodeRequest):
        eng = engine_or_503()
        try:
            latent = wire_to_array(req.latent.model_dump())
            png = eng.decode(latent)
        except (WireError, EngineError) as err:
            raise HTTPException(400, str(err)) from err
        return {"image_png_b64": base64.b64encode(png).decode("ascii")}

    @app.post("/v1/lpips")
    def lpips_distance(req: LpipsRequest):
        metric = metric_or_503()
        image_a = _b64_image(req.image_a_png_b64, "image_a_png_b64")
        image_b = _b64_image(req.image_b_png_b64, "image_b_png_b64")
        try:
            value = metric.distance(image_a, image_b)
        except MetricError as err:
            raise HTTPException(400, str(err)) from err
        return {"lpips": value, "metric": metric.name}

    return app
