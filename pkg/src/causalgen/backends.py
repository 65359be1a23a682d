"""Denoiser backends: the contract, an analytic toy world, and a remote client.

A backend is a pure noise-estimate oracle: predict(latent, t, prompt) returns
an epsilon tensor plus, for non-empty prompts, cross-attention grids. The toy
backend models per-prompt Gaussian image distributions whose mean shifts
inside a prompt-specific rectangle, which makes the optimal noise estimate
available in closed form and pins every concept to a literal pixel region.
The remote backend speaks JSON-over-HTTP with float32 tensors as base64,
little-endian, row-major.
"""

from __future__ import annotations

import base64
import io
import uuid
from dataclasses import dataclass, field
from typing import Protocol

import httpx
import numpy as np
from PIL import Image

from .errors import BackendError, ShapeMismatch
from .schedule import NoiseSchedule, make_schedule
from .tensors import AttentionMap, TokenAttention, ensure_latent


@dataclass(frozen=True)
class BackendCapabilities:
    model_id: str
    latent_shape: tuple[int, int, int]
    attention_hw: tuple[int, int]
    schedule: NoiseSchedule


@dataclass(frozen=True)
class PredictOutput:
    eps: np.ndarray
    attention: AttentionMap | None = None


class DenoiserBackend(Protocol):
    def capabilities(self) -> BackendCapabilities: ...

    def predict(self, latent: np.ndarray, t: int, prompt: str = "") -> PredictOutput: ...

    def batch_predict(
        self, latent: np.ndarray, t: int, prompts: list[str]
    ) -> list[PredictOutput]: ...


# --- analytic toy backend ----------------------------------------------------


@dataclass(frozen=True)
class ToyConcept:
    """A prompt's effect in the toy world: a mean shift inside a rectangle."""

    shift: float
    region: tuple[int, int, int, int]  # (row0, col0, row1, col1), half-open


@dataclass(frozen=True)
class ToyWorld:
    shape: tuple[int, int, int] = (1, 16, 16)
    base_mean: float = 0.0
    sigma2: float = 1.0
    vocabulary: dict[str, ToyConcept] = field(default_factory=dict)
    attention_hw: tuple[int, int] | None = None  # defaults to the latent plane

    def __post_init__(self):
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        _, h, w = self.shape
        for prompt, concept in self.vocabulary.items():
            r0, c0, r1, c1 = concept.region
            if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
                raise ValueError(f"region for prompt {prompt!r} out of bounds: {concept.region}")

    @classmethod
    def from_json_dict(cls, data: dict) -> "ToyWorld":
        vocab = {
            prompt: ToyConcept(shift=float(entry["shift"]), region=tuple(entry["region"]))
            for prompt, entry in data.get("vocabulary", {}).items()
        }
        return cls(
            shape=tuple(data.get("shape", (1, 16, 16))),
            base_mean=float(data.get("base_mean", 0.0)),
            sigma2=float(data.get("sigma2", 1.0)),
            vocabulary=vocab,
        )


class ToyBackend:
    """Closed-form denoiser for Gaussian data, used as the verification oracle.

    Data conditioned on prompt Y is N(mu_Y, sigma2 * I) where mu_Y equals the
    base mean everywhere except inside Y's region. The optimal noise estimate
    under the forward process x_t = a*x0 + s*eps is then

        eps(x, t, Y) = s * (x - a * mu_Y) / (a^2 * sigma2 + s^2)

    which is what a perfectly trained epsilon-predictor would return.
    """

    def __init__(self, world: ToyWorld | None = None, schedule: NoiseSchedule | None = None):
        self.world = world or ToyWorld()
        self.schedule = schedule or make_schedule(1000, "linear")
        self._caps = BackendCapabilities(
            model_id="toy-analytic",
            latent_shape=self.world.shape,
            attention_hw=self.world.attention_hw or self.world.shape[1:],
            schedule=self.schedule,
        )

    def capabilities(self) -> BackendCapabilities:
        return self._caps

    def _mean_for(self, prompt: str) -> np.ndarray:
        mu = np.full(self.world.shape, self.world.base_mean, dtype=np.float64)
        concept = self.world.vocabulary.get(prompt)
        if concept is not None:
            r0, c0, r1, c1 = concept.region
            mu[:, r0:r1, c0:c1] += concept.shift
        return mu

    def _attention_for(self, prompt: str) -> AttentionMap:
        ah, aw = self._caps.attention_hw
        _, h, w = self.world.shape
        concept = self.world.vocabulary.get(prompt)
        if concept is None:
            grid = np.ones((ah, aw), dtype=np.float64)
        else:
            r0, c0, r1, c1 = concept.region
            grid = np.zeros((ah, aw), dtype=np.float64)
            # region is given in latent coordinates; rescale if attention
            # resolution differs
            rr0, rr1 = (r0 * ah) // h, max((r1 * ah + h - 1) // h, (r0 * ah) // h + 1)
            cc0, cc1 = (c0 * aw) // w, max((c1 * aw + w - 1) // w, (c0 * aw) // w + 1)
            grid[rr0:rr1, cc0:cc1] = 1.0
        tokens = prompt.split()
        return AttentionMap(
            token_maps=tuple(
                TokenAttention(span=(i, i + 1), grid=grid) for i in range(max(1, len(tokens)))
            )
        )

    def predict(self, latent: np.ndarray, t: int, prompt: str = "") -> PredictOutput:
        x = ensure_latent(latent, self.world.shape)
        if not 0 <= t <= self.schedule.steps:
            raise BackendError(f"timestep {t} outside schedule [0, {self.schedule.steps}]")
        a, s = self.schedule.signal_noise(t)
        marginal_var = a * a * self.world.sigma2 + s * s
        eps = s * (x - a * self._mean_for(prompt)) / marginal_var
        attention = self._attention_for(prompt) if prompt else None
        return PredictOutput(eps=eps, attention=attention)

    def batch_predict(self, latent: np.ndarray, t: int, prompts: list[str]) -> list[PredictOutput]:
        return [self.predict(latent, t, p) for p in prompts]

    # Latent <-> image plumbing so the toy world can stand in for a real
    # autoencoder in offline runs: grayscale, resized, scaled to [-1, 1].

    def encode_image(self, png_bytes: bytes) -> np.ndarray:
        c, h, w = self.world.shape
        with Image.open(io.BytesIO(png_bytes)) as img:
            gray = img.convert("L").resize((w, h), Image.BILINEAR)
        plane = np.asarray(gray, dtype=np.float64) / 127.5 - 1.0
        return np.repeat(plane[None, :, :], c, axis=0)

    def decode_latent(self, latent: np.ndarray, size: tuple[int, int] | None = None) -> bytes:
        arr = ensure_latent(latent, self.world.shape)
        plane = np.clip(arr.mean(axis=0), -1.0, 1.0)
        pixels = ((plane + 1.0) * 127.5).round().astype(np.uint8)
        img = Image.fromarray(pixels, mode="L")
        if size is not None:
            img = img.resize(size, Image.BILINEAR)
        buf = io.BytesIO()
        img.save(buf, format="PNG")
        return buf.getvalue()


# --- wire codec ---------------------------------------------------------------


def array_to_wire(arr: np.ndarray) -> dict:
    """Tensor -> {"shape": [...], "data_b64": ...}; float32, little-endian, row-major."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return {
        "shape": list(arr.shape),
        "data_b64": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def wire_to_array(data: dict) -> np.ndarray:
    shape = tuple(int(d) for d in data["shape"])
    raw = base64.b64decode(data["data_b64"])
    arr = np.frombuffer(raw, dtype="<f4")
    if arr.size != int(np.prod(shape)):
        raise BackendError(f"wire payload has {arr.size} values, shape {shape} needs more")
    return arr.reshape(shape).astype(np.float64)


def attention_from_wire(data: dict) -> AttentionMap:
    return AttentionMap(
        token_maps=tuple(
            TokenAttention(span=tuple(tm["span"]), grid=wire_to_array(tm["grid"]))
            for tm in data["token_maps"]
        )
    )


def attention_to_wire(attn: AttentionMap) -> dict:
    return {
        "resolution": list(attn.resolution),
        "token_maps": [
            {"span": list(tm.span), "grid": array_to_wire(tm.grid)} for tm in attn.token_maps
        ],
    }


# --- remote backend -------------------------------------------------------------


class RemoteBackend:
    """Client for a diffusion inference service speaking the wire protocol.

    The service exposes per-step noise prediction with attention capture plus
    VAE encode/decode; every tensor crosses the wire as base64 float32. One
    backend instance holds one session id; per-session calls are expected to
    be sequential (the edit loop is), while separate instances may run
    concurrently.
    """

    def __init__(self, base_url: str, *, client: httpx.Client | None = None,
                 timeout_s: float = 300.0):
        self.base_url = base_url.rstrip("/")
        self.session_id = uuid.uuid4().hex
        self._http = client or httpx.Client(timeout=timeout_s)
        self._caps: BackendCapabilities | None = None

    def close(self) -> None:
        self._http.close()

    def _post(self, path: str, payload: dict) -> dict:
        try:
            resp = self._http.post(f"{self.base_url}{path}", json=payload)
        except httpx.HTTPError as err:
            raise BackendError(f"POST {path} failed: {err}") from err
        if resp.status_code != 200:
            raise BackendError(f"POST {path} -> HTTP {resp.status_code}: {resp.text[:200]}")
        return resp.json()

    def health(self) -> bool:
        try:
            resp = self._http.get(f"{self.base_url}/v1/health")
        except httpx.HTTPError:
            return False
        return resp.status_code == 200

    def capabilities(self) -> BackendCapabilities:
        if self._caps is None:
            try:
                resp = self._http.get(f"{self.base_url}/v1/capabilities")
            except httpx.HTTPError as err:
                raise BackendError(f"GET /v1/capabilities failed: {err}") from err
            if resp.status_code != 200:
                raise BackendError(f"GET /v1/capabilities -> HTTP {resp.status_code}")
            data = resp.json()
            alphas = np.asarray(data["alphas"], dtype=np.float64)
            self._caps = BackendCapabilities(
                model_id=str(data["model_id"]),
                latent_shape=tuple(data["latent_shape"]),
                attention_hw=tuple(data["attention_resolution"]),
                schedule=make_schedule(alphas.size, "backend_provided", alphas=alphas),
            )
        return self._caps

    def predict(self, latent: np.ndarray, t: int, prompt: str = "") -> PredictOutput:
        return self.batch_predict(latent, t, [prompt])[0]

    def batch_predict(self, latent: np.ndarray, t: int, prompts: list[str]) -> list[PredictOutput]:
        if not prompts:
            return []
        caps = self.capabilities()
        x = ensure_latent(latent, caps.latent_shape)
        data = self._post(
            "/v1/predict_noise",
            {
                "session": self.session_id,
                "latent": array_to_wire(x),
                "timestep": int(t),
                "prompts": list(prompts),
            },
        )
        outputs = []
        for prompt, out in zip(prompts, data["outputs"]):
            eps = wire_to_array(out["eps"])
            if eps.shape != x.shape:
                raise ShapeMismatch(f"service eps shape {eps.shape} != latent {x.shape}")
            attention = None
            if prompt and out.get("attention"):
                attention = attention_from_wire(out["attention"])
            outputs.append(PredictOutput(eps=eps, attention=attention))
        return outputs

    def encode_image(self, png_bytes: bytes) -> np.ndarray:
        data = self._post(
            "/v1/encode", {"image_png_b64": base64.b64encode(png_bytes).decode("ascii")}
        )
        return wire_to_array(data["latent"])

    def decode_latent(self, latent: np.ndarray, size: tuple[int, int] | None = None) -> bytes:
        data = self._post("/v1/decode", {"latent": array_to_wire(latent)})
        return base64.b64decode(data["image_png_b64"])
