"""Model engines behind the service endpoints.

An engine supplies noise prediction with per-token attention grids, latent
encode/decode, and its schedule. The reference engine is a closed-form
Gaussian model: cheap, deterministic, and exact, which makes it the right
target for protocol and client tests. The production engine wrapping a
pretrained latent text-to-image model lives in sdxl_engine and loads only
when its extra dependencies and weights are present.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from PIL import Image


class EngineError(ValueError):
    """Invalid engine input (bad shape, bad timestep, undecodable image)."""


@dataclass(frozen=True)
class TokenGrid:
    span: tuple[int, int]
    grid: np.ndarray  # (h, w) non-negative


class Engine(Protocol):
    model_id: str
    latent_shape: tuple[int, int, int]
    attention_hw: tuple[int, int]

    def alphas(self) -> np.ndarray: ...

    def predict(
        self, latent: np.ndarray, timestep: int, prompt: str
    ) -> tuple[np.ndarray, list[TokenGrid] | None]: ...

    def encode(self, png_bytes: bytes) -> np.ndarray: ...

    def decode(self, latent: np.ndarray) -> bytes: ...


@dataclass(frozen=True)
class RegionConcept:
    """A prompt's footprint in the reference world: mean shift inside a box."""

    shift: float
    region: tuple[int, int, int, int]  # (row0, col0, row1, col1) in latent cells


@dataclass
class ReferenceEngine:
    """Analytic Gaussian engine implementing the full contract.

    Images are encoded by average-pooling an RGB frame into the latent plane;
    decoding upsamples back. The data distribution conditioned on a prompt is
    Gaussian with the prompt's region mean-shifted, so the optimal noise
    estimate is available in closed form and every response is a pure
    function of the request.
    """

    model_id: str = "reference-gaussian"
    image_size: int = 256
    pool: int = 4
    sigma2: float = 1.0
    base_mean: float = 0.0
    train_steps: int = 1000
    attention_hw: tuple[int, int] = (16, 16)
    vocabulary: dict[str, RegionConcept] = field(default_factory=dict)

    def __post_init__(self):
        side = self.image_size // self.pool
        self.latent_shape = (3, side, side)
        betas = np.linspace(0.00085**0.5, 0.012**0.5, self.train_steps) ** 2
        self._alphas = 1.0 - betas
        self._alpha_bars = np.cumprod(self._alphas)

    def alphas(self) -> np.ndarray:
        return self._alphas.copy()

    def _signal_noise(self, t: int) -> tuple[float, float]:
        if not 0 <= t <= self.train_steps:
            raise EngineError(f"timestep {t} outside [0, {self.train_steps}]")
        bar = 1.0 if t == 0 else float(self._alpha_bars[t - 1])
        return float(np.sqrt(bar)), float(np.sqrt(1.0 - bar))

    def _mean_for(self, prompt: str) -> np.ndarray:
        mu = np.full(self.latent_shape, self.base_mean, dtype=np.float64)
        concept = self.vocabulary.get(prompt)
        if concept is not None:
            r0, c0, r1, c1 = concept.region
            mu[:, r0:r1, c0:c1] += concept.shift
        return mu

    def predict(self, latent, timestep, prompt):
        latent = np.asarray(latent, dtype=np.float64)
        if latent.shape != self.latent_shape:
            raise EngineError(
                f"latent shape {latent.shape} != engine shape {self.latent_shape}"
            )
        a, s = self._signal_noise(timestep)
        var = a * a * self.sigma2 + s * s
        eps = s * (latent - a * self._mean_for(prompt)) / var
        if not prompt:
            return eps, None
        return eps, self._attention_for(prompt)

    def _attention_for(self, prompt: str) -> list[TokenGrid]:
        ah, aw = self.attention_hw
        _, h, w = self.latent_shape
        concept = self.vocabulary.get(prompt)
        if concept is None:
            grid = np.ones((ah, aw), dtype=np.float64)
        else:
            r0, c0, r1, c1 = concept.region
            grid = np.zeros((ah, aw), dtype=np.float64)
            rr0, rr1 = (r0 * ah) // h, max((r1 * ah + h - 1) // h, (r0 * ah) // h + 1)
            cc0, cc1 = (c0 * aw) // w, max((c1 * aw + w - 1) // w, (c0 * aw) // w + 1)
            grid[rr0:rr1, cc0:cc1] = 1.0
        tokens = max(1, len(prompt.split()))
        return [TokenGrid(span=(i, i + 1), grid=grid) for i in range(tokens)]

    def encode(self, png_bytes: bytes) -> np.ndarray:
        try:
            with Image.open(io.BytesIO(png_bytes)) as img:
                rgb = img.convert("RGB").resize(
                    (self.image_size, self.image_size), Image.BILINEAR
                )
        except Exception as err:
            raise EngineError(f"undecodable image payload: {err}") from err
        frame = np.asarray(rgb, dtype=np.float64) / 127.5 - 1.0  # (H, W, 3)
        frame = frame.transpose(2, 0, 1)
        c, side, _ = self.latent_shape
        pooled = frame.reshape(c, side, self.pool, side, self.pool).mean(axis=(2, 4))
        return pooled

    def decode(self, latent: np.ndarray) -> bytes:
        latent = np.asarray(latent, dtype=np.float64)
        if latent.shape != self.latent_shape:
            raise EngineError(
                f"latent shape {latent.shape} != engine shape {self.latent_shape}"
            )
        up = np.clip(latent, -1.0, 1.0).repeat(self.pool, axis=1).repeat(self.pool, axis=2)
        pixels = ((up.transpose(1, 2, 0) + 1.0) * 127.5).round().astype(np.uint8)
        img = Image.fromarray(pixels, mode="RGB").resize(
            (self.image_size, self.image_size), Image.BILINEAR
        )
        buf = io.BytesIO()
        img.save(buf, format="PNG")
        return buf.getvalue()


def build_engine(name: str, config: dict | None = None) -> Engine:
    """Engine factory: 'reference' is always available; 'sdxl' needs its extra."""
    config = config or {}
    if name == "reference":
        vocab = {
            prompt: RegionConcept(shift=float(e["shift"]), region=tuple(e["region"]))
            for prompt, e in config.get("vocabulary", {}).items()
        }
        kwargs = {
            k: config[k]
            for k in ("image_size", "pool", "sigma2", "base_mean", "train_steps")
            if k in config
        }
        return ReferenceEngine(vocabulary=vocab, **kwargs)
    if name == "sdxl":
        from .sdxl_engine import SdxlEngine

        return SdxlEngine(**config)
    raise ValueError(f"unknown engine {name!r}; expected 'reference' or 'sdxl'")
