from __future__ import annotations

import base64
import io

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image, ImageDraw

from diffusion_service.app import create_app
from diffusion_service.engines import ReferenceEngine, RegionConcept


@pytest.fixture(scope="session")
def engine() -> ReferenceEngine:
    return ReferenceEngine(
        image_size=128,
        pool=4,
        vocabulary={"red patch": RegionConcept(shift=1.5, region=(8, 8, 24, 24))},
    )


@pytest.fixture(scope="session")
def client(engine) -> TestClient:
    return TestClient(create_app(engine, prefer_lpips=False))


def pinned_image(size: int = 128) -> bytes:
    """Deterministic smooth test asset: gradient background plus one shape."""
    gradient = np.linspace(40, 215, size, dtype=np.uint8)
    frame = np.stack(
        [
            np.tile(gradient, (size, 1)),
            np.tile(gradient[::-1], (size, 1)).T,
            np.full((size, size), 128, dtype=np.uint8),
        ],
        axis=2,
    )
    img = Image.fromarray(frame, mode="RGB")
    draw = ImageDraw.Draw(img)
    draw.ellipse((size // 4, size // 4, size // 2, size // 2), fill=(200, 80, 60))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")
