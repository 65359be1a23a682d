"""Perceptual distance between two images.

Prefers the learned VGG metric when its package and weights are available;
otherwise a deterministic multi-scale pixel proxy keeps the endpoint alive.
The active backend's name travels in every response and in /v1/capabilities
so clients never mistake proxy values for the learned metric.
"""

from __future__ import annotations

import io
import logging

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

VGG_LPIPS = "vgg_lpips"
FALLBACK = "multiscale_mse_proxy"


class MetricError(ValueError):
    """Invalid metric input (dimension mismatch, undecodable image)."""


def _load_images(image_a_png: bytes, image_b_png: bytes) -> tuple[np.ndarray, np.ndarray]:
    try:
        with Image.open(io.BytesIO(image_a_png)) as img_a:
            a = np.asarray(img_a.convert("RGB"), dtype=np.float64) / 255.0
        with Image.open(io.BytesIO(image_b_png)) as img_b:
            b = np.asarray(img_b.convert("RGB"), dtype=np.float64) / 255.0
    except MetricError:
        raise
    except Exception as err:
        raise MetricError(f"undecodable image payload: {err}") from err
    if a.shape != b.shape:
        raise MetricError(f"image dimensions differ: {a.shape} vs {b.shape}")
    return a, b


def _pool2(frame: np.ndarray) -> np.ndarray:
    h, w, c = frame.shape
    h2, w2 = h // 2 * 2, w // 2 * 2
    frame = frame[:h2, :w2]
    return frame.reshape(h2 // 2, 2, w2 // 2, 2, c).mean(axis=(1, 3))


class MultiscaleMseMetric:
    """Symmetric pixel proxy: mean squared difference averaged over 3 scales."""

    name = FALLBACK

    def distance(self, image_a_png: bytes, image_b_png: bytes) -> float:
        a, b = _load_images(image_a_png, image_b_png)
        total = 0.0
        for _ in range(3):
            total += float(np.mean((a - b) ** 2))
            if min(a.shape[0], a.shape[1]) < 2:
                break
            a, b = _pool2(a), _pool2(b)
        return total / 3.0


class VggLpipsMetric:
    """Learned perceptual metric with a VGG backbone."""

    name = VGG_LPIPS

    def __init__(self):
        import lpips  # noqa: F401 - optional extra
        import torch

        self._torch = torch
        self._net = lpips.LPIPS(net="vgg")
        self._net.eval()

    def distance(self, image_a_png: bytes, image_b_png: bytes) -> float:
        torch = self._torch
        a, b = _load_images(image_a_png, image_b_png)

        def to_tensor(frame: np.ndarray):
            return torch.from_numpy(
                (frame * 2.0 - 1.0).transpose(2, 0, 1).astype(np.float32)
            )[None]

        with torch.no_grad():
            value = self._net(to_tensor(a), to_tensor(b))
        return float(value.item())


def load_metric(prefer_lpips: bool = True):
    """Best available metric: learned when loadable, proxy otherwise."""
    if prefer_lpips:
        try:
            metric = VggLpipsMetric()
            logger.info("perceptual metric: %s", metric.name)
            return metric
        except Exception as err:
            logger.warning("VGG metric unavailable (%s); using %s", err, FALLBACK)
    return MultiscaleMseMetric()
