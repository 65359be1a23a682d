"""Tensor wire format: base64 of little-endian float32, row-major, with shape.

This is the service's half of the protocol contract; clients implement the
mirror image. Round trips are lossless for float32 payloads.
"""

from __future__ import annotations

import base64

import numpy as np


class WireError(ValueError):
    """Malformed tensor payload."""


def array_to_wire(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return {
        "shape": list(arr.shape),
        "data_b64": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def wire_to_array(data: dict) -> np.ndarray:
    try:
        shape = tuple(int(d) for d in data["shape"])
        raw = base64.b64decode(data["data_b64"])
    except (KeyError, TypeError, ValueError) as err:
        raise WireError(f"bad tensor payload: {err}") from err
    arr = np.frombuffer(raw, dtype="<f4")
    expected = int(np.prod(shape)) if shape else 0
    if arr.size != expected:
        raise WireError(f"payload holds {arr.size} floats, shape {shape} needs {expected}")
    return arr.reshape(shape).astype(np.float64)
