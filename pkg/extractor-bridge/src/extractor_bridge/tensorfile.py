"""Writer for the engine's binary tensor format.

The engine side owns the reader; this module only has to produce bytes
that match the published layout exactly: magic "RMAPTNSR", five u32
header words (version, layer_id, width, height, depth), then the float32
payload in row-major (height, width, depth) order, all little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ImageError

MAGIC = b"RMAPTNSR"
VERSION = 1
_HEADER = struct.Struct("<5I")


def write_tensor(data: np.ndarray, layer_id: int, path: str | Path) -> None:
    """Write one (height, width, depth) float array as a tensor file."""
    if data.ndim != 3:
        raise ValueError(f"expected a (h, w, d) array, got shape {data.shape}")
    payload = np.ascontiguousarray(data, dtype="<f4")
    if not np.isfinite(payload).all():
        raise ImageError(f"non-finite activations, refusing to write {path}")
    h, w, d = payload.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(VERSION, layer_id, w, h, d))
        fh.write(payload.tobytes())
