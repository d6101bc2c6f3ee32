"""The written bytes must match the published layout exactly."""

import struct

import numpy as np
import pytest

from extractor_bridge.errors import ImageError
from extractor_bridge.tensorfile import write_tensor


def test_header_and_payload_layout(tmp_path):
    rng = np.random.default_rng(1)
    data = rng.normal(size=(3, 5, 4)).astype(np.float32)
    path = tmp_path / "t.tnsr"
    write_tensor(data, layer_id=2, path=path)

    raw = path.read_bytes()
    assert raw[:8] == b"RMAPTNSR"
    version, layer_id, width, height, depth = struct.unpack("<5I", raw[8:28])
    assert (version, layer_id) == (1, 2)
    assert (width, height, depth) == (5, 3, 4)
    # payload is the row-major float32 image of the array, nothing more
    assert raw[28:] == data.astype("<f4").tobytes()
    assert len(raw) == 28 + 3 * 5 * 4 * 4


def test_float64_input_is_converted(tmp_path):
    data = np.arange(24, dtype=np.float64).reshape(2, 3, 4)
    path = tmp_path / "t.tnsr"
    write_tensor(data, layer_id=1, path=path)
    raw = path.read_bytes()
    assert raw[28:] == data.astype("<f4").tobytes()


def test_non_finite_rejected(tmp_path):
    data = np.zeros((2, 2, 2), dtype=np.float32)
    data[1, 0, 1] = np.nan
    with pytest.raises(ImageError):
        write_tensor(data, layer_id=1, path=tmp_path / "bad.tnsr")


def test_wrong_rank_rejected(tmp_path):
    with pytest.raises(ValueError):
        write_tensor(np.zeros((4, 4)), layer_id=1, path=tmp_path / "bad.tnsr")
