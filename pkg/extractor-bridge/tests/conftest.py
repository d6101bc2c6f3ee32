import numpy as np
import pytest
from PIL import Image


@pytest.fixture
def make_png(tmp_path):
    """Write a deterministic random RGB PNG; returns its path."""
    def _make(name: str, width: int, height: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        arr = rng.integers(0, 256, (height, width, 3)).astype(np.uint8)
        path = tmp_path / name
        Image.fromarray(arr).save(path)
        return path
    return _make
