"""Image loading and the pinned preprocessing chain.

Every knob that affects pixel values lives in PreprocessConfig and is
written out next to the exported tensors, lockfile style, so a tensor
file can always be traced back to the exact preprocessing that made it.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ImageError

RESAMPLE = {"bilinear": Image.BILINEAR, "bicubic": Image.BICUBIC}


@dataclass(frozen=True)
class PreprocessConfig:
    # torchvision hub statistics; every supported backbone was trained
    # against these, so they are the default rather than a free knob
    mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: tuple[float, float, float] = (0.229, 0.224, 0.225)
    interpolation: str = "bilinear"

    def __post_init__(self):
        if self.interpolation not in RESAMPLE:
            raise ValueError(f"unknown interpolation {self.interpolation!r}")

    def lock_dict(self) -> dict:
        return {
            "pixel_scale": "1/255",
            "mean": list(self.mean),
            "std": list(self.std),
            "resize": f"pil-{self.interpolation}",
            "order": "crop, resize, scale, normalize",
            "dtype": "float32",
        }


def load_image(path: str | Path) -> Image.Image:
    try:
        with Image.open(path) as img:
            return img.convert("RGB")
    except (OSError, ValueError) as exc:
        raise ImageError(f"cannot read image {path}: {exc}") from exc


def crop_image(img: Image.Image, box: tuple[int, int, int, int],
               name: str) -> Image.Image:
    """Crop to (x0, y0, x1, y1), end-exclusive, in original pixel coords."""
    x0, y0, x1, y1 = box
    if not (0 <= x0 < x1 <= img.width and 0 <= y0 < y1 <= img.height):
        raise ImageError(
            f"crop {box} outside {img.width}x{img.height} image {name!r}")
    return img.crop(box)


def to_input_tensor(img: Image.Image, size: tuple[int, int],
                    cfg: PreprocessConfig) -> torch.Tensor:
    """Resize to (width, height) and normalize into a (1, 3, h, w) batch."""
    w, h = size
    resized = img.resize((w, h), RESAMPLE[cfg.interpolation])
    arr = np.asarray(resized, dtype=np.float32) / 255.0
    arr = (arr - np.array(cfg.mean, dtype=np.float32)) \
        / np.array(cfg.std, dtype=np.float32)
    return torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0)
