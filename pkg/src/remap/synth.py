"""Synthetic planted-signal datasets for end-to-end pipeline checks.

Each class gets a random activation template per layer, planted in the
central window of the map; everything else is background noise.  Two
scale variants render the same identity at different resolutions with
independent noise, and the two layers carry independent views of the
class, so multi-layer and multi-scale aggregation both have real signal
to recover.  Generation is byte-deterministic in the seed.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError
from .tensorio import feature_map, write_tensor


@dataclass(frozen=True)
class SynthConfig:
    classes: int = 5
    per_class: int = 20
    seed: int = 0
    layer_depths: tuple[int, ...] = (16, 12)
    # (width, height) per scale variant; 4:3 keeps region counts aligned
    scale_dims: tuple[tuple[int, int], ...] = ((16, 12), (20, 15))
    background_sigma: float = 0.35
    signal_amplitude: float = 1.0
    jitter_sigma: float = 0.45
    amplitude_range: tuple[float, float] = (0.7, 1.3)

    def __post_init__(self):
        if self.classes < 2:
            raise ContractError("need at least 2 classes")
        if self.per_class < 2:
            raise ContractError("need at least 2 images per class")
        if not self.layer_depths or not self.scale_dims:
            raise ContractError("need at least one layer and one scale")
        lo, hi = self.amplitude_range
        if not 0 < lo <= hi:
            raise ContractError(f"bad amplitude range [{lo}, {hi}]")


def _signal_window(width: int, height: int) -> tuple[slice, slice]:
    # central half of each axis
    return (slice(height // 4, height // 4 + height // 2),
            slice(width // 4, width // 4 + width // 2))


# templates are drawn once at this resolution and resampled into each
# scale's window, so every scale variant depicts the same identity
_REF_WINDOW = (6, 8)  # (height, width)


def _resample_nearest(ref: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    ys = (np.arange(out_h) * ref.shape[0]) // out_h
    xs = (np.arange(out_w) * ref.shape[1]) // out_w
    return ref[ys][:, xs]


def generate(cfg: SynthConfig, out_dir: str | Path) -> Path:
    """Write tensor files plus manifest.jsonl; returns the manifest path."""
    out_dir = Path(out_dir)
    tensor_dir = out_dir / "tensors"
    tensor_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)

    # reference patterns: [class][layer] -> (ref_h, ref_w, d), shared by
    # every scale so fusion across resolutions sees one identity twice
    ref_h, ref_w = _REF_WINDOW
    patterns = [[np.abs(rng.normal(0.0, 1.0, (ref_h, ref_w, depth)))
                 for depth in cfg.layer_depths]
                for _ in range(cfg.classes)]

    # rendered templates: [class][scale][layer] -> (h, w, d)
    templates = []
    for c in range(cfg.classes):
        per_scale = []
        for (w, h) in cfg.scale_dims:
            per_layer = []
            for li in range(len(cfg.layer_depths)):
                t = np.zeros((h, w, len(patterns[c][li][0, 0])))
                ys, xs = _signal_window(w, h)
                t[ys, xs, :] = _resample_nearest(patterns[c][li],
                                                 ys.stop - ys.start,
                                                 xs.stop - xs.start)
                per_layer.append(t * cfg.signal_amplitude)
            per_scale.append(per_layer)
        templates.append(per_scale)

    lines = []
    for c in range(cfg.classes):
        class_ids = [f"c{c:02d}_i{i:02d}" for i in range(cfg.per_class)]
        for i, image_id in enumerate(class_ids):
            amp = rng.uniform(*cfg.amplitude_range)
            scale_paths = []
            for s, (w, h) in enumerate(cfg.scale_dims):
                layer_paths = {}
                for li, depth in enumerate(cfg.layer_depths):
                    layer = li + 1
                    bg = rng.normal(0.0, cfg.background_sigma, (h, w, depth))
                    jitter = rng.normal(0.0, cfg.jitter_sigma, (h, w, depth))
                    data = np.maximum(
                        0.0, bg + amp * templates[c][s][li] + jitter)
                    name = f"{image_id}_s{s}_l{layer}.tnsr"
                    write_tensor(feature_map(data.astype(np.float32), layer),
                                 tensor_dir / name)
                    layer_paths[str(layer)] = f"tensors/{name}"
                scale_paths.append(layer_paths)
            relevant = [x for x in class_ids if x != image_id]
            lines.append(json.dumps({
                "image_id": image_id,
                "feature_paths": scale_paths,
                "class_id": c,
                "is_query": True,
                "relevant_ids": relevant,
            }, sort_keys=True, separators=(",", ":")))

    manifest_path = out_dir / "manifest.jsonl"
    manifest_path.write_text("\n".join(lines) + "\n")
    return manifest_path
