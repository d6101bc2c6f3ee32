"""Descriptor aggregation: weighted region streams, projection, baselines.

A model holds per-(layer, region) weights alpha, a projection matrix
initialised by PCA whitening, and a bias.  The forward path is

    pool regions -> L2 rows -> alpha-weighted sum -> L2 per stream
    -> concat streams -> projection + bias -> final L2

Zero vectors stay zero under L2 normalization throughout, so an
all-zero layer contributes nothing instead of NaNs.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, FormatError, NumericError
from .grid import RegionSet, build_grid, pool_regions
from .tensorio import FeatureMap

MODEL_MAGIC = b"RMAPMODL"
MODEL_VERSION = 1

METHODS = ("MAC", "SPoC", "RMAC", "REMAP")


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """v / ||v||, with the zero vector mapped to itself."""
    n = float(np.linalg.norm(v))
    if n == 0.0:
        return v.copy()
    return v / n


def l2_normalize_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    return m / safe


def normalized_region_rows(fm: FeatureMap, grid: RegionSet) -> np.ndarray:
    """Pooled region vectors, each row L2-normalized (zero rows kept)."""
    return l2_normalize_rows(pool_regions(fm, grid))


@dataclass
class AggregationModel:
    """Everything needed to turn feature maps into one descriptor."""

    layer_ids: list[int]
    grid_scales: int
    method: str
    alpha: dict[int, np.ndarray]
    projection: np.ndarray
    bias: np.ndarray
    layer_depths: dict[int, int]

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"unknown method {self.method!r}")
        for layer, a in self.alpha.items():
            self.alpha[layer] = np.asarray(a, dtype=np.float64)
        self.projection = np.asarray(self.projection, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.projection.ndim != 2:
            raise ContractError("projection must be a matrix")
        if self.bias.shape != (self.projection.shape[0],):
            raise ContractError("bias length must match projection rows")

    @property
    def d_out(self) -> int:
        return self.projection.shape[0]

    @property
    def d_cat(self) -> int:
        return self.projection.shape[1]


def stream_forward(fm: FeatureMap, grid: RegionSet, alpha: np.ndarray) -> np.ndarray:
    """One layer's stream: alpha-weighted sum of L2-normalized region vectors."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (len(grid.regions),):
        raise ContractError(
            f"alpha has {alpha.shape[0] if alpha.ndim == 1 else alpha.shape} "
            f"entries, grid has {len(grid.regions)} regions"
        )
    rows = normalized_region_rows(fm, grid)
    return alpha @ rows


def _concat_streams(streams: list[np.ndarray]) -> np.ndarray:
    # each stream L2-normalized before concatenation
    return np.concatenate([l2_normalize(s) for s in streams])


def preprojection_vector(maps: dict[int, FeatureMap], model: AggregationModel) -> np.ndarray:
    """Concatenated normalized streams, before projection and final L2."""
    streams = []
    for layer in model.layer_ids:
        if layer not in maps:
            raise DataError(f"no feature map for layer {layer}")
        fm = maps[layer]
        g = build_grid(fm.width, fm.height, model.grid_scales)
        a = model.alpha.get(layer)
        if a is None:
            raise ContractError(f"model has no alpha for layer {layer}")
        streams.append(stream_forward(fm, g, a))
    return _concat_streams(streams)


def remap_forward(maps: dict[int, FeatureMap], model: AggregationModel) -> np.ndarray:
    """Full multi-layer forward pass; returns the unit descriptor."""
    p = preprojection_vector(maps, model)
    if p.shape[0] != model.d_cat:
        raise ContractError(
            f"concatenated streams have dim {p.shape[0]}, projection expects "
            f"{model.d_cat}"
        )
    z = model.projection @ p + model.bias
    if not np.isfinite(z).all():
        raise NumericError("non-finite values in projected descriptor")
    return l2_normalize(z)


def baseline_forward(fm: FeatureMap, method: str,
                     projection: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """MAC, SPoC, or single-layer RMAC descriptor with the same projection step.

    RMAC is literally the weighted-stream forward with one uniform-weight
    stream, so it stays bit-identical to remap_forward in that setting.
    """
    projection = np.asarray(projection, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if method == "MAC":
        v = fm.data.astype(np.float64).max(axis=(0, 1))
    elif method == "SPoC":
        v = fm.data.astype(np.float64).sum(axis=(0, 1))
    elif method == "RMAC":
        model = AggregationModel(
            layer_ids=[fm.layer_id], grid_scales=1, method="RMAC",
            alpha={fm.layer_id: np.ones(len(build_grid(fm.width, fm.height, 1).regions))},
            projection=projection, bias=bias,
            layer_depths={fm.layer_id: fm.depth},
        )
        return remap_forward({fm.layer_id: fm}, model)
    else:
        raise ContractError(f"baseline_forward does not handle {method!r}")
    z = projection @ v + bias
    return l2_normalize(z)


def fit_whitening(vectors: np.ndarray, d_out: int,
                  eigen_floor: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """PCA whitening of the training vectors.

    Returns (projection, bias) with projection rows the top d_out
    eigenvectors of the sample covariance scaled by 1/sqrt(eig + floor),
    and bias chosen so projected training vectors are centered.  The
    floor defaults to 1e-6 * trace / dim, which keeps near-null
    directions from exploding while leaving healthy spectra untouched.
    """
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2:
        raise ContractError("whitening expects a 2-d sample matrix")
    n, d = X.shape
    if d_out < 1 or d_out > d:
        raise ContractError(f"d_out must be in [1, {d}], got {d_out}")
    if n < 2:
        raise DataError("whitening needs at least 2 training vectors")
    mu = X.mean(axis=0)
    Xc = X - mu
    cov = (Xc.T @ Xc) / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    tol = max(eigvals[0], 0.0) * 1e-10
    effective_rank = int(np.sum(eigvals > tol))
    if effective_rank < d_out:
        raise DataError(
            f"training data has effective rank {effective_rank}, cannot whiten "
            f"to {d_out} dims"
        )
    if eigen_floor is None:
        eigen_floor = 1e-6 * float(np.trace(cov)) / d
    scale = 1.0 / np.sqrt(eigvals[:d_out] + eigen_floor)
    projection = eigvecs[:, :d_out].T * scale[:, None]
    bias = -projection @ mu
    return projection, bias


def multiscale_fuse(x1: np.ndarray, x2: np.ndarray,
                    normalize: bool = True) -> np.ndarray:
    """Fixed-weight fusion of two scale descriptors: 2*x1 + 1.4*x2.

    normalize=False returns the raw weighted sum for inspection; the
    retrieval path always renormalizes.
    """
    if x1.shape != x2.shape:
        raise ContractError(f"fusion dims differ: {x1.shape} vs {x2.shape}")
    fused = 2.0 * np.asarray(x1, dtype=np.float64) + 1.4 * np.asarray(x2, dtype=np.float64)
    return l2_normalize(fused) if normalize else fused


def save_model(model: AggregationModel, path: str | Path) -> None:
    """One file: JSON header plus float32 blocks for alpha, projection, bias."""
    header = {
        "layer_ids": model.layer_ids,
        "grid_scales": model.grid_scales,
        "method": model.method,
        "d_out": model.d_out,
        "d_cat": model.d_cat,
        "layer_depths": {str(k): int(v) for k, v in model.layer_depths.items()},
        "alpha_counts": {str(k): int(len(model.alpha[k])) for k in model.layer_ids},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<2I", MODEL_VERSION, len(blob)))
        fh.write(blob)
        for layer in model.layer_ids:
            fh.write(np.ascontiguousarray(model.alpha[layer], dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(model.projection, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(model.bias, dtype="<f4").tobytes())


def load_model(path: str | Path) -> AggregationModel:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != MODEL_MAGIC:
        raise FormatError(f"{path}: bad model magic")
    version, hlen = struct.unpack_from("<2I", raw, 8)
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported model version {version}")
    header = json.loads(raw[16:16 + hlen].decode())
    off = 16 + hlen
    layer_ids = [int(x) for x in header["layer_ids"]]
    alpha = {}
    for layer in layer_ids:
        count = int(header["alpha_counts"][str(layer)])
        alpha[layer] = np.frombuffer(raw, dtype="<f4", count=count, offset=off).astype(np.float64)
        off += 4 * count
    d_out, d_cat = int(header["d_out"]), int(header["d_cat"])
    projection = np.frombuffer(raw, dtype="<f4", count=d_out * d_cat,
                               offset=off).astype(np.float64).reshape(d_out, d_cat)
    off += 4 * d_out * d_cat
    bias = np.frombuffer(raw, dtype="<f4", count=d_out, offset=off).astype(np.float64)
    off += 4 * d_out
    if off != len(raw):
        raise FormatError(f"{path}: trailing bytes after model payload")
    return AggregationModel(
        layer_ids=layer_ids,
        grid_scales=int(header["grid_scales"]),
        method=header["method"],
        alpha=alpha,
        projection=projection,
        bias=bias,
        layer_depths={int(k): int(v) for k, v in header["layer_depths"].items()},
    )
