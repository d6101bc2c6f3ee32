"""Pipeline plumbing shared by the CLI: model construction, batch
descriptor extraction, and the descriptor file format.
"""
from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .aggregate import (AggregationModel, baseline_forward, fit_whitening,
                        multiscale_fuse, preprojection_vector, remap_forward)
from .entropy import EntropyWeights
from .errors import ContractError, DataError, FormatError
from .grid import build_grid
from .tensorio import DatasetManifest, ManifestEntry, TensorCache

DESC_MAGIC = b"RMAPDESC"
DESC_VERSION = 1


def ordered_map(fn, items, workers: int = 1) -> list:
    """map() that may fan out to threads but always returns input order."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _layer_dims(manifest: DatasetManifest, layer_ids, cache: TensorCache):
    first = manifest.entries[0]
    maps = cache.load_layers(first, layer_ids)
    return {layer: maps[layer].depth for layer in layer_ids}


def init_model(manifest: DatasetManifest, layer_ids, grid_scales: int,
               method: str, alpha_init: str = "ones",
               entropy_weights: EntropyWeights | None = None,
               cache: TensorCache | None = None) -> AggregationModel:
    """Model with initial alpha and a placeholder identity-ish projection.

    The projection is fit separately (fit_projection) because it needs a
    pass over the corpus; until then the model carries an identity map
    so forward passes already work end to end.
    """
    cache = cache or TensorCache()
    if method in ("MAC", "SPoC", "RMAC"):
        layer_ids = [layer_ids[0]]
        grid_scales = 1
    depths = _layer_dims(manifest, layer_ids, cache)
    first = manifest.entries[0]
    maps = cache.load_layers(first, layer_ids)
    alpha = {}
    for layer in layer_ids:
        fm = maps[layer]
        count = len(build_grid(fm.width, fm.height, grid_scales).regions)
        if alpha_init == "ones" or method in ("MAC", "SPoC", "RMAC"):
            alpha[layer] = np.ones(count)
        elif alpha_init == "entropy":
            if entropy_weights is None:
                raise ContractError("alpha_init=entropy requires entropy weights")
            alpha[layer] = entropy_weights.alpha_for_layer(layer, count)
        else:
            raise ContractError(f"unknown alpha_init {alpha_init!r}")
    if method in ("MAC", "SPoC"):
        d_cat = depths[layer_ids[0]]
    else:
        d_cat = sum(depths[l] for l in layer_ids)
    return AggregationModel(
        layer_ids=list(layer_ids), grid_scales=grid_scales, method=method,
        alpha=alpha, projection=np.eye(d_cat), bias=np.zeros(d_cat),
        layer_depths=depths,
    )


def _raw_vector(entry: ManifestEntry, model: AggregationModel,
                cache: TensorCache, scale: int) -> np.ndarray:
    """Pre-projection vector for whitening: aggregate without projecting."""
    maps = cache.load_layers(entry, model.layer_ids, scale=scale)
    if model.method == "MAC":
        return maps[model.layer_ids[0]].data.astype(np.float64).max(axis=(0, 1))
    if model.method == "SPoC":
        return maps[model.layer_ids[0]].data.astype(np.float64).sum(axis=(0, 1))
    return preprojection_vector(maps, model)


def fit_projection(model: AggregationModel, manifest: DatasetManifest,
                   d_out: int, cache: TensorCache | None = None,
                   eigen_floor: float | None = None, workers: int = 1) -> AggregationModel:
    """PCA-whitening projection fit on the whole manifest, in place."""
    cache = cache or TensorCache()
    vecs = ordered_map(lambda e: _raw_vector(e, model, cache, 0),
                       manifest.entries, workers)
    projection, bias = fit_whitening(np.stack(vecs), d_out, eigen_floor)
    model.projection = projection
    model.bias = bias
    return model


def descriptor_for_entry(entry: ManifestEntry, model: AggregationModel,
                         cache: TensorCache, multiscale: bool = False) -> np.ndarray:
    def one_scale(scale: int) -> np.ndarray:
        maps = cache.load_layers(entry, model.layer_ids, scale=scale)
        if model.method in ("MAC", "SPoC"):
            return baseline_forward(maps[model.layer_ids[0]], model.method,
                                    model.projection, model.bias)
        return remap_forward(maps, model)

    if not multiscale:
        return one_scale(0)
    if len(entry.feature_paths) < 2:
        raise DataError(
            f"image {entry.image_id} has no second scale variant for fusion")
    return multiscale_fuse(one_scale(0), one_scale(1))


def descriptor_matrix(manifest: DatasetManifest, model: AggregationModel,
                      cache: TensorCache | None = None, multiscale: bool = False,
                      workers: int = 1) -> tuple[list[str], np.ndarray]:
    cache = cache or TensorCache()
    ids = [e.image_id for e in manifest]
    vecs = ordered_map(
        lambda e: descriptor_for_entry(e, model, cache, multiscale),
        manifest.entries, workers)
    return ids, np.stack(vecs)


def write_descriptors(ids: list[str], matrix: np.ndarray, path: str | Path) -> None:
    """Descriptor set file: header, then (id length, id, f32 vector) records."""
    X = np.ascontiguousarray(matrix, dtype="<f4")
    if X.ndim != 2 or X.shape[0] != len(ids):
        raise ContractError("descriptor matrix must be 2-d with one row per id")
    with open(path, "wb") as fh:
        fh.write(DESC_MAGIC)
        fh.write(struct.pack("<3I", DESC_VERSION, X.shape[1], X.shape[0]))
        for image_id, row in zip(ids, X):
            ident = image_id.encode()
            fh.write(struct.pack("<I", len(ident)))
            fh.write(ident)
            fh.write(row.tobytes())


def read_descriptors(path: str | Path) -> tuple[list[str], np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != DESC_MAGIC:
        raise FormatError(f"{path}: bad descriptor magic")
    version, dim, count = struct.unpack_from("<3I", raw, 8)
    if version != DESC_VERSION:
        raise FormatError(f"{path}: unsupported descriptor version {version}")
    off = 8 + 12
    ids = []
    rows = np.empty((count, dim), dtype=np.float64)
    for i in range(count):
        if off + 4 > len(raw):
            raise FormatError(f"{path}: truncated at record {i}")
        (id_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        if off + id_len + 4 * dim > len(raw):
            raise FormatError(f"{path}: truncated at record {i}")
        ids.append(raw[off:off + id_len].decode())
        off += id_len
        rows[i] = np.frombuffer(raw, dtype="<f4", count=dim, offset=off)
        off += 4 * dim
    if off != len(raw):
        raise FormatError(f"{path}: trailing bytes")
    return ids, rows
