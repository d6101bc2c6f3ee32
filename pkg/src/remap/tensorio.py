"""Dense feature-map tensors on disk, plus the dataset manifest.

The tensor container is deliberately dumb: a magic string, five little
endian u32 header words (version, layer id, width, height, depth) and a
raw float32 payload stored row-major as (height, width, depth).  Any
producer that can emit these bytes can feed the engine; nothing else is
shared between the extractor side and this package.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, FormatError

MAGIC = b"RMAPTNSR"
VERSION = 1
_HEADER = struct.Struct("<5I")


@dataclass(frozen=True)
class FeatureMap:
    """One layer's activations for one image.

    data has shape (height, width, depth), float32, all finite.
    layer_id tags which backbone layer produced the map; the engine
    never interprets it beyond using it as a dictionary key.
    """

    width: int
    height: int
    depth: int
    data: np.ndarray
    layer_id: int

    def __post_init__(self):
        expected = (self.height, self.width, self.depth)
        if self.data.shape != expected:
            raise ContractError(
                f"feature map data shape {self.data.shape} does not match "
                f"declared dims {expected}"
            )
        if self.data.dtype != np.float32:
            object.__setattr__(self, "data", self.data.astype(np.float32))
        if not np.isfinite(self.data).all():
            raise ContractError("feature map contains non-finite values")
        if min(self.width, self.height, self.depth) < 1:
            raise ContractError("feature map dims must be positive")


def feature_map(data: np.ndarray, layer_id: int) -> FeatureMap:
    """Wrap a (height, width, depth) array without repeating the dims."""
    h, w, d = data.shape
    return FeatureMap(width=w, height=h, depth=d, data=np.asarray(data), layer_id=layer_id)


def write_tensor(fm: FeatureMap, path: str | Path) -> None:
    path = Path(path)
    payload = np.ascontiguousarray(fm.data, dtype="<f4")
    if not np.isfinite(payload).all():
        raise ContractError("refusing to write non-finite feature map")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(VERSION, fm.layer_id, fm.width, fm.height, fm.depth))
        fh.write(payload.tobytes())


def read_tensor(path: str | Path) -> FeatureMap:
    """Read one tensor file, verifying magic, version, and payload length."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read tensor file {path}: {exc}") from exc
    if len(raw) < len(MAGIC) + _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}")
    version, layer_id, width, height, depth = _HEADER.unpack_from(raw, len(MAGIC))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    body = raw[len(MAGIC) + _HEADER.size :]
    expected = width * height * depth * 4
    if len(body) != expected:
        raise FormatError(
            f"{path}: payload is {len(body)} bytes, header promises {expected}"
        )
    data = np.frombuffer(body, dtype="<f4").reshape(height, width, depth)
    if not np.isfinite(data).all():
        raise FormatError(f"{path}: payload contains non-finite values")
    return FeatureMap(width=width, height=height, depth=depth,
                      data=data.copy(), layer_id=layer_id)


@dataclass(frozen=True)
class ManifestEntry:
    """One image: its id, per-scale tensor paths, and ground truth.

    feature_paths is a list with one dict per scale variant; each dict
    maps layer_id to a tensor file path.  Single-scale datasets have a
    one-element list.  relevant_ids / junk_ids are only meaningful on
    query entries.
    """

    image_id: str
    feature_paths: list[dict[int, Path]]
    class_id: int | None = None
    is_query: bool = False
    relevant_ids: tuple[str, ...] = ()
    junk_ids: tuple[str, ...] = ()

    def paths_for_scale(self, scale: int) -> dict[int, Path]:
        if scale >= len(self.feature_paths):
            raise ContractError(
                f"image {self.image_id} has {len(self.feature_paths)} scale "
                f"variant(s), scale index {scale} requested"
            )
        return self.feature_paths[scale]


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self.by_id = {e.image_id: e for e in self.entries}

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def queries(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.is_query]


_ENTRY_KEYS = {"image_id", "feature_paths", "class_id", "is_query",
               "relevant_ids", "junk_ids"}


def _parse_paths(raw, root: Path, where: str, problems: list[str]):
    # Accept either one layer->path map (single scale) or a list of them.
    if isinstance(raw, dict):
        raw = [raw]
    if not isinstance(raw, list) or not raw:
        problems.append(f"{where}: feature_paths must be a map or list of maps")
        return []
    scales = []
    for variant in raw:
        if not isinstance(variant, dict) or not variant:
            problems.append(f"{where}: each scale variant must be a non-empty map")
            continue
        per_layer = {}
        for key, rel in variant.items():
            try:
                layer = int(key)
            except (TypeError, ValueError):
                problems.append(f"{where}: layer id {key!r} is not an integer")
                continue
            per_layer[layer] = root / str(rel)
        scales.append(per_layer)
    return scales


def load_manifest(path: str | Path, check_paths: bool = True) -> DatasetManifest:
    """Parse a JSON-lines manifest, collecting every problem before failing.

    Paths are resolved relative to the manifest's directory.
    """
    path = Path(path)
    root = path.parent
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc

    problems: list[str] = []
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        where = f"{path.name}:{lineno}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            problems.append(f"{where}: invalid JSON ({exc.msg})")
            continue
        unknown = set(obj) - _ENTRY_KEYS
        if unknown:
            problems.append(f"{where}: unknown keys {sorted(unknown)}")
        image_id = obj.get("image_id")
        if not isinstance(image_id, str) or not image_id:
            problems.append(f"{where}: missing or empty image_id")
            continue
        if image_id in seen:
            problems.append(f"{where}: duplicate image_id {image_id!r}")
            continue
        seen.add(image_id)
        scales = _parse_paths(obj.get("feature_paths"), root, where, problems)
        is_query = bool(obj.get("is_query", False))
        relevant = tuple(obj.get("relevant_ids") or ())
        junk = tuple(obj.get("junk_ids") or ())
        if is_query and not relevant:
            problems.append(f"{where}: query {image_id!r} has no relevant_ids")
        entries.append(ManifestEntry(
            image_id=image_id,
            feature_paths=scales,
            class_id=obj.get("class_id"),
            is_query=is_query,
            relevant_ids=relevant,
            junk_ids=junk,
        ))

    if check_paths:
        for entry in entries:
            for variant in entry.feature_paths:
                for layer, p in variant.items():
                    if not p.is_file():
                        problems.append(
                            f"{entry.image_id}: layer {layer} path {p} not found"
                        )
    if problems:
        raise DataError("manifest validation failed:\n  " + "\n  ".join(problems))
    if not entries:
        raise DataError(f"manifest {path} is empty")
    return DatasetManifest(entries=entries, root=root)


class TensorCache:
    """Tiny path-keyed cache so desk-scale runs read each file once."""

    def __init__(self):
        self._maps: dict[Path, FeatureMap] = {}

    def get(self, path: Path) -> FeatureMap:
        path = Path(path)
        if path not in self._maps:
            self._maps[path] = read_tensor(path)
        return self._maps[path]

    def load_layers(self, entry: ManifestEntry, layer_ids, scale: int = 0):
        paths = entry.paths_for_scale(scale)
        out = {}
        for layer in layer_ids:
            if layer not in paths:
                raise DataError(
                    f"image {entry.image_id} has no layer {layer} at scale {scale}"
                )
            out[layer] = self.get(paths[layer])
        return out
