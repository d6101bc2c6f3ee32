"""Export job description and validation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .backbones import ResolvedLayer, resolve_selector
from .errors import JobError
from .preprocess import PreprocessConfig

DEFAULT_SIZES = ((1024, 768), (1280, 960))


@dataclass(frozen=True)
class ImageSpec:
    """One image to export, with optional crop and retrieval labels.

    crop is (x0, y0, x1, y1) in original pixel coordinates, end
    exclusive; labels are passed through into the manifest fragment
    untouched so a labeled export is directly usable as a dataset.
    """

    image_id: str
    path: str
    crop: tuple[int, int, int, int] | None = None
    class_id: int | None = None
    is_query: bool = False
    relevant_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.image_id:
            raise JobError("image with empty image_id")
        if self.crop is not None:
            if len(self.crop) != 4 or not all(
                    isinstance(v, int) for v in self.crop):
                raise JobError(
                    f"image {self.image_id!r}: crop must be 4 integers")
        if self.is_query and not self.relevant_ids:
            raise JobError(
                f"query image {self.image_id!r} has no relevant_ids")


@dataclass(frozen=True)
class ExportJob:
    images: tuple[ImageSpec, ...]
    out_dir: str
    backbone: str = "resnet50"
    pretrained: bool = False
    seed: int = 0
    layers: tuple[str, ...] = ("last",)
    sizes: tuple[tuple[int, int], ...] = DEFAULT_SIZES
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)

    def __post_init__(self):
        if not self.images:
            raise JobError("job has no images")
        seen = set()
        for spec in self.images:
            if spec.image_id in seen:
                raise JobError(f"duplicate image_id {spec.image_id!r}")
            seen.add(spec.image_id)
        if not self.layers:
            raise JobError("job selects no layers")
        if not self.sizes:
            raise JobError("job has no input sizes")
        for size in self.sizes:
            if len(size) != 2 or size[0] < 32 or size[1] < 32:
                raise JobError(f"bad input size {size}; need width and "
                               "height of at least 32 pixels")

    def resolved_layers(self) -> list[ResolvedLayer]:
        layers = [resolve_selector(name) for name in self.layers]
        if len({r.selector for r in layers}) != len(layers):
            raise JobError("duplicate layer selectors")
        return layers


def load_job(path: str | Path) -> ExportJob:
    """Parse a job JSON file into an ExportJob."""
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise JobError(f"cannot read job file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise JobError(f"{path}: invalid JSON ({exc.msg}, line {exc.lineno})")
    if not isinstance(data, dict):
        raise JobError(f"{path}: job must be a JSON object")

    known = {"images", "out_dir", "backbone", "pretrained", "seed",
             "layers", "sizes", "preprocess"}
    unknown = set(data) - known
    if unknown:
        raise JobError(f"{path}: unknown job keys {sorted(unknown)}")
    if "out_dir" not in data:
        raise JobError(f"{path}: job needs out_dir")

    images = []
    for i, raw in enumerate(data.get("images", [])):
        if not isinstance(raw, dict):
            raise JobError(f"{path}: images[{i}] is not an object")
        try:
            images.append(ImageSpec(
                image_id=raw.get("image_id", ""),
                path=raw.get("path", ""),
                crop=tuple(raw["crop"]) if raw.get("crop") else None,
                class_id=raw.get("class_id"),
                is_query=bool(raw.get("is_query", False)),
                relevant_ids=tuple(raw.get("relevant_ids") or ()),
            ))
        except TypeError as exc:
            raise JobError(f"{path}: images[{i}]: {exc}") from exc

    pp = data.get("preprocess", {})
    try:
        preprocess = PreprocessConfig(**{
            k: tuple(v) if isinstance(v, list) else v for k, v in pp.items()})
    except (TypeError, ValueError) as exc:
        raise JobError(f"{path}: bad preprocess section: {exc}") from exc

    return ExportJob(
        images=tuple(images),
        out_dir=data["out_dir"],
        backbone=data.get("backbone", "resnet50"),
        pretrained=bool(data.get("pretrained", False)),
        seed=int(data.get("seed", 0)),
        layers=tuple(data.get("layers") or ("last",)),
        sizes=tuple(tuple(s) for s in data.get("sizes") or DEFAULT_SIZES),
        preprocess=preprocess,
    )
