"""Batch export of backbone feature maps into tensor files.

The engine never calls into this package; the tensor files and the
manifest fragment written here are the entire interface between the two.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

from .backbones import build_backbone, extract_features
from .job import ExportJob
from .preprocess import crop_image, load_image, to_input_tensor
from .tensorfile import write_tensor

MANIFEST_NAME = "manifest.jsonl"
LOCKFILE_NAME = "preprocess.lock.json"


def _manifest_line(spec, scale_paths) -> str:
    entry = {"image_id": spec.image_id, "feature_paths": scale_paths}
    if spec.class_id is not None:
        entry["class_id"] = spec.class_id
    if spec.is_query:
        entry["is_query"] = True
        entry["relevant_ids"] = list(spec.relevant_ids)
    return json.dumps(entry, sort_keys=True)


def export(job: ExportJob) -> Path:
    """Run the job; returns the manifest fragment path.

    Writes one tensor file per (image, layer, size) under out_dir/tensors,
    a JSON-lines manifest fragment listing them, and a lockfile recording
    everything that determined the bytes: backbone, weights source, seed,
    and the preprocessing chain.
    """
    layers = job.resolved_layers()
    model = build_backbone(job.backbone, job.pretrained, job.seed)

    out_dir = Path(job.out_dir)
    tensor_dir = out_dir / "tensors"
    tensor_dir.mkdir(parents=True, exist_ok=True)

    lines = []
    for spec in job.images:
        img = load_image(spec.path)
        if spec.crop is not None:
            img = crop_image(img, spec.crop, spec.image_id)
        scale_paths = []
        for s, size in enumerate(job.sizes):
            batch = to_input_tensor(img, size, job.preprocess)
            features = extract_features(model, batch, layers)
            per_layer = {}
            for layer in layers:
                fmap = features[layer.layer_id][0].permute(1, 2, 0)
                expect = (math.ceil(size[1] / layer.stride),
                          math.ceil(size[0] / layer.stride))
                if tuple(fmap.shape[:2]) != expect:
                    raise AssertionError(
                        f"{job.backbone}/{layer.selector}: got "
                        f"{tuple(fmap.shape[:2])}, expected {expect}")
                name = f"{spec.image_id}_s{s}_l{layer.layer_id}.tnsr"
                write_tensor(fmap.numpy(), layer.layer_id, tensor_dir / name)
                per_layer[str(layer.layer_id)] = f"tensors/{name}"
            scale_paths.append(per_layer)
        lines.append(_manifest_line(spec, scale_paths))

    manifest_path = out_dir / MANIFEST_NAME
    manifest_path.write_text("\n".join(lines) + "\n")

    lock = {
        "backbone": job.backbone,
        "weights": "torchvision-default" if job.pretrained
                   else f"random-init(seed={job.seed})",
        "layers": [f"{r.selector} (stride {r.stride}, layer {r.layer_id})"
                   for r in layers],
        "sizes": [list(s) for s in job.sizes],
        "preprocess": job.preprocess.lock_dict(),
    }
    (out_dir / LOCKFILE_NAME).write_text(json.dumps(lock, indent=1) + "\n")
    return manifest_path
