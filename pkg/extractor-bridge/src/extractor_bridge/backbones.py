"""Backbone construction and intermediate feature capture.

Only the torchvision residual family is supported: those models share
the conv1/bn1/relu/maxpool then layer1..layer4 topology, which is what
the selector walk below assumes.  Layer numbering in the exported files
counts backwards from the output: the last convolutional block is
layer 1, the one before it layer 2, and so on.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torchvision

from .errors import JobError

BACKBONES = frozenset({
    "resnet18", "resnet34", "resnet50", "resnet101", "resnet152",
    "resnext50_32x4d", "resnext101_32x8d", "resnext101_64x4d",
    "wide_resnet50_2", "wide_resnet101_2",
})

# selector -> (module to cut at, total stride at that point, layer_id tag)
SELECTORS = {
    "last": ("layer4", 32, 1),
    "second_last": ("layer3", 16, 2),
    "third_last": ("layer2", 8, 3),
}


@dataclass(frozen=True)
class ResolvedLayer:
    selector: str
    module: str
    stride: int
    layer_id: int


def resolve_selector(name: str) -> ResolvedLayer:
    key = name.strip().lower().replace("-", "_")
    if key not in SELECTORS:
        raise JobError(f"unresolvable layer selector {name!r}; "
                       f"expected one of {sorted(SELECTORS)}")
    module, stride, layer_id = SELECTORS[key]
    return ResolvedLayer(key, module, stride, layer_id)


def build_backbone(name: str, pretrained: bool, seed: int) -> torch.nn.Module:
    """Instantiate the backbone in eval mode.

    Without pretrained weights the init is random, so the seed is what
    makes repeated exports comparable; with hub weights it is inert.
    """
    if name not in BACKBONES:
        raise JobError(f"unknown backbone {name!r}; "
                       f"expected one of {sorted(BACKBONES)}")
    torch.manual_seed(seed)
    model = torchvision.models.get_model(
        name, weights="DEFAULT" if pretrained else None)
    model.eval()
    return model


def extract_features(model: torch.nn.Module, batch: torch.Tensor,
                     layers: list[ResolvedLayer]) -> dict[int, torch.Tensor]:
    """One forward pass, capturing every requested block on the way."""
    wanted = {layer.module: layer.layer_id for layer in layers}
    out: dict[int, torch.Tensor] = {}
    with torch.no_grad():
        x = model.maxpool(model.relu(model.bn1(model.conv1(batch))))
        for stage in ("layer1", "layer2", "layer3", "layer4"):
            x = getattr(model, stage)(x)
            if stage in wanted:
                out[wanted[stage]] = x
            if len(out) == len(wanted):
                break
    return out
