"""Backbone registry: name -> callable producing spatial feature maps.

Convolutional backbones expose their final spatial map (the stage before
global pooling); transformer backbones expose the final encoder block's
patch tokens, class token excluded, reshaped onto the patch grid.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import torch
from torch import nn
from torchvision import models

logger = logging.getLogger(__name__)


class BackboneError(RuntimeError):
    """The requested backbone cannot be resolved or loaded."""


@dataclass
class Backbone:
    name: str
    channels: int
    feature_source: str  # "spatial_map" or "patch_tokens"
    module: nn.Module
    forward: Callable[[torch.Tensor], torch.Tensor]


def _strip_prefixes(state_dict: dict) -> dict:
    out = {}
    for key, value in state_dict.items():
        for prefix in ("module.", "backbone.", "encoder_q."):
            if key.startswith(prefix):
                key = key[len(prefix):]
        out[key] = value
    return out


def _load_checkpoint(module: nn.Module, path: Path, name: str) -> None:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise BackboneError(f"cannot read checkpoint {path}: {exc}") from exc
    if isinstance(payload, dict) and "state_dict" in payload:
        payload = payload["state_dict"]
    if not isinstance(payload, dict):
        raise BackboneError(f"{path}: checkpoint is not a state dict")
    missing, unexpected = module.load_state_dict(_strip_prefixes(payload), strict=False)
    loaded = len(payload) - len(unexpected)
    if loaded == 0:
        raise BackboneError(f"{path}: no tensor matched the {name} architecture")
    if missing:
        logger.warning("%s: %d parameters missing from checkpoint", name, len(missing))
    if unexpected:
        logger.info("%s: ignored %d unexpected checkpoint tensors", name, len(unexpected))


def _resnet(
    factory, channels: int, name: str, checkpoint: Path | None, untrained: bool
) -> Backbone:
    if checkpoint is not None or untrained:
        module = factory(weights=None)
    else:
        try:
            module = factory(weights="IMAGENET1K_V1")
        except Exception as exc:
            raise BackboneError(
                f"cannot fetch pretrained weights for {name} ({exc}); "
                f"pass --checkpoint or --untrained"
            ) from exc
    if checkpoint is not None:
        _load_checkpoint(module, checkpoint, name)
    trunk = nn.Sequential(*list(module.children())[:-2])  # drop avgpool + fc
    trunk.eval()

    def forward(x: torch.Tensor) -> torch.Tensor:
        return trunk(x)

    return Backbone(name, channels, "spatial_map", trunk, forward)


def _vit(
    name: str, image_size: int, checkpoint: Path | None, untrained: bool
) -> Backbone:
    factory = models.vit_b_16
    hidden = 768
    if checkpoint is not None or untrained:
        module = factory(weights=None, image_size=image_size)
    else:
        try:
            module = factory(weights="IMAGENET1K_V1")
        except Exception as exc:
            raise BackboneError(
                f"cannot fetch pretrained weights for {name} ({exc}); "
                f"pass --checkpoint or --untrained"
            ) from exc
        if image_size != module.image_size:
            raise BackboneError(
                f"{name} pretrained weights are for {module.image_size}px inputs; "
                f"use imagenet mode or provide a matching --checkpoint"
            )
    if checkpoint is not None:
        _load_checkpoint(module, checkpoint, name)
    module.eval()
    grid = image_size // module.patch_size

    def forward(x: torch.Tensor) -> torch.Tensor:
        tokens = module._process_input(x)  # (N, grid*grid, hidden)
        n = tokens.shape[0]
        cls = module.class_token.expand(n, -1, -1)
        tokens = module.encoder(torch.cat([cls, tokens], dim=1))
        patch_tokens = tokens[:, 1:]  # class token excluded
        side = int(math.isqrt(patch_tokens.shape[1]))
        assert side == grid
        return patch_tokens.permute(0, 2, 1).reshape(n, hidden, side, side)

    return Backbone(name, hidden, "patch_tokens", module, forward)


def resolve_backbone(
    name: str,
    image_size: int,
    checkpoint: Path | None = None,
    untrained: bool = False,
) -> Backbone:
    """Build the named backbone for inputs of *image_size* pixels.

    Raises:
        BackboneError: Unknown name, unreachable pretrained weights, or an
            unusable checkpoint.
    """
    if name == "resnet18":
        return _resnet(models.resnet18, 512, name, checkpoint, untrained)
    if name == "resnet50":
        return _resnet(models.resnet50, 2048, name, checkpoint, untrained)
    if name == "vit_b_16":
        return _vit(name, image_size, checkpoint, untrained)
    raise BackboneError(
        f"unknown backbone {name!r}; available: resnet18, resnet50, vit_b_16"
    )
