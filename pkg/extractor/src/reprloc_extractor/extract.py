"""Image directory -> feature files plus manifest, in the reprloc formats.

Preprocessing is square resize followed by center crop: finegrained mode
resizes to 480 then crops 448, imagenet mode resizes to 256 then crops 224.
The manifest records each image's original pixel geometry so downstream
boxes live in the source image's coordinate space.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from reprloc.featstore import (
    DataError,
    DatasetManifest,
    FeatureMap,
    MANIFEST_VERSION,
    ManifestEntry,
    load_manifest,
    save_manifest,
    write_feature_map,
)

from .backbones import Backbone, resolve_backbone

logger = logging.getLogger(__name__)

MODES = {"finegrained": (480, 448), "imagenet": (256, 224)}
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".webp")

_CHANNEL_MEAN = torch.tensor([0.485, 0.456, 0.406]).view(3, 1, 1)
_CHANNEL_STD = torch.tensor([0.229, 0.224, 0.225]).view(3, 1, 1)


class ExtractError(DataError):
    """The extraction request cannot produce a dataset."""


@dataclass
class ExtractSpec:
    image_dir: Path
    backbone: str
    mode: str
    out_dir: Path
    split: str = "train"
    checkpoint: Path | None = None
    untrained: bool = False
    batch_size: int = 4

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ExtractError(
                f"mode must be one of {sorted(MODES)}, got {self.mode!r}"
            )
        if self.split not in ("train", "test"):
            raise ExtractError(f"split must be train or test, got {self.split!r}")
        if self.batch_size < 1:
            raise ExtractError("batch_size must be >= 1")


def _preprocess(image: Image.Image, resize: int, crop: int) -> torch.Tensor:
    image = image.convert("RGB").resize((resize, resize), Image.BILINEAR)
    offset = (resize - crop) // 2
    image = image.crop((offset, offset, offset + crop, offset + crop))
    array = np.asarray(image, dtype=np.float32) / 255.0
    tensor = torch.from_numpy(array).permute(2, 0, 1)
    return (tensor - _CHANNEL_MEAN) / _CHANNEL_STD


def _list_images(image_dir: Path) -> list[Path]:
    if not image_dir.is_dir():
        raise ExtractError(f"{image_dir} is not a directory")
    return sorted(
        p for p in image_dir.iterdir()
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    )


def extract(spec: ExtractSpec) -> DatasetManifest:
    """Run the backbone over every readable image and emit a dataset.

    Unreadable images are skipped with a log line; an empty or fully
    unreadable directory aborts without writing a manifest.  Backbone
    resolution failures abort immediately.
    """
    paths = _list_images(spec.image_dir)
    if not paths:
        raise ExtractError(f"no images found in {spec.image_dir}")

    resize, crop = MODES[spec.mode]
    backbone: Backbone = resolve_backbone(
        spec.backbone, crop, checkpoint=spec.checkpoint, untrained=spec.untrained
    )
    spec.out_dir.mkdir(parents=True, exist_ok=True)

    loaded: list[tuple[str, tuple[int, int], torch.Tensor, str]] = []
    seen_ids: set[str] = set()
    for path in paths:
        try:
            with Image.open(path) as image:
                original = image.size  # (width, height)
                tensor = _preprocess(image, resize, crop)
        except Exception as exc:
            logger.warning("skipping unreadable image %s: %s", path, exc)
            continue
        image_id = path.stem
        if image_id in seen_ids:
            raise ExtractError(f"duplicate image id {image_id!r} (from {path})")
        seen_ids.add(image_id)
        loaded.append((image_id, original, tensor, path.name))
    if not loaded:
        raise ExtractError(f"no readable images in {spec.image_dir}")

    entries: list[ManifestEntry] = []
    image_paths: dict[str, str] = {}
    with torch.no_grad():
        for start in range(0, len(loaded), spec.batch_size):
            batch = loaded[start : start + spec.batch_size]
            stacked = torch.stack([item[2] for item in batch])
            features = backbone.forward(stacked).to(torch.float32).numpy()
            for (image_id, (width, height), _, name), fmap in zip(batch, features):
                write_feature_map(
                    FeatureMap(image_id, fmap), spec.out_dir / f"{image_id}.rpsf"
                )
                entries.append(
                    ManifestEntry(
                        image_id=image_id,
                        feature_path=f"{image_id}.rpsf",
                        image_width=width,
                        image_height=height,
                        split=spec.split,
                    )
                )
                image_paths[image_id] = name

    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        root=spec.out_dir.resolve(),
        entries=entries,
        metadata={
            "extractor": {
                "backbone": spec.backbone,
                "mode": spec.mode,
                "resize": resize,
                "crop": crop,
                "feature_source": backbone.feature_source,
                "channels": backbone.channels,
                "untrained": spec.untrained,
                "checkpoint": str(spec.checkpoint) if spec.checkpoint else None,
            },
            "image_paths": image_paths,
        },
    )
    save_manifest(manifest, spec.out_dir / "manifest.json", root=".")
    logger.info("extracted %d images to %s", len(entries), spec.out_dir)
    return load_manifest(spec.out_dir / "manifest.json")
