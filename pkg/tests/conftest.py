"""Shared fixtures: hand-checked toy data and small on-disk datasets."""

from __future__ import annotations

import math

import numpy as np
import pytest

from reprloc import (
    BBox,
    DatasetManifest,
    FeatureMap,
    ManifestEntry,
    load_manifest,
    save_manifest,
    write_feature_map,
)
from reprloc.featstore import MANIFEST_VERSION

# The two-patch dataset {(2,0), (0,1)} everything downstream is checked
# against: threshold sqrt(5)/sqrt(2), predictor (2 - t, 1 - t).
TOY_TAU = math.sqrt(5.0 / 2.0)
TOY_W = (2.0 - TOY_TAU, 1.0 - TOY_TAU)


def toy_feature_map(image_id: str = "toy") -> FeatureMap:
    # C=2, H=1, W=2; patch 0 = (2, 0), patch 1 = (0, 1)
    data = np.array([[[2.0, 0.0]], [[0.0, 1.0]]], dtype=np.float32)
    return FeatureMap(image_id, data)


def write_dataset(
    tmp_path,
    feature_arrays: dict[str, np.ndarray],
    *,
    splits: dict[str, str] | None = None,
    class_ids: dict[str, int] | None = None,
    gt_boxes: dict[str, list[BBox]] | None = None,
    image_size: tuple[int, int] = (32, 32),
) -> DatasetManifest:
    """Materialize arrays as a loadable dataset under *tmp_path*."""
    entries = []
    for image_id, data in feature_arrays.items():
        fm = FeatureMap(image_id, data)
        write_feature_map(fm, tmp_path / f"{image_id}.rpsf")
        entries.append(
            ManifestEntry(
                image_id=image_id,
                feature_path=f"{image_id}.rpsf",
                image_width=image_size[0],
                image_height=image_size[1],
                split=(splits or {}).get(image_id, "train"),
                class_id=(class_ids or {}).get(image_id),
                gt_boxes=(gt_boxes or {}).get(image_id),
            )
        )
    manifest = DatasetManifest(
        version=MANIFEST_VERSION, root=tmp_path, entries=entries
    )
    save_manifest(manifest, tmp_path / "manifest.json")
    return load_manifest(tmp_path / "manifest.json")


@pytest.fixture
def toy_manifest(tmp_path) -> DatasetManifest:
    """One train image holding the two toy patches."""
    return write_dataset(tmp_path, {"toy": toy_feature_map().data})


def random_feature_stack(
    rng: np.random.Generator,
    n_images: int,
    channels: int,
    height: int,
    width: int,
    zero_patch_prob: float = 0.0,
) -> list[np.ndarray]:
    maps = []
    for _ in range(n_images):
        data = rng.normal(0.0, 1.0, size=(channels, height, width)).astype(np.float32)
        if zero_patch_prob > 0.0:
            kill = rng.random((height, width)) < zero_patch_prob
            data[:, kill] = 0.0
        maps.append(data)
    return maps
