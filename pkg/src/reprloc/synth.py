"""Synthetic feature datasets with a planted foreground box per image.

Each image gets a patch-aligned foreground box.  Patches inside the box
draw feature norms around one mean with directions clustered around a
foreground prototype; patches outside use a second mean and a background
prototype.  Both the norm gap and the direction clusters matter: norms
drive patch importance, directions drive similarity, and the end-to-end
pipeline needs both to be separable.

Generation is a pure function of the spec (including the seed): feature
files, masks, and the manifest are byte-identical across runs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .featstore import (
    BBox,
    DataError,
    DatasetManifest,
    FeatureMap,
    MANIFEST_VERSION,
    ManifestEntry,
    load_manifest,
    save_manifest,
    write_feature_map,
    write_pgm,
)


class SynthSpecError(DataError):
    """A synthetic dataset spec is unusable."""


@dataclass
class SynthSpec:
    """Parameters of one synthetic dataset."""

    image_count: int = 50
    test_count: int = 10
    image_width: int = 32
    image_height: int = 32
    grid_width: int = 16
    grid_height: int = 16
    channels: int = 16
    fixed_box: tuple[int, int, int, int] | None = None  # pixel coords; None = random
    fg_norm_mean: float = 2.0
    bg_norm_mean: float = 0.5
    norm_std_frac: float = 0.05
    fg_concentration: float = 8.0
    bg_concentration: float = 8.0
    num_classes: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.image_count < 1 or self.test_count < 0:
            raise SynthSpecError("image_count must be >= 1 and test_count >= 0")
        if min(self.image_width, self.image_height) < 2:
            raise SynthSpecError("image size must be at least 2x2")
        if min(self.grid_width, self.grid_height) < 2:
            raise SynthSpecError("feature grid must be at least 2x2")
        if self.grid_width > self.image_width or self.grid_height > self.image_height:
            raise SynthSpecError("feature grid cannot be finer than the image")
        if self.channels < 2:
            raise SynthSpecError("channels must be >= 2")
        if self.fg_norm_mean <= 0 or self.bg_norm_mean <= 0:
            raise SynthSpecError("norm means must be positive")
        if self.num_classes < 1:
            raise SynthSpecError("num_classes must be >= 1")
        if self.fixed_box is not None:
            x0, y0, x1, y1 = self.fixed_box
            if not (0 <= x0 < x1 <= self.image_width and 0 <= y0 < y1 <= self.image_height):
                raise SynthSpecError(
                    f"fixed_box {self.fixed_box} outside the {self.image_width}"
                    f"x{self.image_height} image"
                )

    @classmethod
    def from_json(cls, path: str | Path) -> "SynthSpec":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SynthSpecError(f"{path}: not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise SynthSpecError(f"{path}: spec must be a JSON object")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise SynthSpecError(f"{path}: unknown spec fields {sorted(unknown)}")
        if doc.get("fixed_box") is not None:
            doc["fixed_box"] = tuple(doc["fixed_box"])
        try:
            return cls(**doc)
        except TypeError as exc:
            raise SynthSpecError(f"{path}: {exc}") from exc

    def to_json_dict(self) -> dict:
        doc = asdict(self)
        if doc["fixed_box"] is not None:
            doc["fixed_box"] = list(doc["fixed_box"])
        return doc


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def patch_centers_inside(
    box: BBox, spec: SynthSpec
) -> np.ndarray:
    """Boolean (grid_height, grid_width) mask of patches whose center is in *box*."""
    cx = (np.arange(spec.grid_width) + 0.5) * (spec.image_width / spec.grid_width)
    cy = (np.arange(spec.grid_height) + 0.5) * (spec.image_height / spec.grid_height)
    in_x = (cx >= box.x0) & (cx < box.x1)
    in_y = (cy >= box.y0) & (cy < box.y1)
    return in_y[:, None] & in_x[None, :]


def _random_box(rng: np.random.Generator, spec: SynthSpec) -> BBox:
    # Patch-aligned boxes covering at most half the grid per axis, so both
    # foreground and background patches always exist.
    px = spec.image_width / spec.grid_width
    py = spec.image_height / spec.grid_height
    max_w = max(1, spec.grid_width // 2)
    max_h = max(1, spec.grid_height // 2)
    bw = int(rng.integers(max(1, max_w // 2), max_w + 1))
    bh = int(rng.integers(max(1, max_h // 2), max_h + 1))
    c0 = int(rng.integers(0, spec.grid_width - bw + 1))
    r0 = int(rng.integers(0, spec.grid_height - bh + 1))
    return BBox(
        x0=int(round(c0 * px)),
        y0=int(round(r0 * py)),
        x1=int(round((c0 + bw) * px)),
        y1=int(round((r0 + bh) * py)),
    )


def generate_synthetic(spec: SynthSpec, out_dir: str | Path) -> DatasetManifest:
    """Materialize the dataset described by *spec* under *out_dir*.

    Writes one feature file and one mask per image plus ``manifest.json``;
    returns the loaded manifest.

    Raises:
        SynthSpecError: The fixed box contains no patch center after
            mapping to the feature grid.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    # One foreground prototype per class, one shared background prototype,
    # backgrounds orthogonalized against the first foreground so direction
    # clusters do not collapse onto each other.
    fg_protos = [
        _unit(rng.standard_normal(spec.channels)) for _ in range(spec.num_classes)
    ]
    bg_raw = rng.standard_normal(spec.channels)
    bg_raw -= (bg_raw @ fg_protos[0]) * fg_protos[0]
    bg_proto = _unit(bg_raw)

    entries: list[ManifestEntry] = []
    counters = {"train": spec.image_count, "test": spec.test_count}
    index = 0
    for split, count in counters.items():
        for _ in range(count):
            image_id = f"{split}_{index:04d}"
            index += 1
            class_id = index % spec.num_classes

            box = BBox(*spec.fixed_box) if spec.fixed_box else _random_box(rng, spec)
            fg_mask = patch_centers_inside(box, spec)
            if not fg_mask.any():
                raise SynthSpecError(
                    f"box {box.as_tuple()} contains no patch center on the "
                    f"{spec.grid_height}x{spec.grid_width} grid"
                )

            fg_flat = fg_mask.reshape(-1)
            protos = np.where(fg_flat, 1.0, 0.0)[None, :] * fg_protos[class_id][:, None]
            protos += np.where(fg_flat, 0.0, 1.0)[None, :] * bg_proto[:, None]
            conc = np.where(fg_flat, spec.fg_concentration, spec.bg_concentration)
            means = np.where(fg_flat, spec.fg_norm_mean, spec.bg_norm_mean)

            directions = conc[None, :] * protos + rng.standard_normal(protos.shape)
            directions /= np.linalg.norm(directions, axis=0, keepdims=True)
            norms = np.abs(rng.normal(means, spec.norm_std_frac * means))
            norms = np.maximum(norms, 1e-3)
            data = (directions * norms[None, :]).astype(np.float32)
            data = data.reshape(spec.channels, spec.grid_height, spec.grid_width)

            feature_name = f"{image_id}.rpsf"
            mask_name = f"{image_id}.mask.pgm"
            write_feature_map(FeatureMap(image_id, data), out_dir / feature_name)
            mask = np.zeros((spec.image_height, spec.image_width), dtype=np.uint8)
            mask[box.y0 : box.y1, box.x0 : box.x1] = 255
            write_pgm(out_dir / mask_name, mask)

            entries.append(
                ManifestEntry(
                    image_id=image_id,
                    feature_path=feature_name,
                    image_width=spec.image_width,
                    image_height=spec.image_height,
                    split=split,
                    class_id=class_id,
                    gt_boxes=[box],
                    gt_mask_path=mask_name,
                )
            )

    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        root=out_dir.resolve(),
        entries=entries,
        metadata={"generator": "planted-box-synthetic", "spec": spec.to_json_dict()},
    )
    save_manifest(manifest, out_dir / "manifest.json", root=".")
    return load_manifest(out_dir / "manifest.json")
