"""From a fitted predictor and a test feature map to boxes in pixel space.

The pipeline is: score every patch (predictor dotted with the patch's unit
feature), min-max normalize the patch grid to [0, 1], bilinearly upsample
to the original image resolution, threshold into a binary mask, and take
tight boxes around connected components.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .featstore import BBox, FeatureMap
from .core import ForegroundPredictor


@dataclass(eq=False)
class ActivationMap:
    """Raw and [0, 1]-normalized per-patch foreground scores for one image."""

    image_id: str
    raw: np.ndarray  # (H, W) float64
    normalized: np.ndarray  # (H, W) float64 in [0, 1]; all zeros when degenerate
    degenerate: bool  # raw map is constant, normalization undefined


@dataclass(eq=False)
class LocalizationResult:
    image_id: str
    threshold: float
    mask: np.ndarray  # (image_height, image_width) bool
    boxes: list[BBox]
    chosen_box: BBox | None
    degenerate: bool


def minmax_normalize(grid: np.ndarray) -> tuple[np.ndarray, bool]:
    """Affinely map *grid* onto [0, 1]; constant grids are degenerate.

    Returns (normalized, degenerate).  A degenerate (constant) grid maps to
    all zeros with the flag set, since no order information survives.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if not np.isfinite(grid).all():
        raise ValueError("grid contains NaN or Inf")
    lo = grid.min()
    hi = grid.max()
    if hi == lo:
        return np.zeros_like(grid), True
    return (grid - lo) / (hi - lo), False


def activation_map(fm: FeatureMap, predictor: ForegroundPredictor) -> ActivationMap:
    """Score each patch of *fm* against *predictor*.

    The raw score of a patch is the predictor dotted with the patch's
    unit-normalized feature; zero-norm patches score 0.
    """
    if fm.channels != predictor.dim:
        raise ValueError(
            f"feature map has {fm.channels} channels, predictor has {predictor.dim}"
        )
    flat = fm.data.reshape(fm.channels, -1).astype(np.float64)
    norms = np.linalg.norm(flat, axis=0)
    raw = np.zeros(flat.shape[1], dtype=np.float64)
    nonzero = norms > 0.0
    if nonzero.any():
        raw[nonzero] = (predictor.weights @ flat[:, nonzero]) / norms[nonzero]
    raw = raw.reshape(fm.height, fm.width)
    normalized, degenerate = minmax_normalize(raw)
    return ActivationMap(
        image_id=fm.image_id, raw=raw, normalized=normalized, degenerate=degenerate
    )


def upsample_bilinear(grid: np.ndarray, out_width: int, out_height: int) -> np.ndarray:
    """Bilinear resize with half-pixel-center sampling and edge clamping.

    Output pixel (r, c) samples the source at
    ``((c + 0.5) * W/out_width - 0.5, (r + 0.5) * H/out_height - 0.5)``,
    clamped to the grid.  Resizing to the source size reproduces the input
    exactly, and outputs never leave [grid.min(), grid.max()].
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ValueError(f"expected a 2-D grid, got shape {grid.shape}")
    if out_width < 1 or out_height < 1:
        raise ValueError(f"target size must be positive, got {out_width}x{out_height}")
    h, w = grid.shape

    src_x = np.clip((np.arange(out_width) + 0.5) * (w / out_width) - 0.5, 0.0, w - 1.0)
    src_y = np.clip((np.arange(out_height) + 0.5) * (h / out_height) - 0.5, 0.0, h - 1.0)
    x0 = np.floor(src_x).astype(np.intp)
    y0 = np.floor(src_y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = src_x - x0
    fy = src_y - y0

    top = grid[y0[:, None], x0[None, :]] * (1.0 - fx) + grid[y0[:, None], x1[None, :]] * fx
    bot = grid[y1[:, None], x0[None, :]] * (1.0 - fx) + grid[y1[:, None], x1[None, :]] * fx
    return top * (1.0 - fy)[:, None] + bot * fy[:, None]


_STRUCTURE_4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
_STRUCTURE_8 = np.ones((3, 3), dtype=bool)


def boxes_from_mask(
    mask: np.ndarray, connectivity: int = 4, policy: str = "largest"
) -> list[BBox]:
    """Tight boxes around the connected components of a binary mask.

    Policy ``largest`` returns the single box of the component with the
    most pixels (ties: smallest (y0, x0, y1, x1) box); ``all`` returns every
    component's box sorted by box area descending (same tie-break).  An
    empty mask yields an empty list.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    if connectivity == 4:
        structure = _STRUCTURE_4
    elif connectivity == 8:
        structure = _STRUCTURE_8
    else:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    if policy not in ("largest", "all"):
        raise ValueError(f"policy must be 'largest' or 'all', got {policy!r}")

    labels, count = ndimage.label(mask, structure=structure)
    if count == 0:
        return []
    pixel_counts = np.bincount(labels.ravel())[1:]
    slices = ndimage.find_objects(labels)
    boxes = []
    for sl in slices:
        ys, xs = sl
        boxes.append(BBox(x0=int(xs.start), y0=int(ys.start), x1=int(xs.stop), y1=int(ys.stop)))

    if policy == "largest":
        best = min(
            range(count),
            key=lambda i: (
                -int(pixel_counts[i]),
                boxes[i].y0,
                boxes[i].x0,
                boxes[i].y1,
                boxes[i].x1,
            ),
        )
        return [boxes[best]]
    return sorted(boxes, key=lambda b: (-b.area, b.y0, b.x0, b.y1, b.x1))


def score_map(
    fm: FeatureMap,
    predictor: ForegroundPredictor,
    image_width: int,
    image_height: int,
) -> tuple[np.ndarray, bool]:
    """Normalized activation upsampled to image resolution.

    Returns (map, degenerate).  Degenerate activation maps upsample to all
    zeros.
    """
    am = activation_map(fm, predictor)
    return (
        upsample_bilinear(am.normalized, image_width, image_height),
        am.degenerate,
    )


def localize(
    fm: FeatureMap,
    predictor: ForegroundPredictor,
    threshold: float,
    image_width: int,
    image_height: int,
    connectivity: int = 4,
    policy: str = "largest",
) -> LocalizationResult:
    """Full localization of one image: score, upsample, threshold, box.

    The mask keeps pixels whose upsampled normalized score is >= threshold
    (so threshold 1.0 keeps the peak).  Degenerate maps produce an empty
    mask and no boxes.
    """
    if not (0.0 <= threshold <= 1.0):
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    upsampled, degenerate = score_map(fm, predictor, image_width, image_height)
    if degenerate:
        mask = np.zeros((image_height, image_width), dtype=bool)
        boxes: list[BBox] = []
    else:
        mask = upsampled >= threshold
        boxes = boxes_from_mask(mask, connectivity, policy)
    return LocalizationResult(
        image_id=fm.image_id,
        threshold=float(threshold),
        mask=mask,
        boxes=boxes,
        chosen_box=boxes[0] if boxes else None,
        degenerate=degenerate,
    )


# -- qualitative exports ---------------------------------------------------


def map_to_pgm_bytes(grid: np.ndarray) -> np.ndarray:
    """Scale a [0, 1] map to uint8 0..255 for PGM emission."""
    grid = np.asarray(grid, dtype=np.float64)
    return np.clip(np.rint(grid * 255.0), 0, 255).astype(np.uint8)


def draw_box_outline(image: np.ndarray, box: BBox, value: int = 255) -> np.ndarray:
    """Return a copy of a grayscale image with a 1-pixel box outline drawn."""
    out = np.array(image, dtype=np.uint8, copy=True)
    h, w = out.shape
    x0, y0 = max(box.x0, 0), max(box.y0, 0)
    x1, y1 = min(box.x1, w), min(box.y1, h)
    if x0 >= x1 or y0 >= y1:
        return out
    out[y0, x0:x1] = value
    out[y1 - 1, x0:x1] = value
    out[y0:y1, x0] = value
    out[y0:y1, x1 - 1] = value
    return out
