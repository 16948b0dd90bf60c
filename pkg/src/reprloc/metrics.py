"""Localization and segmentation metrics with reproducible reports.

Box metrics score a single chosen box (or, for the threshold-sweeping box
accuracy, every candidate box) against ground-truth boxes in image pixel
space.  Pixel metrics pool every pixel of the dataset into one global
ranking / confusion count rather than averaging per image.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .featstore import (
    BBox,
    DataError,
    DatasetManifest,
    ManifestEntry,
    manifest_digest,
    read_feature_map,
    read_mask,
)
from .core import (
    Accumulator,
    ForegroundPredictor,
    accumulate,
    finalize_predictor,
    finalize_tau,
    sample_entries,
)
from .localize import boxes_from_mask, localize, score_map

DEFAULT_DELTAS = (0.3, 0.5, 0.7)
METRICS = ("gtknown", "top1", "top5", "pxap", "piou", "maxboxaccv2")


class EvalInputError(DataError):
    """The manifest lacks the ground truth or predictions a metric needs."""


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two half-open integer boxes."""
    ix = min(a.x1, b.x1) - max(a.x0, b.x0)
    iy = min(a.y1, b.y1) - max(a.y0, b.y0)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union


def best_iou(pred: BBox | None, gts: Sequence[BBox]) -> float:
    """Best IoU of *pred* against any ground-truth box; 0 with no prediction."""
    if pred is None or not gts:
        return 0.0
    return max(iou(pred, gt) for gt in gts)


def gt_known_loc(
    chosen: Mapping[str, BBox | None],
    gts: Mapping[str, Sequence[BBox]],
    delta: float = 0.5,
) -> tuple[float, dict[str, float]]:
    """Fraction of images whose chosen box beats *delta* IoU against some GT.

    Images with no predicted box count as misses.  Requires at least one GT
    box per image.  Returns (ratio, per-image best IoU).
    """
    if not chosen:
        raise EvalInputError("no images to evaluate")
    per_image: dict[str, float] = {}
    hits = 0
    for image_id in chosen:
        if image_id not in gts or not gts[image_id]:
            raise EvalInputError(f"image {image_id!r} has no ground-truth boxes")
        score = best_iou(chosen[image_id], gts[image_id])
        per_image[image_id] = score
        if score > delta:
            hits += 1
    return hits / len(chosen), per_image


def top_k_loc(
    chosen: Mapping[str, BBox | None],
    gts: Mapping[str, Sequence[BBox]],
    predictions: Mapping[str, Sequence[int]],
    true_classes: Mapping[str, int],
    k: int,
    delta: float = 0.5,
) -> tuple[float, dict[str, dict[str, Any]]]:
    """Localization hit AND true class among the top-k predicted classes."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not chosen:
        raise EvalInputError("no images to evaluate")
    per_image: dict[str, dict[str, Any]] = {}
    hits = 0
    for image_id in chosen:
        if image_id not in predictions:
            raise EvalInputError(f"no class predictions for image {image_id!r}")
        if image_id not in true_classes:
            raise EvalInputError(f"no true class for image {image_id!r}")
        if image_id not in gts or not gts[image_id]:
            raise EvalInputError(f"image {image_id!r} has no ground-truth boxes")
        loc_iou = best_iou(chosen[image_id], gts[image_id])
        loc_hit = loc_iou > delta
        cls_hit = true_classes[image_id] in list(predictions[image_id])[:k]
        per_image[image_id] = {"best_iou": loc_iou, "loc_hit": loc_hit, "cls_hit": cls_hit}
        if loc_hit and cls_hit:
            hits += 1
    return hits / len(chosen), per_image


def max_box_acc_v2(
    score_maps: Mapping[str, np.ndarray],
    gts: Mapping[str, Sequence[BBox]],
    theta_grid: Sequence[float],
    deltas: Sequence[float] = DEFAULT_DELTAS,
    connectivity: int = 4,
) -> tuple[float, dict[float, dict[str, float]]]:
    """Threshold-sweep box accuracy averaged over IoU levels.

    For each theta in the grid, each image's candidate boxes are the
    connected components of ``map >= theta``; the image's score at theta is
    the best IoU between any candidate and any GT box.  For each delta, the
    accuracy is maximized over the grid; the final value is the mean of the
    per-delta maxima.  Returns (mean, {delta: {"accuracy", "theta"}}).
    """
    thetas = [float(t) for t in theta_grid]
    if not thetas:
        raise ValueError("theta grid must be nonempty")
    if sorted(thetas) != thetas:
        raise ValueError("theta grid must be ascending")
    image_ids = list(score_maps)
    if not image_ids:
        raise EvalInputError("no images to evaluate")
    for image_id in image_ids:
        if image_id not in gts or not gts[image_id]:
            raise EvalInputError(f"image {image_id!r} has no ground-truth boxes")

    # best achievable IoU per (image, theta), shared across deltas
    best = np.zeros((len(image_ids), len(thetas)))
    for i, image_id in enumerate(image_ids):
        smap = np.asarray(score_maps[image_id], dtype=np.float64)
        for j, theta in enumerate(thetas):
            candidates = boxes_from_mask(smap >= theta, connectivity, policy="all")
            best[i, j] = max(
                (iou(c, gt) for c in candidates for gt in gts[image_id]), default=0.0
            )

    per_delta: dict[float, dict[str, float]] = {}
    for delta in deltas:
        acc_by_theta = (best > delta).mean(axis=0)
        j = int(np.argmax(acc_by_theta))
        per_delta[float(delta)] = {
            "accuracy": float(acc_by_theta[j]),
            "theta": thetas[j],
        }
    mean_score = float(np.mean([per_delta[float(d)]["accuracy"] for d in deltas]))
    return mean_score, per_delta


def _pooled_pixels(
    score_maps: Mapping[str, np.ndarray], gt_masks: Mapping[str, np.ndarray]
) -> tuple[np.ndarray, np.ndarray]:
    scores = []
    labels = []
    for image_id in score_maps:
        if image_id not in gt_masks:
            raise EvalInputError(f"image {image_id!r} has no ground-truth mask")
        smap = np.asarray(score_maps[image_id], dtype=np.float64)
        mask = np.asarray(gt_masks[image_id], dtype=bool)
        if smap.shape != mask.shape:
            raise EvalInputError(
                f"image {image_id!r}: score map {smap.shape} vs mask {mask.shape}"
            )
        scores.append(smap.ravel())
        labels.append(mask.ravel())
    if not scores:
        raise EvalInputError("no images to evaluate")
    return np.concatenate(scores), np.concatenate(labels)


def pxap(
    score_maps: Mapping[str, np.ndarray], gt_masks: Mapping[str, np.ndarray]
) -> float:
    """Area under the dataset-global pixel precision-recall curve.

    All pixels of all images are pooled and ranked by score; the curve is
    traced at each distinct score (ties enter together) and integrated with
    the rectangle rule, precision(t) * delta-recall(t).
    """
    scores, labels = _pooled_pixels(score_maps, gt_masks)
    positives = int(labels.sum())
    if positives == 0:
        raise EvalInputError("no positive ground-truth pixel in the dataset")

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    # last index of each distinct-score block
    block_end = np.flatnonzero(np.diff(sorted_scores) != 0.0)
    block_end = np.concatenate([block_end, [scores.size - 1]])
    tp = np.cumsum(sorted_labels)[block_end].astype(np.float64)
    retrieved = (block_end + 1).astype(np.float64)
    precision = tp / retrieved
    recall = tp / positives
    return float(np.sum(precision * np.diff(recall, prepend=0.0)))


def piou(
    score_maps: Mapping[str, np.ndarray],
    gt_masks: Mapping[str, np.ndarray],
    theta_grid: Sequence[float],
    per_image: bool = False,
) -> tuple[float, float]:
    """Best pixel IoU over a threshold sweep.

    With dataset-global pooling (the default), true/false positives and
    false negatives are counted over every pixel of every image before the
    ratio; ``per_image=True`` instead averages per-image IoU at each
    threshold.  Returns (best IoU, threshold achieving it).
    """
    thetas = [float(t) for t in theta_grid]
    if not thetas:
        raise ValueError("theta grid must be nonempty")
    ids = list(score_maps)
    if not ids:
        raise EvalInputError("no images to evaluate")
    maps = []
    masks = []
    for image_id in ids:
        if image_id not in gt_masks:
            raise EvalInputError(f"image {image_id!r} has no ground-truth mask")
        smap = np.asarray(score_maps[image_id], dtype=np.float64)
        mask = np.asarray(gt_masks[image_id], dtype=bool)
        if smap.shape != mask.shape:
            raise EvalInputError(
                f"image {image_id!r}: score map {smap.shape} vs mask {mask.shape}"
            )
        maps.append(smap)
        masks.append(mask)
    if not any(m.any() for m in masks):
        raise EvalInputError("no positive ground-truth pixel in the dataset")

    best_value = -1.0
    best_theta = thetas[0]
    for theta in thetas:
        if per_image:
            values = []
            for smap, mask in zip(maps, masks):
                pred = smap >= theta
                union = np.logical_or(pred, mask).sum()
                values.append((np.logical_and(pred, mask).sum() / union) if union else 0.0)
            value = float(np.mean(values))
        else:
            tp = fp = fn = 0
            for smap, mask in zip(maps, masks):
                pred = smap >= theta
                tp += int(np.logical_and(pred, mask).sum())
                fp += int(np.logical_and(pred, ~mask).sum())
                fn += int(np.logical_and(~pred, mask).sum())
            denom = tp + fp + fn
            value = tp / denom if denom else 0.0
        if value > best_value:
            best_value = value
            best_theta = theta
    return best_value, best_theta


# -- classifier output ------------------------------------------------------


def load_class_predictions(path: str | Path) -> dict[str, list[int]]:
    """Load {image_id: [class ids, rank 1 first]} and check its invariants."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise DataError(f"{path}: class predictions must be a JSON object")
    out: dict[str, list[int]] = {}
    for image_id, ranked in doc.items():
        if not isinstance(ranked, list) or not all(
            isinstance(c, int) and not isinstance(c, bool) for c in ranked
        ):
            raise DataError(f"{path}: predictions for {image_id!r} must be a list of ints")
        if len(ranked) < 5:
            raise DataError(
                f"{path}: predictions for {image_id!r} must rank at least 5 classes"
            )
        if len(set(ranked)) != len(ranked):
            raise DataError(f"{path}: duplicate class ids for {image_id!r}")
        out[image_id] = ranked
    return out


# -- evaluation driver -------------------------------------------------------


@dataclass
class EvalReport:
    metric: str
    dataset_digest: str
    params: dict[str, Any]
    value: float
    extras: dict[str, Any] = field(default_factory=dict)
    per_image: dict[str, Any] | None = None

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "metric": self.metric,
            "dataset_digest": self.dataset_digest,
            "params": self.params,
            "value": self.value,
            "extras": self.extras,
            "per_image": self.per_image,
        }


def _predictor_for(
    entry: ManifestEntry, predictors: Sequence[ForegroundPredictor]
) -> ForegroundPredictor:
    if len(predictors) == 1 and predictors[0].class_id is None:
        return predictors[0]
    by_class = {p.class_id: p for p in predictors}
    if entry.class_id is None:
        raise EvalInputError(
            f"image {entry.image_id!r} has no class_id but predictors are per-class"
        )
    if entry.class_id not in by_class:
        raise EvalInputError(
            f"no predictor for class {entry.class_id} (image {entry.image_id!r})"
        )
    return by_class[entry.class_id]


def _require_gt_boxes(entries: Iterable[ManifestEntry], metric: str) -> None:
    missing = [e.image_id for e in entries if not e.gt_boxes]
    if missing:
        raise EvalInputError(
            f"metric {metric!r} needs ground-truth boxes; missing on "
            f"{missing[:5]} ({len(missing)} total)"
        )


def _require_gt_masks(entries: Iterable[ManifestEntry], metric: str) -> None:
    missing = [e.image_id for e in entries if not e.gt_mask_path]
    if missing:
        raise EvalInputError(
            f"metric {metric!r} needs ground-truth masks; missing on "
            f"{missing[:5]} ({len(missing)} total)"
        )


def evaluate(
    manifest: DatasetManifest,
    predictors: Sequence[ForegroundPredictor],
    metric: str,
    *,
    split: str = "test",
    delta: float = 0.5,
    threshold: float = 0.5,
    theta_grid: Sequence[float] | None = None,
    deltas: Sequence[float] = DEFAULT_DELTAS,
    predictions: Mapping[str, Sequence[int]] | None = None,
    connectivity: int = 4,
    policy: str = "largest",
    piou_per_image: bool = False,
    with_per_image: bool = True,
) -> EvalReport:
    """Drive localization over a split and reduce it to one metric value.

    Per-class predictors are selected by each entry's class_id; a single
    class-agnostic predictor serves every image.  Images are processed in
    manifest order so reports are bit-reproducible.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}, expected one of {METRICS}")
    entries = manifest.split_entries(split)
    if not entries:
        raise EvalInputError(f"manifest has no {split!r} entries")
    if theta_grid is None:
        theta_grid = np.linspace(0.0, 1.0, 101)
    thetas = [float(t) for t in theta_grid]

    digest = manifest_digest(manifest.source_path) if manifest.source_path else ""
    params: dict[str, Any] = {
        "split": split,
        "connectivity": connectivity,
        "policy": policy,
        "classwise": not (len(predictors) == 1 and predictors[0].class_id is None),
    }

    if metric in ("gtknown", "top1", "top5"):
        _require_gt_boxes(entries, metric)
        params.update({"delta": delta, "threshold": threshold})
        chosen: dict[str, BBox | None] = {}
        gts: dict[str, Sequence[BBox]] = {}
        for entry in entries:
            pred = _predictor_for(entry, predictors)
            fm = read_feature_map(manifest.feature_file(entry), entry.image_id)
            result = localize(
                fm, pred, threshold, entry.image_width, entry.image_height,
                connectivity, policy,
            )
            chosen[entry.image_id] = result.chosen_box
            gts[entry.image_id] = entry.gt_boxes or []
        if metric == "gtknown":
            value, per_image = gt_known_loc(chosen, gts, delta)
        else:
            k = 1 if metric == "top1" else 5
            if predictions is None:
                raise EvalInputError(f"metric {metric!r} needs class predictions")
            true_classes = {}
            for entry in entries:
                if entry.class_id is None:
                    raise EvalInputError(
                        f"metric {metric!r} needs class_id on every entry; "
                        f"missing on {entry.image_id!r}"
                    )
                true_classes[entry.image_id] = entry.class_id
            value, per_image = top_k_loc(chosen, gts, predictions, true_classes, k, delta)
        return EvalReport(
            metric=metric,
            dataset_digest=digest,
            params=params,
            value=value,
            per_image=per_image if with_per_image else None,
        )

    # pixel / sweep metrics need full score maps at image resolution
    score_maps: dict[str, np.ndarray] = {}
    degenerate: list[str] = []
    for entry in entries:
        pred = _predictor_for(entry, predictors)
        fm = read_feature_map(manifest.feature_file(entry), entry.image_id)
        smap, is_degenerate = score_map(fm, pred, entry.image_width, entry.image_height)
        score_maps[entry.image_id] = smap
        if is_degenerate:
            degenerate.append(entry.image_id)

    extras: dict[str, Any] = {}
    if degenerate:
        extras["degenerate_images"] = degenerate

    if metric == "maxboxaccv2":
        _require_gt_boxes(entries, metric)
        params.update({"theta_grid": thetas, "deltas": [float(d) for d in deltas]})
        gt_boxes = {e.image_id: e.gt_boxes or [] for e in entries}
        value, per_delta = max_box_acc_v2(score_maps, gt_boxes, thetas, deltas, connectivity)
        extras["per_delta"] = {str(d): v for d, v in per_delta.items()}
        return EvalReport(
            metric=metric, dataset_digest=digest, params=params, value=value, extras=extras
        )

    _require_gt_masks(entries, metric)
    gt_masks = {
        e.image_id: read_mask(manifest.mask_file(e)) for e in entries  # type: ignore[arg-type]
    }
    if metric == "pxap":
        value = pxap(score_maps, gt_masks)
        return EvalReport(
            metric=metric, dataset_digest=digest, params=params, value=value, extras=extras
        )
    params.update({"theta_grid": thetas, "per_image": piou_per_image})
    value, best_theta = piou(score_maps, gt_masks, thetas, per_image=piou_per_image)
    extras["best_theta"] = best_theta
    return EvalReport(
        metric=metric, dataset_digest=digest, params=params, value=value, extras=extras
    )


def evaluate_tau_sweep(
    fit_manifest: DatasetManifest,
    eval_manifest: DatasetManifest,
    taus: Sequence[float],
    metric: str = "gtknown",
    *,
    sample_rate: float = 1.0,
    seed: int = 0,
    constant_c: float = 1.0,
    **eval_kwargs: Any,
) -> dict[str, Any]:
    """Metric-vs-threshold curve from a single accumulation pass.

    The train statistics are accumulated once; each candidate threshold
    re-finalizes the (class-agnostic) predictor cheaply and re-runs the
    evaluation.  The default threshold of the statistics is always
    evaluated alongside the sweep for comparison.
    """
    train = sample_entries(fit_manifest.split_entries("train"), sample_rate, seed)
    if not train:
        raise EvalInputError("no train entries to accumulate")
    acc: Accumulator | None = None
    for entry in train:
        fm = read_feature_map(fit_manifest.feature_file(entry), entry.image_id)
        if acc is None:
            acc = Accumulator(dim=fm.channels)
        accumulate(acc, fm)
    assert acc is not None
    default_tau = finalize_tau(acc)

    def value_at(tau: float) -> float:
        predictor = finalize_predictor(acc, constant_c, tau_override=tau)
        report = evaluate(
            eval_manifest, [predictor], metric, with_per_image=False, **eval_kwargs
        )
        return report.value

    sweep_values = [value_at(float(t)) for t in taus]
    return {
        "metric": metric,
        "taus": [float(t) for t in taus],
        "values": sweep_values,
        "default_tau": default_tau,
        "default_value": value_at(default_tau),
    }
