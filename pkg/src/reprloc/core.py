"""Closed-form foreground predictor and representer-point queries.

The predictor is fitted from two streaming sufficient statistics over every
patch feature of the training set: the plain sum of feature vectors and the
sum of their unit-normalized counterparts.  From these, the norm threshold
is ``|feature_sum| / |unit_sum|``, a patch's importance is
``(|f| - threshold) / constant``, and the predictor vector is
``(feature_sum - threshold * unit_sum) / constant``.  A test patch's
foreground score (the predictor dotted with the patch's unit feature) is
identically the sum, over all training patches, of
``importance * cosine_similarity`` -- which is what makes the top ranked
training patches an exact explanation of the score.

Accumulation runs in float64 regardless of the float32 payload; an optional
compensated-summation mode tightens it further for very long streams.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .featstore import (
    DataError,
    DatasetManifest,
    FeatureMap,
    ManifestEntry,
    manifest_digest,
    read_feature_map,
)

PREDICTOR_VERSION = 1
THREADS_ENV = "REPRLOC_THREADS"


class DegenerateDatasetError(DataError):
    """Every accumulated feature was zero; no threshold or predictor exists."""


class FitError(DataError):
    """The fit request cannot be satisfied by the given manifest."""


class QueryError(DataError):
    """A representer query targets an unusable patch."""


def resolve_threads(requested: int | None = None) -> int:
    """Worker count for parallel maps, capped by the REPRLOC_THREADS env var."""
    cap_raw = os.environ.get(THREADS_ENV)
    cap = None
    if cap_raw:
        try:
            cap = max(1, int(cap_raw))
        except ValueError:
            cap = None
    if requested is None:
        requested = cap if cap is not None else 1
    if cap is not None:
        requested = min(requested, cap)
    return max(1, requested)


def normalize_feature(f: np.ndarray) -> np.ndarray | None:
    """Return f / |f| as float64, or None when f is the zero vector.

    Raises:
        ValueError: Non-finite input.
    """
    f = np.asarray(f, dtype=np.float64)
    if not np.isfinite(f).all():
        raise ValueError("feature vector contains NaN or Inf")
    norm = float(np.linalg.norm(f))
    if norm == 0.0:
        return None
    return f / norm


@dataclass(eq=False)
class Accumulator:
    """Mergeable sufficient statistics of a feature stream.

    ``feature_sum`` is the element-wise sum of every accumulated patch
    vector; ``unit_sum`` is the sum of unit-normalized patch vectors, with
    zero-norm patches skipped (they have no direction) and counted in
    ``skipped_zero_vectors``.  Merging is commutative and associative up to
    float summation order.
    """

    dim: int
    feature_sum: np.ndarray = field(default=None)  # type: ignore[assignment]
    unit_sum: np.ndarray = field(default=None)  # type: ignore[assignment]
    patch_count: int = 0
    image_count: int = 0
    skipped_zero_vectors: int = 0
    use_kahan: bool = False
    _comp_feature: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]
    _comp_unit: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError(f"accumulator dim must be >= 1, got {self.dim}")
        if self.feature_sum is None:
            self.feature_sum = np.zeros(self.dim, dtype=np.float64)
        if self.unit_sum is None:
            self.unit_sum = np.zeros(self.dim, dtype=np.float64)
        if self._comp_feature is None:
            self._comp_feature = np.zeros(self.dim, dtype=np.float64)
        if self._comp_unit is None:
            self._comp_unit = np.zeros(self.dim, dtype=np.float64)

    def copy(self) -> "Accumulator":
        return Accumulator(
            dim=self.dim,
            feature_sum=self.feature_sum.copy(),
            unit_sum=self.unit_sum.copy(),
            patch_count=self.patch_count,
            image_count=self.image_count,
            skipped_zero_vectors=self.skipped_zero_vectors,
            use_kahan=self.use_kahan,
            _comp_feature=self._comp_feature.copy(),
            _comp_unit=self._comp_unit.copy(),
        )

    def _add_vectors(self, feature_inc: np.ndarray, unit_inc: np.ndarray) -> None:
        if self.use_kahan:
            _kahan_add(self.feature_sum, self._comp_feature, feature_inc)
            _kahan_add(self.unit_sum, self._comp_unit, unit_inc)
        else:
            self.feature_sum += feature_inc
            self.unit_sum += unit_inc


def _kahan_add(total: np.ndarray, comp: np.ndarray, inc: np.ndarray) -> None:
    y = inc - comp
    t = total + y
    comp[:] = (t - total) - y
    total[:] = t


def accumulate(acc: Accumulator, fm: FeatureMap) -> Accumulator:
    """Fold one feature map into *acc* (mutates and returns it).

    Adds the per-patch feature vectors to ``feature_sum`` and their unit
    versions to ``unit_sum``; zero-norm patches contribute nothing to
    ``unit_sum`` and are counted separately.
    """
    if fm.channels != acc.dim:
        raise FitError(f"feature map has {fm.channels} channels, accumulator has {acc.dim}")
    flat = fm.data.reshape(fm.channels, -1).astype(np.float64)  # (C, H*W)
    norms = np.linalg.norm(flat, axis=0)
    nonzero = norms > 0.0
    feature_inc = flat.sum(axis=1)
    if nonzero.all():
        unit_inc = (flat / norms).sum(axis=1)
    elif nonzero.any():
        unit_inc = (flat[:, nonzero] / norms[nonzero]).sum(axis=1)
    else:
        unit_inc = np.zeros(acc.dim, dtype=np.float64)
    acc._add_vectors(feature_inc, unit_inc)
    acc.patch_count += flat.shape[1]
    acc.image_count += 1
    acc.skipped_zero_vectors += int(flat.shape[1] - np.count_nonzero(nonzero))
    return acc


def merge(a: Accumulator, b: Accumulator) -> Accumulator:
    """Combine two accumulators into a new one (component-wise sums)."""
    if a.dim != b.dim:
        raise FitError(f"cannot merge accumulators of dim {a.dim} and {b.dim}")
    out = a.copy()
    out._add_vectors(b.feature_sum, b.unit_sum)
    if out.use_kahan and b.use_kahan:
        # Carried compensation from b still applies to the combined total.
        out._comp_feature += b._comp_feature
        out._comp_unit += b._comp_unit
    out.patch_count += b.patch_count
    out.image_count += b.image_count
    out.skipped_zero_vectors += b.skipped_zero_vectors
    return out


def finalize_tau(acc: Accumulator) -> float:
    """Norm threshold: |feature_sum| / |unit_sum|.

    Raises:
        DegenerateDatasetError: The unit sum is zero (every feature was zero).
    """
    unit_norm = float(np.linalg.norm(acc.unit_sum))
    if unit_norm == 0.0:
        raise DegenerateDatasetError(
            "all accumulated features are zero vectors; threshold is undefined"
        )
    return float(np.linalg.norm(acc.feature_sum)) / unit_norm


def tau_gram_oracle(features: Sequence[np.ndarray] | np.ndarray) -> float:
    """Quadratic-cost reference for the norm threshold.

    Computes sqrt of the ratio between the full pairwise Gram sum of the raw
    vectors and the full pairwise Gram sum of the unit vectors, materializing
    both N x N matrices.  Verification only: must agree with
    :func:`finalize_tau` on the same data to high precision.
    """
    mat = np.asarray(features, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] < 1:
        raise ValueError(f"expected a nonempty (N, C) array, got shape {mat.shape}")
    norms = np.linalg.norm(mat, axis=1)
    nonzero = norms > 0.0
    if not nonzero.any():
        raise DegenerateDatasetError("all features are zero vectors")
    unit = mat[nonzero] / norms[nonzero, None]
    numerator = float((mat @ mat.T).sum())
    denominator = float((unit @ unit.T).sum())
    if denominator <= 0.0:
        raise DegenerateDatasetError("unit Gram sum is not positive")
    return float(np.sqrt(numerator / denominator))


@dataclass(eq=False)
class ForegroundPredictor:
    """The fitted foreground direction with its threshold and provenance."""

    weights: np.ndarray
    tau: float
    constant_c: float = 1.0
    class_id: int | None = None
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 1 or self.weights.size < 1:
            raise ValueError(f"weights must be a 1-D vector, got shape {self.weights.shape}")

    @property
    def dim(self) -> int:
        return int(self.weights.size)

    def to_json_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "version": PREDICTOR_VERSION,
            "dim": self.dim,
            "w": [float(x) for x in self.weights],
            "tau": float(self.tau),
            "constant_C": float(self.constant_c),
        }
        if self.class_id is not None:
            doc["class_id"] = self.class_id
        doc["provenance"] = dict(self.provenance)
        return doc

    @classmethod
    def from_json_dict(cls, doc: dict[str, Any]) -> "ForegroundPredictor":
        if doc.get("version") != PREDICTOR_VERSION:
            raise DataError(
                f"unsupported predictor version {doc.get('version')!r}, "
                f"expected {PREDICTOR_VERSION}"
            )
        weights = np.asarray(doc["w"], dtype=np.float64)
        if weights.size != doc.get("dim"):
            raise DataError(
                f"predictor dim {doc.get('dim')} does not match weight count {weights.size}"
            )
        return cls(
            weights=weights,
            tau=float(doc["tau"]),
            constant_c=float(doc.get("constant_C", 1.0)),
            class_id=doc.get("class_id"),
            provenance=dict(doc.get("provenance", {})),
        )


def save_predictor(pred: ForegroundPredictor, path: str | Path) -> None:
    from .featstore import _atomic_write_bytes

    payload = json.dumps(pred.to_json_dict(), indent=2).encode("utf-8") + b"\n"
    _atomic_write_bytes(Path(path), payload)


def load_predictor(path: str | Path) -> ForegroundPredictor:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise DataError(f"{path}: predictor file must be a JSON object")
    try:
        return ForegroundPredictor.from_json_dict(doc)
    except KeyError as exc:
        raise DataError(f"{path}: missing predictor field {exc}") from exc


def finalize_predictor(
    acc: Accumulator,
    constant_c: float = 1.0,
    tau_override: float | None = None,
    class_id: int | None = None,
    provenance: dict[str, Any] | None = None,
) -> ForegroundPredictor:
    """Close the accumulator into a predictor.

    ``weights = (feature_sum - tau * unit_sum) / constant_c`` with the
    threshold taken from the accumulator unless *tau_override* is given
    (used by threshold sweeps).
    """
    if constant_c <= 0.0:
        raise ValueError(f"constant_c must be positive, got {constant_c}")
    tau = float(tau_override) if tau_override is not None else finalize_tau(acc)
    weights = (acc.feature_sum - tau * acc.unit_sum) / constant_c
    prov = dict(provenance or {})
    prov.setdefault("image_count", acc.image_count)
    prov.setdefault("skipped_zero_vectors", acc.skipped_zero_vectors)
    return ForegroundPredictor(
        weights=weights,
        tau=tau,
        constant_c=constant_c,
        class_id=class_id,
        provenance=prov,
    )


def sample_entries(
    entries: Sequence[ManifestEntry], sample_rate: float, seed: int
) -> list[ManifestEntry]:
    """Deterministic subset of *entries*: same (entries, rate, seed) -> same pick.

    A rate of 1.0 keeps every entry and consumes no randomness.  Otherwise
    round(rate * n) entries (at least one) are drawn without replacement and
    returned in their original manifest order.
    """
    if not (0.0 < sample_rate <= 1.0):
        raise ValueError(f"sample_rate must be in (0, 1], got {sample_rate}")
    if sample_rate == 1.0:
        return list(entries)
    n = len(entries)
    k = max(1, int(round(sample_rate * n)))
    rng = np.random.default_rng(seed)
    picked = np.sort(rng.choice(n, size=min(k, n), replace=False))
    return [entries[i] for i in picked]


def _accumulate_entries(
    manifest: DatasetManifest,
    entries: Sequence[ManifestEntry],
    dim: int,
    classwise: bool,
    use_kahan: bool,
) -> dict[int | None, Accumulator]:
    accs: dict[int | None, Accumulator] = {}
    for entry in entries:
        key = entry.class_id if classwise else None
        acc = accs.get(key)
        if acc is None:
            acc = Accumulator(dim=dim, use_kahan=use_kahan)
            accs[key] = acc
        fm = read_feature_map(manifest.feature_file(entry), entry.image_id)
        accumulate(acc, fm)
    return accs


def _merge_keyed(
    parts: Iterable[dict[int | None, Accumulator]]
) -> dict[int | None, Accumulator]:
    out: dict[int | None, Accumulator] = {}
    for part in parts:
        for key, acc in part.items():
            out[key] = merge(out[key], acc) if key in out else acc
    return out


def fit(
    manifest: DatasetManifest,
    *,
    classwise: bool = False,
    sample_rate: float = 1.0,
    seed: int = 0,
    constant_c: float = 1.0,
    tau_override: float | None = None,
    per_class_tau: bool = True,
    use_kahan: bool = False,
    threads: int | None = None,
) -> list[ForegroundPredictor]:
    """Fit foreground predictor(s) by streaming over the train split.

    Class-agnostic mode returns a single predictor over the (sampled) train
    entries.  Classwise mode groups the sampled entries by ``class_id`` and
    returns one predictor per class; each class gets its own threshold
    unless ``per_class_tau=False``, which forces the threshold of the pooled
    statistics onto every class.

    Memory is bounded by the statistics plus one in-flight feature map per
    worker; feature files are never held together.
    """
    train = manifest.split_entries("train")
    picked = sample_entries(train, sample_rate, seed)
    if not picked:
        raise FitError("no train entries to fit on")
    if classwise:
        missing = [e.image_id for e in picked if e.class_id is None]
        if missing:
            raise FitError(
                f"classwise fit requires class_id on every sampled entry; "
                f"missing on {missing[:5]} ({len(missing)} total)"
            )

    dim = read_feature_map(manifest.feature_file(picked[0]), picked[0].image_id).channels
    workers = resolve_threads(threads)
    if workers == 1 or len(picked) <= 1:
        accs = _accumulate_entries(manifest, picked, dim, classwise, use_kahan)
    else:
        # Contiguous chunks accumulated in parallel, merged in chunk order so
        # the result does not depend on scheduling.
        chunks = np.array_split(np.arange(len(picked)), min(workers, len(picked)))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(
                pool.map(
                    lambda idx: _accumulate_entries(
                        manifest, [picked[i] for i in idx], dim, classwise, use_kahan
                    ),
                    chunks,
                )
            )
        accs = _merge_keyed(parts)

    digest = manifest_digest(manifest.source_path) if manifest.source_path else ""
    base_prov: dict[str, Any] = {
        "manifest_digest": digest,
        "sample_rate": float(sample_rate),
        "seed": int(seed),
    }

    if not classwise:
        acc = accs[None]
        return [
            finalize_predictor(
                acc, constant_c, tau_override, class_id=None, provenance=dict(base_prov)
            )
        ]

    shared_tau: float | None = tau_override
    tau_mode = "override" if tau_override is not None else (
        "per-class" if per_class_tau else "global"
    )
    if tau_override is None and not per_class_tau:
        pooled: Accumulator | None = None
        for acc in accs.values():
            pooled = acc if pooled is None else merge(pooled, acc)
        assert pooled is not None
        shared_tau = finalize_tau(pooled)

    predictors = []
    for class_id in sorted(accs):
        prov = dict(base_prov)
        prov["tau_mode"] = tau_mode
        predictors.append(
            finalize_predictor(
                accs[class_id],
                constant_c,
                shared_tau,
                class_id=class_id,
                provenance=prov,
            )
        )
    return predictors


@dataclass(eq=False)
class ImportanceMap:
    """Per-patch importance (|f| - tau) / constant for one image."""

    image_id: str
    alpha: np.ndarray  # (H, W) float64
    tau: float
    constant_c: float = 1.0


def importance_map(fm: FeatureMap, tau: float, constant_c: float = 1.0) -> ImportanceMap:
    """Importance of every patch of *fm* under threshold *tau*.

    Zero-norm patches get the floor value (0 - tau) / constant_c; they are
    excluded from representer rankings but still carry a defined importance.
    """
    if tau <= 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    if constant_c <= 0.0:
        raise ValueError(f"constant_c must be positive, got {constant_c}")
    norms = np.linalg.norm(fm.data.astype(np.float64), axis=0)
    return ImportanceMap(
        image_id=fm.image_id,
        alpha=(norms - tau) / constant_c,
        tau=float(tau),
        constant_c=float(constant_c),
    )


@dataclass(frozen=True)
class RepresenterEntry:
    image_id: str
    row: int
    col: int
    alpha: float
    similarity: float
    value: float  # alpha * similarity, computed as that exact product


@dataclass
class RepresenterResult:
    """Ranked training patches explaining one query patch's score."""

    query_image_id: str
    query_row: int
    query_col: int
    tau: float
    constant_c: float
    excitatory: list[RepresenterEntry]  # descending by value
    inhibitory: list[RepresenterEntry]  # ascending by value
    activation_sum: float  # sum of value over every scanned training patch
    patches_scanned: int
    patches_skipped: int

    def to_json_dict(self) -> dict[str, Any]:
        def entry(e: RepresenterEntry) -> dict[str, Any]:
            return {
                "image_id": e.image_id,
                "row": e.row,
                "col": e.col,
                "alpha": e.alpha,
                "similarity": e.similarity,
                "value": e.value,
            }

        return {
            "query": {
                "image_id": self.query_image_id,
                "row": self.query_row,
                "col": self.query_col,
            },
            "tau": self.tau,
            "constant_C": self.constant_c,
            "activation_sum": self.activation_sum,
            "patches_scanned": self.patches_scanned,
            "patches_skipped": self.patches_skipped,
            "excitatory": [entry(e) for e in self.excitatory],
            "inhibitory": [entry(e) for e in self.inhibitory],
        }


def _excitatory_key(e: RepresenterEntry):
    return (-e.value, e.image_id, e.row, e.col)


def _inhibitory_key(e: RepresenterEntry):
    return (e.value, e.image_id, e.row, e.col)


def representer_topk(
    manifest: DatasetManifest,
    tau: float,
    query_fm: FeatureMap,
    row: int,
    col: int,
    k: int,
    *,
    constant_c: float = 1.0,
    sample_rate: float = 1.0,
    seed: int = 0,
    split: str = "train",
) -> RepresenterResult:
    """Exact scan for the training patches driving one query patch's score.

    Every training patch contributes ``importance * cosine_similarity`` to
    the query patch's foreground score; the top-k (excitatory) and bottom-k
    (inhibitory) contributors are returned, ties broken by
    (image_id, row, col).  Zero-norm training patches have no direction and
    are skipped; their count is reported.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not (0 <= row < query_fm.height and 0 <= col < query_fm.width):
        raise QueryError(
            f"patch ({row}, {col}) outside grid "
            f"{query_fm.height}x{query_fm.width} of {query_fm.image_id!r}"
        )
    query_unit = normalize_feature(query_fm.data[:, row, col])
    if query_unit is None:
        raise QueryError(
            f"query patch ({row}, {col}) of {query_fm.image_id!r} has zero norm"
        )

    entries = sample_entries(manifest.split_entries(split), sample_rate, seed)
    if not entries:
        raise FitError(f"no {split!r} entries to scan")

    excitatory: list[RepresenterEntry] = []
    inhibitory: list[RepresenterEntry] = []
    activation_sum = 0.0
    scanned = 0
    skipped = 0

    for entry in entries:
        fm = read_feature_map(manifest.feature_file(entry), entry.image_id)
        if fm.channels != query_unit.size:
            raise FitError(
                f"{entry.image_id!r} has {fm.channels} channels, query has {query_unit.size}"
            )
        flat = fm.data.reshape(fm.channels, -1).astype(np.float64)
        norms = np.linalg.norm(flat, axis=0)
        nonzero = norms > 0.0
        alphas = (norms - tau) / constant_c
        sims = np.zeros_like(norms)
        sims[nonzero] = (query_unit @ flat[:, nonzero]) / norms[nonzero]
        values = alphas * sims

        scanned += int(np.count_nonzero(nonzero))
        skipped += int(norms.size - np.count_nonzero(nonzero))
        activation_sum += float(values[nonzero].sum())

        batch = [
            RepresenterEntry(
                image_id=entry.image_id,
                row=int(i) // fm.width,
                col=int(i) % fm.width,
                alpha=float(alphas[i]),
                similarity=float(sims[i]),
                value=float(alphas[i]) * float(sims[i]),
            )
            for i in np.flatnonzero(nonzero)
        ]
        excitatory = sorted(excitatory + batch, key=_excitatory_key)[:k]
        inhibitory = sorted(inhibitory + batch, key=_inhibitory_key)[:k]

    return RepresenterResult(
        query_image_id=query_fm.image_id,
        query_row=row,
        query_col=col,
        tau=float(tau),
        constant_c=float(constant_c),
        excitatory=excitatory,
        inhibitory=inhibitory,
        activation_sum=activation_sum,
        patches_scanned=scanned,
        patches_skipped=skipped,
    )
