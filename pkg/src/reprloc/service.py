"""Read-only HTTP API over a fitted predictor and its feature store.

State is built once at startup and never mutated; every response is a pure
function of (state, request), so identical requests return identical bytes.
Numeric payloads come from the same library calls the CLI uses, which makes
the two surfaces interchangeable oracles for each other.

Endpoints (all GET, JSON):
    /v1/meta                      predictor provenance and thresholds
    /v1/images                    id list with geometry and ground truth
    /v1/activation/{id}           raw + normalized patch scores
    /v1/localize/{id}             boxes, chosen box, image-resolution mask
    /v1/representer/{id}          ranked training patches for one patch
    /v1/importance/{id}           per-patch importance grid
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Query
from fastapi.middleware.cors import CORSMiddleware

from .core import (
    ForegroundPredictor,
    QueryError,
    importance_map,
    normalize_feature,
    representer_topk,
)
from .featstore import (
    DatasetManifest,
    FeatureMap,
    ManifestEntry,
    read_feature_header,
    read_feature_map,
)
from .localize import activation_map, localize
from .metrics import EvalInputError, _predictor_for


@dataclass
class ServiceState:
    """Immutable artifacts the handlers read from."""

    manifest: DatasetManifest
    predictors: list[ForegroundPredictor]
    k_max: int = 256
    grids: dict[str, tuple[int, int, int]] = field(default_factory=dict)  # id -> (C, H, W)
    alpha_cache: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def build(
        cls,
        manifest: DatasetManifest,
        predictors: list[ForegroundPredictor],
        k_max: int = 256,
    ) -> "ServiceState":
        """Read every header and precompute importance grids up front.

        Trades startup time for per-request latency: importance values are
        ready, so a representer query costs one similarity pass.
        """
        state = cls(manifest=manifest, predictors=predictors, k_max=k_max)
        for entry in manifest.entries:
            state.grids[entry.image_id] = read_feature_header(
                manifest.feature_file(entry)
            )
        for entry in manifest.entries:
            fm = read_feature_map(manifest.feature_file(entry), entry.image_id)
            pred = state.predictor_for(entry)
            state.alpha_cache[entry.image_id] = importance_map(
                fm, pred.tau, pred.constant_c
            ).alpha
        return state

    def entry(self, image_id: str) -> ManifestEntry:
        try:
            return self.manifest.entry(image_id)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown image {image_id!r}")

    def predictor_for(self, entry: ManifestEntry) -> ForegroundPredictor:
        try:
            return _predictor_for(entry, self.predictors)
        except EvalInputError as exc:
            raise HTTPException(status_code=404, detail=str(exc))

    def feature_map(self, entry: ManifestEntry) -> FeatureMap:
        return read_feature_map(self.manifest.feature_file(entry), entry.image_id)


def _mask_rows(mask: np.ndarray) -> list[str]:
    return ["".join("1" if v else "0" for v in row) for row in mask]


def create_app(state: ServiceState, ui_dir: Path | None = None) -> FastAPI:
    app = FastAPI(title="reprloc inspection API", docs_url=None, redoc_url=None)
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["GET"],
        allow_headers=["*"],
    )

    @app.get("/v1/meta")
    def meta():
        return {
            "dim": state.predictors[0].dim,
            "k_max": state.k_max,
            "predictors": [
                {
                    "class_id": p.class_id,
                    "tau": p.tau,
                    "constant_C": p.constant_c,
                    "provenance": p.provenance,
                }
                for p in state.predictors
            ],
        }

    @app.get("/v1/images")
    def images():
        out = []
        for entry in state.manifest.entries:
            _, h, w = state.grids[entry.image_id]
            out.append(
                {
                    "image_id": entry.image_id,
                    "split": entry.split,
                    "image_width": entry.image_width,
                    "image_height": entry.image_height,
                    "grid_height": h,
                    "grid_width": w,
                    "class_id": entry.class_id,
                    "gt_boxes": [list(b.as_tuple()) for b in entry.gt_boxes or []],
                }
            )
        return {"images": out}

    @app.get("/v1/activation/{image_id}")
    def activation(image_id: str):
        entry = state.entry(image_id)
        fm = state.feature_map(entry)
        am = activation_map(fm, state.predictor_for(entry))
        return {
            "image_id": image_id,
            "grid_height": fm.height,
            "grid_width": fm.width,
            "raw": [float(v) for v in am.raw.ravel()],
            "normalized": [float(v) for v in am.normalized.ravel()],
            "degenerate": am.degenerate,
        }

    @app.get("/v1/localize/{image_id}")
    def localize_image(
        image_id: str,
        theta: float = Query(0.5),
        conn: int = Query(4),
        policy: str = Query("largest"),
    ):
        entry = state.entry(image_id)
        if not (0.0 <= theta <= 1.0):
            raise HTTPException(
                status_code=400, detail=f"theta must be in [0, 1], got {theta}"
            )
        if conn not in (4, 8):
            raise HTTPException(status_code=400, detail=f"conn must be 4 or 8, got {conn}")
        if policy not in ("largest", "all"):
            raise HTTPException(
                status_code=400, detail=f"policy must be 'largest' or 'all', got {policy!r}"
            )
        fm = state.feature_map(entry)
        pred = state.predictor_for(entry)
        result = localize(
            fm, pred, theta, entry.image_width, entry.image_height, conn, policy
        )
        am = activation_map(fm, pred)
        return {
            "image_id": image_id,
            "theta": result.threshold,
            "degenerate": result.degenerate,
            "boxes": [
                {"x0": b.x0, "y0": b.y0, "x1": b.x1, "y1": b.y1, "area": b.area}
                for b in result.boxes
            ],
            "chosen_box": list(result.chosen_box.as_tuple()) if result.chosen_box else None,
            "grid_height": fm.height,
            "grid_width": fm.width,
            "normalized": [float(v) for v in am.normalized.ravel()],
            "mask": {
                "width": entry.image_width,
                "height": entry.image_height,
                "rows": _mask_rows(result.mask),
            },
        }

    @app.get("/v1/representer/{image_id}")
    def representer(
        image_id: str,
        row: int = Query(...),
        col: int = Query(...),
        k: int = Query(10),
        polarity: str = Query("both"),
    ):
        entry = state.entry(image_id)
        if polarity not in ("excitatory", "inhibitory", "both"):
            raise HTTPException(
                status_code=400,
                detail=f"polarity must be excitatory, inhibitory or both, got {polarity!r}",
            )
        if k < 1:
            raise HTTPException(status_code=400, detail=f"k must be >= 1, got {k}")
        if k > state.k_max:
            raise HTTPException(
                status_code=413, detail=f"k={k} exceeds the configured maximum {state.k_max}"
            )
        fm = state.feature_map(entry)
        if not (0 <= row < fm.height and 0 <= col < fm.width):
            raise HTTPException(
                status_code=400,
                detail=f"patch ({row}, {col}) outside grid {fm.height}x{fm.width}",
            )
        pred = state.predictor_for(entry)
        try:
            result = representer_topk(
                state.manifest, pred.tau, fm, row, col, k, constant_c=pred.constant_c
            )
        except QueryError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        doc = result.to_json_dict()
        unit = normalize_feature(fm.data[:, row, col])
        doc["activation"] = float(pred.weights @ unit) if unit is not None else None
        if polarity == "excitatory":
            doc.pop("inhibitory")
        elif polarity == "inhibitory":
            doc.pop("excitatory")
        return doc

    @app.get("/v1/importance/{image_id}")
    def importance(image_id: str):
        entry = state.entry(image_id)
        pred = state.predictor_for(entry)
        alpha = state.alpha_cache[entry.image_id]
        return {
            "image_id": image_id,
            "tau": pred.tau,
            "constant_C": pred.constant_c,
            "grid_height": int(alpha.shape[0]),
            "grid_width": int(alpha.shape[1]),
            "alpha": [float(v) for v in alpha.ravel()],
        }

    if ui_dir is not None:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app
