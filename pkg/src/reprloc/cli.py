"""Command-line surface: fit, infer, eval, explain, synth, serve.

Exit codes: 0 success, 1 usage error, 2 data error (missing or malformed
files, inconsistent datasets, metric preconditions).  Output files are
written atomically (temp file + rename).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import featstore
from .core import (
    DataError,
    ForegroundPredictor,
    fit,
    load_predictor,
    representer_topk,
    save_predictor,
)
from .featstore import load_manifest, read_feature_map, write_feature_map, FeatureMap
from .localize import draw_box_outline, localize, map_to_pgm_bytes
from .metrics import (
    METRICS,
    evaluate,
    evaluate_tau_sweep,
    load_class_predictions,
)
from .synth import SynthSpec, generate_synthetic


class _Parser(argparse.ArgumentParser):
    """argparse with exit code 1 (not 2) on usage errors."""

    def error(self, message: str):  # noqa: D102
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _linspace_arg(text: str) -> np.ndarray:
    parts = text.split(":")
    try:
        lo, hi, n = float(parts[0]), float(parts[1]), int(parts[2])
    except (ValueError, IndexError):
        raise argparse.ArgumentTypeError(f"must look like lo:hi:n, got {text!r}")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"must look like lo:hi:n, got {text!r}")
    if n < 1:
        raise argparse.ArgumentTypeError("point count must be >= 1")
    if hi < lo:
        raise argparse.ArgumentTypeError("hi must be >= lo")
    return np.linspace(lo, hi, n)


def _patch_arg(text: str) -> tuple[int, int]:
    parts = text.split(",")
    try:
        if len(parts) != 2:
            raise ValueError
        return int(parts[0]), int(parts[1])
    except ValueError:
        raise argparse.ArgumentTypeError(f"must look like ROW,COL, got {text!r}")


def _write_json(path: Path, doc) -> None:
    featstore._atomic_write_bytes(path, json.dumps(doc, indent=2).encode("utf-8") + b"\n")


def _load_predictors(path: Path) -> list[ForegroundPredictor]:
    """A predictor argument is either one JSON file or a directory of them."""
    if path.is_dir():
        files = sorted(path.glob("*.json"))
        if not files:
            raise DataError(f"{path}: no predictor files in directory")
        return [load_predictor(f) for f in files]
    return [load_predictor(path)]


def build_parser() -> _Parser:
    parser = _Parser(prog="reprloc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit foreground predictor(s) from a manifest")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--classwise", action="store_true")
    p.add_argument("--sample-rate", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tau-override", type=float, default=None)
    p.add_argument("--constant-c", type=float, default=1.0)
    p.add_argument("--global-tau", action="store_true",
                   help="classwise mode: share the pooled threshold across classes")
    p.add_argument("--kahan", action="store_true",
                   help="compensated summation for very long streams")
    p.add_argument("--threads", type=int, default=None)

    p = sub.add_parser("infer", help="localize every image of a split")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--predictor", required=True, type=Path)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--split", choices=featstore.SPLITS, default="test")
    p.add_argument("--connectivity", type=int, choices=(4, 8), default=4)
    p.add_argument("--policy", choices=("largest", "all"), default="largest")
    p.add_argument("--emit-maps", action="store_true")
    p.add_argument("--emit-overlays", action="store_true")

    p = sub.add_parser("eval", help="run one metric over a split")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--predictor", type=Path, default=None)
    p.add_argument("--metric", required=True, choices=METRICS)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--split", choices=featstore.SPLITS, default="test")
    p.add_argument("--delta", type=float, default=0.5)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--theta-grid", type=_linspace_arg, default=None, metavar="lo:hi:n")
    p.add_argument("--predictions", type=Path, default=None)
    p.add_argument("--connectivity", type=int, choices=(4, 8), default=4)
    p.add_argument("--policy", choices=("largest", "all"), default="largest")
    p.add_argument("--piou-per-image", action="store_true")
    p.add_argument("--per-image-csv", type=Path, default=None)
    p.add_argument("--tau-sweep", type=_linspace_arg, default=None, metavar="lo:hi:n",
                   help="re-finalize at n thresholds and report metric vs threshold")
    p.add_argument("--fit-manifest", type=Path, default=None,
                   help="manifest to accumulate for --tau-sweep (default: --manifest)")
    p.add_argument("--sample-rate", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("explain", help="rank the training patches behind one patch score")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--image", required=True)
    p.add_argument("--patch", required=True, type=_patch_arg, metavar="ROW,COL")
    p.add_argument("--topk", type=int, default=10)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--predictor", type=Path, default=None,
                   help="reuse a fitted predictor's threshold (default: refit)")
    p.add_argument("--sample-rate", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synth", help="generate a synthetic planted-box dataset")
    p.add_argument("--spec", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("serve", help="serve the read-only inspection API")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--predictor", required=True, type=Path)
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--k-max", type=int, default=256)
    p.add_argument("--ui-dir", type=Path, default=None,
                   help="static directory to serve at / (the inspector bundle)")

    return parser


def _cmd_fit(args) -> int:
    manifest = load_manifest(args.manifest)
    predictors = fit(
        manifest,
        classwise=args.classwise,
        sample_rate=args.sample_rate,
        seed=args.seed,
        constant_c=args.constant_c,
        tau_override=args.tau_override,
        per_class_tau=not args.global_tau,
        use_kahan=args.kahan,
        threads=args.threads,
    )
    if args.classwise:
        args.out.mkdir(parents=True, exist_ok=True)
        for pred in predictors:
            save_predictor(pred, args.out / f"class_{pred.class_id:05d}.json")
        print(f"wrote {len(predictors)} predictors to {args.out}")
    else:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        save_predictor(predictors[0], args.out)
        print(f"wrote predictor to {args.out} (tau={predictors[0].tau:.6g})")
    return 0


def _cmd_infer(args) -> int:
    manifest = load_manifest(args.manifest)
    predictors = _load_predictors(args.predictor)
    from .metrics import _predictor_for

    entries = manifest.split_entries(args.split)
    if not entries:
        raise DataError(f"manifest has no {args.split!r} entries")
    args.out.mkdir(parents=True, exist_ok=True)
    for entry in entries:
        pred = _predictor_for(entry, predictors)
        fm = read_feature_map(manifest.feature_file(entry), entry.image_id)
        result = localize(
            fm, pred, args.threshold, entry.image_width, entry.image_height,
            args.connectivity, args.policy,
        )
        doc = {
            "image_id": entry.image_id,
            "threshold": result.threshold,
            "degenerate": result.degenerate,
            "chosen_box": list(result.chosen_box.as_tuple()) if result.chosen_box else None,
            "boxes": [
                {"x0": b.x0, "y0": b.y0, "x1": b.x1, "y1": b.y1, "area": b.area}
                for b in result.boxes
            ],
        }
        _write_json(args.out / f"{entry.image_id}.boxes.json", doc)
        if args.emit_maps or args.emit_overlays:
            from .localize import activation_map, upsample_bilinear

            am = activation_map(fm, pred)
            upsampled = upsample_bilinear(
                am.normalized, entry.image_width, entry.image_height
            )
            if args.emit_maps:
                featstore.write_pgm(
                    args.out / f"{entry.image_id}.map.pgm", map_to_pgm_bytes(upsampled)
                )
                write_feature_map(
                    FeatureMap(entry.image_id, am.raw[None, :, :].astype(np.float32)),
                    args.out / f"{entry.image_id}.raw.rpsf",
                )
            if args.emit_overlays:
                overlay = map_to_pgm_bytes(upsampled)
                if result.chosen_box is not None:
                    overlay = draw_box_outline(overlay, result.chosen_box)
                featstore.write_pgm(args.out / f"{entry.image_id}.overlay.pgm", overlay)
    print(f"localized {len(entries)} images into {args.out}")
    return 0


def _cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    theta_grid = args.theta_grid
    predictions = (
        load_class_predictions(args.predictions) if args.predictions else None
    )

    if args.tau_sweep is not None:
        taus = args.tau_sweep
        fit_manifest = (
            load_manifest(args.fit_manifest) if args.fit_manifest else manifest
        )
        sweep = evaluate_tau_sweep(
            fit_manifest,
            manifest,
            taus,
            args.metric,
            sample_rate=args.sample_rate,
            seed=args.seed,
            split=args.split,
            delta=args.delta,
            threshold=args.threshold,
            theta_grid=theta_grid,
            predictions=predictions,
            connectivity=args.connectivity,
            policy=args.policy,
            piou_per_image=args.piou_per_image,
        )
        _write_json(args.out, sweep)
        print(
            f"{args.metric} tau sweep: default tau {sweep['default_tau']:.6g} -> "
            f"{sweep['default_value']:.6g}; sweep max {max(sweep['values']):.6g}"
        )
        return 0

    if args.predictor is None:
        raise DataError("eval needs --predictor (or --tau-sweep)")
    predictors = _load_predictors(args.predictor)
    report = evaluate(
        manifest,
        predictors,
        args.metric,
        split=args.split,
        delta=args.delta,
        threshold=args.threshold,
        theta_grid=theta_grid,
        predictions=predictions,
        connectivity=args.connectivity,
        policy=args.policy,
        piou_per_image=args.piou_per_image,
    )
    _write_json(args.out, report.to_json_dict())
    if args.per_image_csv is not None and report.per_image is not None:
        lines = ["image_id,best_iou,hit"]
        for image_id, detail in report.per_image.items():
            if isinstance(detail, dict):
                lines.append(
                    f"{image_id},{detail['best_iou']},{int(detail['loc_hit'] and detail['cls_hit'])}"
                )
            else:
                lines.append(f"{image_id},{detail},{int(detail > args.delta)}")
        featstore._atomic_write_bytes(
            args.per_image_csv, ("\n".join(lines) + "\n").encode("utf-8")
        )
    print(f"{args.metric} = {report.value:.6g}")
    return 0


def _cmd_explain(args) -> int:
    manifest = load_manifest(args.manifest)
    row, col = args.patch
    entry = None
    try:
        entry = manifest.entry(args.image)
    except KeyError:
        raise DataError(f"image {args.image!r} not in manifest")
    query_fm = read_feature_map(manifest.feature_file(entry), entry.image_id)

    if args.predictor is not None:
        pred = load_predictor(args.predictor)
        tau, constant_c = pred.tau, pred.constant_c
    else:
        fitted = fit(manifest, sample_rate=args.sample_rate, seed=args.seed)
        pred = fitted[0]
        tau, constant_c = pred.tau, pred.constant_c

    result = representer_topk(
        manifest, tau, query_fm, row, col, args.topk,
        constant_c=constant_c,
        sample_rate=args.sample_rate,
        seed=args.seed,
    )
    doc = result.to_json_dict()
    from .core import normalize_feature

    unit = normalize_feature(query_fm.data[:, row, col])
    doc["activation"] = float(pred.weights @ unit) if unit is not None else None
    _write_json(args.out, doc)
    top = result.excitatory[0] if result.excitatory else None
    if top:
        print(
            f"top excitatory patch: {top.image_id} ({top.row},{top.col}) "
            f"value {top.value:.6g}"
        )
    return 0


def _cmd_synth(args) -> int:
    spec = SynthSpec.from_json(args.spec)
    manifest = generate_synthetic(spec, args.out)
    print(f"wrote {len(manifest.entries)} images to {args.out}")
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import ServiceState, create_app

    manifest = load_manifest(args.manifest)
    predictors = _load_predictors(args.predictor)
    state = ServiceState.build(manifest, predictors, k_max=args.k_max)
    app = create_app(state, ui_dir=args.ui_dir)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


_COMMANDS = {
    "fit": _cmd_fit,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "explain": _cmd_explain,
    "synth": _cmd_synth,
    "serve": _cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except ValueError as exc:
        print(f"reprloc {args.command}: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError) as exc:
        print(f"reprloc {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
