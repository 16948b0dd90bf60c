"""Foreground localization over dense feature maps with ranked training-patch explanations."""

from .featstore import (
    BBox,
    DataError,
    DatasetManifest,
    FeatureMap,
    FormatError,
    InvariantError,
    ManifestEntry,
    ManifestError,
    ValidationReport,
    load_manifest,
    manifest_digest,
    read_feature_map,
    save_manifest,
    validate_dataset,
    write_feature_map,
)
from .core import (
    Accumulator,
    DegenerateDatasetError,
    FitError,
    ForegroundPredictor,
    ImportanceMap,
    QueryError,
    RepresenterEntry,
    RepresenterResult,
    accumulate,
    finalize_predictor,
    finalize_tau,
    fit,
    importance_map,
    load_predictor,
    merge,
    normalize_feature,
    representer_topk,
    save_predictor,
    tau_gram_oracle,
)
from .localize import (
    ActivationMap,
    LocalizationResult,
    activation_map,
    boxes_from_mask,
    localize,
    minmax_normalize,
    score_map,
    upsample_bilinear,
)
from .metrics import (
    EvalReport,
    evaluate,
    evaluate_tau_sweep,
    gt_known_loc,
    iou,
    max_box_acc_v2,
    piou,
    pxap,
    top_k_loc,
)
from .synth import SynthSpec, generate_synthetic

__version__ = "0.1.0"
