"""Desk-scale chest X-ray screening pipeline.

Dataset assembly with patient-level splits, deterministic preprocessing,
seeded augmentation, a light-weight PRPE-block network, exact confusion
metrics with a deployment constraint gate, analytic complexity accounting,
and occlusion-based explanations. See the README for the CLI walk-through.
"""

from .architecture import (
    ArchSpec,
    ConvNet,
    LayerKind,
    LayerSpec,
    PRPEBlockSpec,
    SpecError,
    build_model,
    cxr2_tiny,
    load_checkpoint,
    load_spec,
    resolve_spec,
    save_checkpoint,
    save_spec,
    spec_hash,
)
from .augmentation import AugmentConfig, augment, augment_indexed
from .complexity import ComplexityReport, complexity_report, count_macs, count_params
from .estimators import CXRAugmenter, CXRPreprocessor, CXRScreeningClassifier
from .explain import CriticalFactorMask, identify_critical_factors, render_overlay, write_mask
from .manifest import (
    DatasetManifest,
    Finding,
    ImageRecord,
    IntegrityError,
    Label,
    SchemaError,
    Sex,
    SourceSchema,
    SplitError,
    SplitName,
    TestSplitSpec,
    View,
    demographic_summary,
    ingest_source,
    read_manifest,
    split_patient_level,
    unify,
    write_manifest,
)
from .metrics import (
    ConfusionMatrix,
    MetricsReport,
    confusion,
    metrics_from_confusion,
    render_headline,
    render_report,
)
from .preprocessing import crop_top, flip_horizontal, load_image, normalize, preprocess, resize
from .training import (
    ConstraintSpec,
    TrainConfig,
    TrainHistory,
    TrainingError,
    balanced_batches,
    check_constraints,
    fit_arrays,
    rebalanced_batches,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "ArchSpec",
    "AugmentConfig",
    "ComplexityReport",
    "ConfusionMatrix",
    "ConstraintSpec",
    "ConvNet",
    "CriticalFactorMask",
    "CXRAugmenter",
    "CXRPreprocessor",
    "CXRScreeningClassifier",
    "DatasetManifest",
    "Finding",
    "ImageRecord",
    "IntegrityError",
    "Label",
    "LayerKind",
    "LayerSpec",
    "MetricsReport",
    "PRPEBlockSpec",
    "SchemaError",
    "Sex",
    "SourceSchema",
    "SpecError",
    "SplitError",
    "SplitName",
    "TestSplitSpec",
    "TrainConfig",
    "TrainHistory",
    "TrainingError",
    "View",
    "augment",
    "augment_indexed",
    "balanced_batches",
    "build_model",
    "check_constraints",
    "complexity_report",
    "confusion",
    "count_macs",
    "count_params",
    "crop_top",
    "cxr2_tiny",
    "demographic_summary",
    "fit_arrays",
    "flip_horizontal",
    "identify_critical_factors",
    "ingest_source",
    "load_checkpoint",
    "load_image",
    "load_spec",
    "metrics_from_confusion",
    "normalize",
    "preprocess",
    "read_manifest",
    "rebalanced_batches",
    "render_headline",
    "render_overlay",
    "render_report",
    "resize",
    "resolve_spec",
    "save_checkpoint",
    "save_spec",
    "spec_hash",
    "split_patient_level",
    "train",
    "unify",
    "write_manifest",
    "write_mask",
]
