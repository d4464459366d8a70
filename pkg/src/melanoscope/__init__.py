"""Melanoma detection and localization in whole-slide images."""

from .classifier import (
    ANCHOR_COLORS,
    BackendDescriptor,
    ProbabilityVector,
    load_backend,
    predict,
)
from .decision import (
    LocalizationMap,
    SlideVerdict,
    Thresholds,
    assign_class,
    build_map,
    calibrate,
    malignancy_ratio,
    render_map,
    slide_verdict,
)
from .evaluation import ConfusionMatrix, MetricsReport, confusion, metrics
from .labels import CLASS_ORDER, Label, PatchClass, Verdict
from .pipeline import PipelineConfig
from .slide_io import (
    AnnotationSet,
    RgbTile,
    SlideHandle,
    level_for_magnification,
    load_annotations,
    open_slide,
    read_region,
)
from .synthgen import Blob, SynthSpec, generate_slide
from .tiling import (
    BinaryMask,
    LabelMask,
    NormalizationStats,
    PatchRecord,
    augment_patch,
    compute_channel_stats,
    extract_patch,
    foreground_mask,
    normalize_patch,
    plan_patches,
    rasterize_annotations,
    rgb_to_hsv,
)

__version__ = "0.1.0"
