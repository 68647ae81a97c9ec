"""smearscreen: blood-smear screening pipeline.

Tiling and blurring of large grayscale microscopy images, circular-Hough
cell detection, dihedral tile augmentation, a from-scratch CNN engine with
two small presets, stratified cross-validation, and the binary-screening
metric suite. A seeded synthetic smear generator makes the whole pipeline
testable end to end.
"""

from .errors import (
    CheckpointError,
    ImageFormatError,
    SmearScreenError,
    TrainingDiverged,
    ValidationError,
)
from .imagecore import (
    DEFAULT_TILE_SIZE,
    LABEL_HEALTHY,
    LABEL_INFECTED,
    LABELS,
    FloatPlane,
    Raster,
    Tile,
    gaussian_blur,
    load_raster,
    save_float_plane,
    save_raster,
    tile_grid,
    to_float,
    to_raster,
)
from .celldetect import (
    CircleHit,
    DetectionReport,
    GradientField,
    detection_metrics,
    hough_circles,
    select_complete_cell_tiles,
    sobel_gradients,
)
from .dataset import (
    FoldSplit,
    LabeledTile,
    NormalizationStats,
    SynthSmear,
    balance_by_augmentation,
    compute_mean,
    dihedral_variants,
    load_annotations,
    normalize,
    stratified_holdout,
    stratified_kfold,
    synth_smear,
)
from .evaluate import (
    ConfusionMatrix,
    CvReport,
    MetricsReport,
    confusion,
    cross_validate,
    dump_feature_maps,
    export_curves,
    metrics,
)

__version__ = "0.1.0"
