"""From-scratch CNN engine: layers, presets, trainer, checkpoints."""

from .arch import (
    ArchitectureSpec,
    LayerSpec,
    PRESETS,
    alexnet_small,
    conv,
    dense,
    dropout,
    maxpool,
    preset,
    propagate_shapes,
    relu,
    softmax,
    vgg_small,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .layers import (
    Conv2d,
    Dense,
    Dropout,
    MaxPool2d,
    ReLU,
    Softmax,
    SoftmaxCrossEntropy,
)
from .network import Network, build, predict_probs
from .training import (
    EpochStats,
    GradCheckResult,
    TrainConfig,
    evaluate_arrays,
    grad_check,
    predict,
    tiles_to_arrays,
    train,
    train_arrays,
)

__all__ = [
    "ArchitectureSpec",
    "LayerSpec",
    "PRESETS",
    "alexnet_small",
    "vgg_small",
    "preset",
    "propagate_shapes",
    "conv",
    "relu",
    "maxpool",
    "dense",
    "dropout",
    "softmax",
    "Conv2d",
    "Dense",
    "Dropout",
    "MaxPool2d",
    "ReLU",
    "Softmax",
    "SoftmaxCrossEntropy",
    "Network",
    "build",
    "predict_probs",
    "TrainConfig",
    "EpochStats",
    "GradCheckResult",
    "train",
    "train_arrays",
    "predict",
    "evaluate_arrays",
    "grad_check",
    "tiles_to_arrays",
    "load_checkpoint",
    "save_checkpoint",
]
