"""Architecture specifications, shape propagation, and the two presets."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from ..errors import ValidationError
from .layers import conv_out_size

VALID_KINDS = ("conv", "relu", "maxpool", "dense", "dropout", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: Optional[int] = None
    kernel: Optional[int] = None
    stride: Optional[int] = None
    padding: Optional[int] = None
    window: Optional[int] = None
    out_features: Optional[int] = None
    rate: Optional[float] = None

    def __post_init__(self):
        if self.kind not in VALID_KINDS:
            raise ValidationError(f"unknown layer kind {self.kind!r}")


def conv(out_channels: int, kernel: int, stride: int = 1, padding: int = 0) -> LayerSpec:
    if out_channels < 1 or kernel < 1 or stride < 1 or padding < 0:
        raise ValidationError("conv parameters must be positive (padding >= 0)")
    return LayerSpec("conv", out_channels=out_channels, kernel=kernel, stride=stride, padding=padding)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def maxpool(window: int, stride: Optional[int] = None) -> LayerSpec:
    if window < 1 or (stride is not None and stride < 1):
        raise ValidationError("maxpool parameters must be positive")
    return LayerSpec("maxpool", window=window, stride=stride if stride is not None else window)


def dense(out_features: int) -> LayerSpec:
    if out_features < 1:
        raise ValidationError("dense out_features must be positive")
    return LayerSpec("dense", out_features=out_features)


def dropout(rate: float) -> LayerSpec:
    if not 0.0 <= rate < 1.0:
        raise ValidationError(f"dropout rate must be in [0, 1), got {rate}")
    return LayerSpec("dropout", rate=rate)


def softmax() -> LayerSpec:
    return LayerSpec("softmax")


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int] = (1, 71, 71)
    class_count: int = 2

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))


def propagate_shapes(spec: ArchitectureSpec) -> list[tuple[int, ...]]:
    """Output shape after each layer; raises naming the offending layer."""
    shape: tuple[int, ...] = spec.input_shape
    shapes = []
    for i, layer in enumerate(spec.layers):
        where = f"layer {i} ({layer.kind})"
        if layer.kind == "conv":
            if len(shape) != 3:
                raise ValidationError(f"{where}: conv needs a (c, h, w) input, got {shape}")
            c, h, w = shape
            oh = conv_out_size(h, layer.kernel, layer.stride, layer.padding)
            ow = conv_out_size(w, layer.kernel, layer.stride, layer.padding)
            if oh < 1 or ow < 1:
                raise ValidationError(f"{where}: kernel {layer.kernel} does not fit {h}x{w}")
            shape = (layer.out_channels, oh, ow)
        elif layer.kind == "maxpool":
            if len(shape) != 3:
                raise ValidationError(f"{where}: maxpool needs a (c, h, w) input, got {shape}")
            c, h, w = shape
            if layer.window > h or layer.window > w:
                raise ValidationError(f"{where}: window {layer.window} larger than {h}x{w}")
            shape = (
                c,
                conv_out_size(h, layer.window, layer.stride, 0),
                conv_out_size(w, layer.window, layer.stride, 0),
            )
        elif layer.kind == "dense":
            n = 1
            for d in shape:
                n *= d
            shape = (layer.out_features,)
        elif layer.kind in ("relu", "dropout", "softmax"):
            pass
        else:  # pragma: no cover - guarded by LayerSpec
            raise ValidationError(f"{where}: unknown kind")
        shapes.append(shape)
    if shapes and shapes[-1] != (spec.class_count,):
        raise ValidationError(
            f"architecture ends at {shapes[-1]}, expected ({spec.class_count},)"
        )
    return shapes


def alexnet_small(dropout_rate: float = 0.5) -> ArchitectureSpec:
    """Five conv layers with mixed kernel sizes, big-then-small, for 71x71 input."""
    return ArchitectureSpec(
        name="alexnet-s",
        layers=(
            conv(16, 9, stride=2),
            relu(),
            maxpool(2, 2),
            conv(32, 5, padding=2),
            relu(),
            maxpool(2, 2),
            conv(48, 3, padding=1),
            relu(),
            conv(48, 3, padding=1),
            relu(),
            conv(32, 3, padding=1),
            relu(),
            maxpool(2, 2),
            dense(128),
            relu(),
            dropout(dropout_rate),
            dense(64),
            relu(),
            dropout(dropout_rate),
            dense(2),
        ),
    )


def vgg_small(dropout_rate: float = 0.5) -> ArchitectureSpec:
    """Thirteen 3x3 conv layers in five pooled blocks, channels scaled for CPU."""
    layers: list[LayerSpec] = []
    for channels, count in ((8, 2), (16, 2), (32, 3), (64, 3), (64, 3)):
        for _ in range(count):
            layers += [conv(channels, 3, padding=1), relu()]
        layers.append(maxpool(2, 2))
    layers += [dense(128), relu(), dropout(dropout_rate), dense(2)]
    return ArchitectureSpec(name="vgg-s", layers=tuple(layers))


PRESETS = {
    "alexnet-s": alexnet_small,
    "vgg-s": vgg_small,
}


def preset(name: str, dropout_rate: float = 0.5) -> ArchitectureSpec:
    if name not in PRESETS:
        raise ValidationError(f"unknown architecture {name!r}; options: {sorted(PRESETS)}")
    return PRESETS[name](dropout_rate)
