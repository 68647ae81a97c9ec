"""Network construction, forward/backward plumbing, and prediction."""

from __future__ import annotations

import numpy as np

from ..errors import ValidationError
from .arch import ArchitectureSpec, propagate_shapes
from .layers import Conv2d, Dense, Dropout, MaxPool2d, ReLU, Softmax, SoftmaxCrossEntropy


class Network:
    """An instantiated architecture: layer objects plus their parameters.

    Owns a seeded generator used for initialization and dropout masks, so
    (spec, seed) fully determines the parameter state and any training run
    on top of it.
    """

    def __init__(self, spec: ArchitectureSpec, layers: list, rng: np.random.Generator, dtype):
        self.spec = spec
        self.layers = layers
        self.rng = rng
        self.dtype = dtype

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def forward_collect(self, x: np.ndarray) -> list[np.ndarray]:
        """Inference pass that keeps every layer's output (for inspection)."""
        outputs = []
        for layer in self.layers:
            x = layer.forward(x, False)
            outputs.append(x)
        return outputs

    def backward(self, dout: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def parameters(self):
        """Yields (layer_index, layer, param_name) for every trainable tensor."""
        for i, layer in enumerate(self.layers):
            if hasattr(layer, "weights") and layer.weights is not None:
                yield i, layer, "weights"
                yield i, layer, "bias"

    def parameter_count(self) -> int:
        return sum(getattr(layer, name).size for _, layer, name in self.parameters())


def build(spec: ArchitectureSpec, seed: int, dtype=np.float64) -> Network:
    """Instantiate a spec with He-normal weights, zero biases, deterministic
    in the seed. Fails shape propagation before allocating anything."""
    shapes = propagate_shapes(spec)
    rng = np.random.default_rng(seed)
    layers = []
    in_shape: tuple[int, ...] = spec.input_shape
    for ls, out_shape in zip(spec.layers, shapes):
        if ls.kind == "conv":
            layer = Conv2d(in_shape[0], ls.out_channels, ls.kernel, ls.stride, ls.padding)
            layer.init_params(rng, dtype)
        elif ls.kind == "maxpool":
            layer = MaxPool2d(ls.window, ls.stride)
        elif ls.kind == "dense":
            n_in = 1
            for d in in_shape:
                n_in *= d
            layer = Dense(n_in, ls.out_features)
            layer.init_params(rng, dtype)
        elif ls.kind == "relu":
            layer = ReLU()
        elif ls.kind == "dropout":
            layer = Dropout(ls.rate)
        else:
            layer = Softmax()
        layers.append(layer)
        in_shape = out_shape
    net = Network(spec, layers, rng, dtype)
    for layer in net.layers:
        if isinstance(layer, Dropout):
            layer.rng = net.rng
    return net


def predict_probs(net: Network, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Class probabilities via inference-mode forward passes."""
    if x.shape[1:] != tuple(net.spec.input_shape):
        raise ValidationError(
            f"input {x.shape[1:]} does not match network input {net.spec.input_shape}"
        )
    xent = SoftmaxCrossEntropy()
    chunks = []
    for lo in range(0, x.shape[0], batch_size):
        logits = net.forward(x[lo : lo + batch_size].astype(net.dtype), train=False)
        if net.spec.layers[-1].kind == "softmax":
            chunks.append(logits.astype(np.float64))
        else:
            shifted = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
            e = np.exp(shifted)
            chunks.append(e / e.sum(axis=1, keepdims=True))
    return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, net.spec.class_count))
