"""Layers of the from-scratch CNN engine.

Each layer caches what its backward pass needs during forward. Convolution
is computed as one matmul per kernel offset over shifted input views,
which keeps buffers small and BLAS busy without unrolling an im2col
matrix. Everything runs in the dtype the network was built with (float64
for verification, float32 allowed for speed).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ValidationError


def conv_out_size(n: int, kernel: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - kernel) // stride + 1


class Conv2d:
    kind = "conv"

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.weights = None  # (out_ch, in_ch, k, k)
        self.bias = None  # (out_ch,)
        self.dweights = None
        self.dbias = None
        self._xp = None
        self._in_shape = None
        self._cols = None

    def init_params(self, rng: np.random.Generator, dtype) -> None:
        fan_in = self.in_channels * self.kernel * self.kernel
        std = np.sqrt(2.0 / fan_in)
        shape = (self.out_channels, self.in_channels, self.kernel, self.kernel)
        self.weights = (rng.normal(0.0, std, size=shape)).astype(dtype)
        self.bias = np.zeros(self.out_channels, dtype=dtype)

    def _unroll(self, xp: np.ndarray, oh: int, ow: int) -> np.ndarray:
        """Gather kernel-offset slices into a (n, c*k*k, oh*ow) stack.

        The (c, ky, kx) ordering matches weights.reshape(out, -1); each of
        the k*k assignments is a plain strided copy (no axis permutation),
        which is what this layout buys over a flat im2col matrix.
        """
        n = xp.shape[0]
        k, s = self.kernel, self.stride
        cols = np.empty((n, self.in_channels, k, k, oh, ow), dtype=xp.dtype)
        for ky in range(k):
            for kx in range(k):
                cols[:, :, ky, kx] = xp[
                    :, :, ky : ky + (oh - 1) * s + 1 : s, kx : kx + (ow - 1) * s + 1 : s
                ]
        return cols.reshape(n, self.in_channels * k * k, oh * ow)

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ValidationError(
                f"conv expects {self.in_channels} input channels, got {c}"
            )
        k, s, p = self.kernel, self.stride, self.padding
        oh, ow = conv_out_size(h, k, s, p), conv_out_size(w, k, s, p)
        if oh < 1 or ow < 1:
            raise ValidationError(f"kernel {k} does not fit {h}x{w} input")
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        self._xp = xp
        self._in_shape = x.shape
        cols = self._unroll(xp, oh, ow)
        self._cols = cols if train else None  # backward reuses the unroll
        wf = self.weights.reshape(self.out_channels, -1)
        out = wf @ cols  # batched over n: (out, ckk) x (n, ckk, ohow)
        out += self.bias[:, None]
        return out.reshape(n, self.out_channels, oh, ow)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        xp = self._xp
        n, _, h, w = self._in_shape
        k, s, p = self.kernel, self.stride, self.padding
        _, _, oh, ow = dout.shape
        dflat = dout.reshape(n, self.out_channels, oh * ow)
        cols = self._cols if self._cols is not None else self._unroll(xp, oh, ow)
        self._cols = None
        dw = np.matmul(dflat, cols.transpose(0, 2, 1)).sum(axis=0)
        self.dweights = dw.reshape(self.weights.shape)
        self.dbias = dout.sum(axis=(0, 2, 3))
        wf = self.weights.reshape(self.out_channels, -1)
        dcols = np.matmul(wf.T, dflat).reshape(n, self.in_channels, k, k, oh, ow)
        dxp = np.zeros_like(xp)
        for ky in range(k):
            for kx in range(k):
                dxp[:, :, ky : ky + (oh - 1) * s + 1 : s, kx : kx + (ow - 1) * s + 1 : s] += (
                    dcols[:, :, ky, kx]
                )
        return dxp[:, :, p : p + h, p : p + w] if p else dxp

    def __repr__(self):
        return (
            f"Conv2d({self.in_channels}->{self.out_channels}, k={self.kernel}, "
            f"s={self.stride}, p={self.padding})"
        )


class MaxPool2d:
    kind = "maxpool"

    def __init__(self, window, stride=None):
        self.window = window
        self.stride = stride if stride is not None else window
        self._argmax = None
        self._in_shape = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        n, c, h, w = x.shape
        k, s = self.window, self.stride
        if k > h or k > w:
            raise ValidationError(f"pool window {k} larger than {h}x{w} input")
        self._in_shape = x.shape
        if k == 2 and s == 2:
            # fast path: compare the four phase views directly; strict >
            # comparisons keep the first-in-scan-order tie-break
            oh, ow = (h - 2) // 2 + 1, (w - 2) // 2 + 1
            p00 = x[:, :, 0 : 2 * oh : 2, 0 : 2 * ow : 2]
            p01 = x[:, :, 0 : 2 * oh : 2, 1 : 2 * ow : 2]
            p10 = x[:, :, 1 : 2 * oh : 2, 0 : 2 * ow : 2]
            p11 = x[:, :, 1 : 2 * oh : 2, 1 : 2 * ow : 2]
            top = np.maximum(p00, p01)
            bot = np.maximum(p10, p11)
            out = np.maximum(top, bot)
            idx = np.where(bot > top, 2 + (p11 > p10), (p01 > p00).astype(np.int64))
            self._argmax = idx
            return out
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        oh, ow = win.shape[2], win.shape[3]
        flat = win.reshape(n, c, oh, ow, k * k)
        # first index in row-major scan order wins ties
        self._argmax = flat.argmax(axis=-1)
        return flat.max(axis=-1)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        n, c, oh, ow = dout.shape
        k, s = self.window, self.stride
        dx = np.zeros(self._in_shape, dtype=dout.dtype)
        if s >= k:
            # windows never overlap: scatter with one put_along_axis
            flat = np.zeros((n, c, oh, ow, k * k), dtype=dout.dtype)
            np.put_along_axis(flat, self._argmax[..., None], dout[..., None], axis=-1)
            win = flat.reshape(n, c, oh, ow, k, k)
            for ky in range(k):
                for kx in range(k):
                    dx[:, :, ky : ky + (oh - 1) * s + 1 : s, kx : kx + (ow - 1) * s + 1 : s] += win[
                        :, :, :, :, ky, kx
                    ]
        else:
            ni, ci, oyi, oxi = np.ix_(np.arange(n), np.arange(c), np.arange(oh), np.arange(ow))
            yy = oyi * s + self._argmax // k
            xx = oxi * s + self._argmax % k
            np.add.at(dx, (ni, ci, yy, xx), dout)
        return dx

    def __repr__(self):
        return f"MaxPool2d(k={self.window}, s={self.stride})"


class Dense:
    kind = "dense"

    def __init__(self, in_features, out_features):
        self.in_features = in_features
        self.out_features = out_features
        self.weights = None  # (in, out)
        self.bias = None
        self.dweights = None
        self.dbias = None
        self._x = None
        self._in_shape = None

    def init_params(self, rng: np.random.Generator, dtype) -> None:
        std = np.sqrt(2.0 / self.in_features)
        self.weights = (rng.normal(0.0, std, size=(self.in_features, self.out_features))).astype(dtype)
        self.bias = np.zeros(self.out_features, dtype=dtype)

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        self._in_shape = x.shape
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.in_features:
            raise ValidationError(
                f"dense expects {self.in_features} features, got {flat.shape[1]}"
            )
        self._x = flat
        return flat @ self.weights + self.bias

    def backward(self, dout: np.ndarray) -> np.ndarray:
        self.dweights = self._x.T @ dout
        self.dbias = dout.sum(axis=0)
        return (dout @ self.weights.T).reshape(self._in_shape)

    def __repr__(self):
        return f"Dense({self.in_features}->{self.out_features})"


class ReLU:
    kind = "relu"

    def __init__(self):
        self._mask = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        # subgradient at exactly 0 is taken as 0
        self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return dout * self._mask

    def __repr__(self):
        return "ReLU()"


class Dropout:
    kind = "dropout"

    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ValidationError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng: np.random.Generator | None = None  # wired in by the network
        self._mask = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        keep = 1.0 - self.rate
        mask = (self.rng.random(x.shape) >= self.rate).astype(x.dtype) / keep
        self._mask = mask
        return x * mask

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._mask is None:
            return dout
        return dout * self._mask

    def __repr__(self):
        return f"Dropout(rate={self.rate})"


class Softmax:
    kind = "softmax"

    def __init__(self):
        self._probs = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        self._probs = e / e.sum(axis=1, keepdims=True)
        return self._probs

    def backward(self, dout: np.ndarray) -> np.ndarray:
        p = self._probs
        return p * (dout - (dout * p).sum(axis=1, keepdims=True))

    def __repr__(self):
        return "Softmax()"


class SoftmaxCrossEntropy:
    """Mean softmax cross-entropy over a batch of logits."""

    def __init__(self):
        self._probs = None
        self._labels = None

    def forward(self, logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
        labels = np.asarray(labels)
        if labels.min(initial=0) < 0 or labels.max(initial=0) >= logits.shape[1]:
            raise ValidationError("label outside [0, class_count)")
        shifted = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_probs = shifted - log_z
        probs = np.exp(log_probs)
        n = logits.shape[0]
        loss = float(-log_probs[np.arange(n), labels].mean())
        self._probs = probs
        self._labels = labels
        return loss, probs

    def backward(self, dtype=np.float64) -> np.ndarray:
        n = self._probs.shape[0]
        grad = self._probs.copy()
        grad[np.arange(n), self._labels] -= 1.0
        return (grad / n).astype(dtype)
