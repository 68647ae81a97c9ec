"""Minibatch SGD-with-momentum trainer and the gradient-check harness."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..dataset import LabeledTile
from ..errors import TrainingDiverged, ValidationError
from ..imagecore import LABELS
from .layers import Dropout, SoftmaxCrossEntropy
from .network import Network, predict_probs


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 0.0001
    dropout_rate: float = 0.5
    batch_size: int = 128
    momentum: float = 0.9
    seed: int = 0
    patience: Optional[int] = 10  # early stop when val accuracy stalls; None disables

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be positive")
        if self.learning_rate < 0 or self.momentum < 0:
            raise ValidationError("learning_rate and momentum must be nonnegative")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError("dropout_rate must be in [0, 1)")
        if self.patience is not None and self.patience < 1:
            raise ValidationError("patience must be positive or None")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float
    wall_time: float


def tiles_to_arrays(tiles: Sequence[LabeledTile], dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    """Stack tile planes into a (n, 1, h, w) batch plus integer labels."""
    if not tiles:
        size = 0
        return np.zeros((0, 1, size, size), dtype=dtype), np.zeros(0, dtype=np.int64)
    x = np.stack([t.tile.plane.values for t in tiles]).astype(dtype)[:, None, :, :]
    y = np.array([LABELS.index(t.label) for t in tiles], dtype=np.int64)
    return x, y


def evaluate_arrays(
    net: Network, x: np.ndarray, y: np.ndarray, batch_size: int = 128
) -> tuple[float, float]:
    """Mean loss and accuracy over a dataset with dropout off."""
    xent = SoftmaxCrossEntropy()
    total_loss = 0.0
    correct = 0
    for lo in range(0, x.shape[0], batch_size):
        xb = x[lo : lo + batch_size]
        yb = y[lo : lo + batch_size]
        logits = net.forward(xb, train=False)
        loss, probs = xent.forward(logits, yb)
        total_loss += loss * xb.shape[0]
        correct += int((probs.argmax(axis=1) == yb).sum())
    n = x.shape[0]
    return total_loss / n, correct / n


def _locate_nonfinite_layer(net: Network, x: np.ndarray) -> str:
    h = x
    for i, layer in enumerate(net.layers):
        h = layer.forward(h, train=False)
        if not np.isfinite(h).all():
            return f"layer {i} ({layer!r})"
    return "loss"


def train(
    net: Network,
    train_tiles: Sequence[LabeledTile],
    val_tiles: Sequence[LabeledTile],
    config: TrainConfig,
) -> list[EpochStats]:
    """SGD with momentum over shuffled minibatches (short final batch kept).

    Per-epoch losses/accuracies come from full inference-mode passes over
    the train and validation sets. Training halts early once validation
    accuracy has not improved for `patience` epochs. Non-finite loss aborts
    with the offending epoch, batch, and layer.
    """
    if not train_tiles:
        raise ValidationError("training set is empty")
    if not val_tiles:
        raise ValidationError("validation set is empty")
    x_tr, y_tr = tiles_to_arrays(train_tiles, net.dtype)
    x_val, y_val = tiles_to_arrays(val_tiles, net.dtype)
    return train_arrays(net, x_tr, y_tr, x_val, y_val, config)


def train_arrays(
    net: Network,
    x_tr: np.ndarray,
    y_tr: np.ndarray,
    x_val: np.ndarray,
    y_val: np.ndarray,
    config: TrainConfig,
) -> list[EpochStats]:
    for layer in net.layers:
        if isinstance(layer, Dropout):
            layer.rate = config.dropout_rate
    rng = np.random.default_rng(config.seed)
    xent = SoftmaxCrossEntropy()
    velocity = {
        (i, name): np.zeros_like(getattr(layer, name))
        for i, layer, name in net.parameters()
    }
    history: list[EpochStats] = []
    best_val = -1.0
    stale = 0
    n = x_tr.shape[0]
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo : lo + config.batch_size]
            xb, yb = x_tr[idx], y_tr[idx]
            logits = net.forward(xb, train=True)
            loss, _ = xent.forward(logits, yb)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, b, _locate_nonfinite_layer(net, xb))
            net.backward(xent.backward(net.dtype))
            for (i, name), vel in velocity.items():
                layer = net.layers[i]
                grad = getattr(layer, "d" + name)
                vel *= config.momentum
                vel -= config.learning_rate * grad
                getattr(layer, name)[...] += vel
        train_loss, train_acc = evaluate_arrays(net, x_tr, y_tr, config.batch_size)
        val_loss, val_acc = evaluate_arrays(net, x_val, y_val, config.batch_size)
        history.append(
            EpochStats(epoch, train_loss, train_acc, val_loss, val_acc, time.perf_counter() - t0)
        )
        if val_acc > best_val:
            best_val = val_acc
            stale = 0
        else:
            stale += 1
            if config.patience is not None and stale >= config.patience:
                break
    return history


def predict(net: Network, tiles: Sequence[LabeledTile], batch_size: int = 64) -> np.ndarray:
    """Per-tile class probabilities, rows matching the input order."""
    x, _ = tiles_to_arrays(tiles, net.dtype)
    return predict_probs(net, x, batch_size)


@dataclass(frozen=True)
class GradCheckResult:
    max_rel_error: float
    worst: str
    checked: int
    skipped: int = 0


def _activation_signature(net: Network) -> list[np.ndarray]:
    """Snapshot which linear piece each ReLU/maxpool is on after a forward."""
    sig = []
    for layer in net.layers:
        mask = getattr(layer, "_mask", None)
        if mask is not None and mask.dtype == bool:
            sig.append(mask.copy())
        argmax = getattr(layer, "_argmax", None)
        if argmax is not None:
            sig.append(argmax.copy())
    return sig


def grad_check(
    net: Network,
    x: np.ndarray,
    y: np.ndarray,
    epsilon: float = 1e-5,
    samples_per_tensor: Optional[int] = None,
    seed: int = 0,
) -> GradCheckResult:
    """Central-finite-difference check of every analytic parameter gradient.

    Runs with dropout off so the loss is a deterministic function of the
    parameters. samples_per_tensor bounds the work on big networks by
    checking a seeded random subset of each parameter tensor; None checks
    every entry.

    The loss of a ReLU/maxpool network is piecewise linear in each
    parameter; central differences are only meaningful when theta-eps and
    theta+eps land on the same piece. Perturbations that flip a ReLU sign
    or a pooling argmax (which happens systematically at dead units, whose
    pre-activations sit exactly on the kink) are skipped and counted.
    Relative error uses |a - f| / max(1e-6, |a| + |f|) so near-zero
    gradients compare on an absolute scale.
    """
    if net.dtype != np.float64:
        raise ValidationError("gradient checking requires a float64 network")
    xent = SoftmaxCrossEntropy()
    x = x.astype(net.dtype)

    def loss_at() -> float:
        logits = net.forward(x, train=False)
        loss, _ = xent.forward(logits, y)
        return loss

    loss_at()
    net.backward(xent.backward(net.dtype))
    rng = np.random.default_rng(seed)
    worst_err = 0.0
    worst_addr = "none"
    checked = 0
    skipped = 0
    for i, layer, name in net.parameters():
        param = getattr(layer, name)
        analytic = getattr(layer, "d" + name)
        flat = param.reshape(-1)
        if samples_per_tensor is None or samples_per_tensor >= flat.size:
            indices = np.arange(flat.size)
        else:
            indices = rng.choice(flat.size, size=samples_per_tensor, replace=False)
        for j in indices:
            orig = flat[j]
            flat[j] = orig + epsilon
            plus = loss_at()
            sig_plus = _activation_signature(net)
            flat[j] = orig - epsilon
            minus = loss_at()
            sig_minus = _activation_signature(net)
            flat[j] = orig
            if any(not np.array_equal(a, b) for a, b in zip(sig_plus, sig_minus)):
                skipped += 1
                continue
            fd = (plus - minus) / (2.0 * epsilon)
            a = float(analytic.reshape(-1)[j])
            rel = abs(a - fd) / max(1e-6, abs(a) + abs(fd))
            checked += 1
            if rel > worst_err:
                worst_err = rel
                worst_addr = f"layer {i} ({layer!r}) {name}[{j}]"
    return GradCheckResult(worst_err, worst_addr, checked, skipped)
