"""Squared error, class-weighted cross entropy and the combined CE + MSE loss.

Smoothing widths are given in bpm and converted to class-index units with
the class-grid step (0.664 bpm per class).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import GRID, N_CLASSES

WINDOW_BPM = 13.0
ALPHA = 25.0


@dataclass(frozen=True)
class SmoothingSpec:
    window_bpm: float = WINDOW_BPM
    sigma_bpm: float = WINDOW_BPM / 3

    @property
    def window(self) -> int:
        """Window length in class indices, rounded to the nearest odd integer."""
        w = self.window_bpm / GRID.step
        odd = 2 * int(np.floor((w - 1) / 2 + 0.5)) + 1
        return max(odd, 3)

    @property
    def sigma(self) -> float:
        return self.sigma_bpm / GRID.step

    def kernel(self) -> np.ndarray:
        half = self.window // 2
        offsets = np.arange(-half, half + 1, dtype=np.float64)
        return np.exp(-0.5 * (offsets / self.sigma) ** 2)


WEIGHT_SMOOTHING = SmoothingSpec(sigma_bpm=WINDOW_BPM / 3)
ONEHOT_SMOOTHING = SmoothingSpec(sigma_bpm=WINDOW_BPM / 6)


def gaussian_smooth_normalize(v: np.ndarray, spec: SmoothingSpec) -> np.ndarray:
    """Zero-padded 'same' convolution with a sampled Gaussian, scaled to sum 1."""
    v = np.asarray(v, dtype=np.float64)
    if np.any(v < 0):
        raise ValueError("smoothing input must be nonnegative")
    if not np.any(v > 0):
        raise ValueError("cannot normalize an all-zero vector")
    smoothed = np.convolve(v, spec.kernel(), mode="same")
    return smoothed / smoothed.sum()


def class_weights(train_labels, n_classes: int = N_CLASSES,
                  spec: SmoothingSpec = WEIGHT_SMOOTHING) -> np.ndarray:
    """Smoothed inverse class frequencies; classes with no samples start at 0."""
    labels = np.asarray(train_labels, dtype=np.int64).reshape(-1)
    if labels.size == 0:
        raise ValueError("class weights need at least one training label")
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    inverse = np.zeros(n_classes)
    seen = counts > 0
    inverse[seen] = 1.0 / counts[seen]
    return gaussian_smooth_normalize(inverse, spec)


_ONEHOT_TABLE: np.ndarray | None = None


def smoothed_one_hot(y: int, n_classes: int = N_CLASSES,
                     spec: SmoothingSpec = ONEHOT_SMOOTHING) -> np.ndarray:
    onehot = np.zeros(n_classes)
    onehot[int(y)] = 1.0
    return gaussian_smooth_normalize(onehot, spec)


def smoothed_targets(labels) -> np.ndarray:
    """Rows of smoothed one-hot vectors for a batch of labels (cached table)."""
    global _ONEHOT_TABLE
    if _ONEHOT_TABLE is None:
        _ONEHOT_TABLE = np.stack([smoothed_one_hot(i) for i in range(N_CLASSES)])
    return _ONEHOT_TABLE[np.asarray(labels, dtype=np.int64)]


def se_loss(y_pred, y_true):
    return (np.asarray(y_pred, dtype=np.float64) - y_true) ** 2


def _log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def ce_loss(logits, y, weights) -> float:
    """Weighted cross entropy of one logit vector."""
    logits = np.asarray(logits, dtype=np.float64)
    return float(-weights[int(y)] * _log_softmax(logits)[int(y)])


def cl_loss(logits, y, weights, alpha: float = ALPHA) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    mse = np.mean((logits - smoothed_one_hot(y)) ** 2)
    return ce_loss(logits, y, weights) + alpha * mse


class SquaredError:
    """Mean over the batch of (prediction - reference)^2, predictions in bpm."""

    def __call__(self, outputs, hr_bpm, labels=None):
        pred = outputs[:, 0].astype(np.float64)
        diff = pred - np.asarray(hr_bpm, dtype=np.float64)
        value = float(np.mean(diff ** 2))
        grad = (2.0 * diff / diff.size)[:, None]
        return value, grad.astype(outputs.dtype)


class CrossEntropy:
    """Class-weighted softmax cross entropy averaged over the batch."""

    def __init__(self, weights: np.ndarray):
        self.weights = np.asarray(weights, dtype=np.float64)

    def _ce(self, z, labels):
        b = z.shape[0]
        logp = _log_softmax(z)
        w = self.weights[labels]
        value = float(np.mean(-w * logp[np.arange(b), labels]))
        grad = np.exp(logp)
        grad[np.arange(b), labels] -= 1.0
        grad *= (w / b)[:, None]
        return value, grad

    def __call__(self, outputs, hr_bpm, labels):
        labels = np.asarray(labels, dtype=np.int64)
        value, grad = self._ce(outputs.astype(np.float64), labels)
        return value, grad.astype(outputs.dtype)


class CombinedLoss(CrossEntropy):
    """Cross entropy plus alpha * MSE between outputs and smoothed one-hot targets.

    The MSE acts on raw outputs. ``mse_on_softmax=True`` compares softmax
    probabilities instead (experimental variant).
    """

    def __init__(self, weights: np.ndarray, alpha: float = ALPHA, mse_on_softmax: bool = False):
        super().__init__(weights)
        self.alpha = alpha
        self.mse_on_softmax = mse_on_softmax

    def __call__(self, outputs, hr_bpm, labels):
        labels = np.asarray(labels, dtype=np.int64)
        z = outputs.astype(np.float64)
        b, n = z.shape
        value, grad = self._ce(z, labels)
        target = smoothed_targets(labels)
        if self.mse_on_softmax:
            p = np.exp(_log_softmax(z))
            diff = p - target
            g = 2.0 * self.alpha * diff / (n * b)
            grad += p * (g - (p * g).sum(axis=1, keepdims=True))
        else:
            diff = z - target
            grad += 2.0 * self.alpha * diff / (n * b)
        value += self.alpha * float(np.mean(diff ** 2))
        return value, grad.astype(outputs.dtype)


def make_loss(name: str, train_labels=None, alpha: float = ALPHA, mse_on_softmax: bool = False):
    name = name.lower()
    if name == "se":
        return SquaredError()
    if train_labels is None:
        raise ValueError(f"{name} loss needs training labels for class weights")
    weights = class_weights(train_labels)
    if name == "ce":
        return CrossEntropy(weights)
    if name == "cl":
        return CombinedLoss(weights, alpha=alpha, mse_on_softmax=mse_on_softmax)
    raise ValueError(f"unknown loss {name!r}")
