"""Adam, the one-cycle schedule, the learning-rate range test and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from .data import SplitSets, augment_batch, stack
from .losses import ALPHA, make_loss
from .model import Model, ModelSpec, build_model

log = logging.getLogger(__name__)

PAPER_LR_MIN = 5.8e-5
PAPER_LR_MAX = 5.8e-3


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    loss: str = "cl"
    with_filter: bool = True
    batch_size: int = 64
    epochs: int = 300
    alpha: float = ALPHA
    seed: int = 0
    lr_min: float = PAPER_LR_MIN
    lr_max: float = PAPER_LR_MAX
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    augment: bool = True
    dtype: str = "float32"
    mse_on_softmax: bool = False

    def __post_init__(self):
        self.loss = self.loss.lower()
        self.validate()

    def validate(self):
        if self.loss not in ("se", "ce", "cl"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.with_filter and self.loss == "se":
            raise ValueError("the filtering stack cannot be combined with the SE loss")
        if not 0 < self.lr_min < self.lr_max:
            raise ValueError("need 0 < lr_min < lr_max")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch normalization)")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")

    @property
    def model_spec(self) -> ModelSpec:
        return ModelSpec.for_loss(self.loss, self.with_filter)

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        """Build from string or typed values, e.g. a parsed key=value file."""
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.strip().replace("-", "_")
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(raw, type(getattr(cls(), key)))
        if str(kwargs.get("loss", "")).lower() == "se":
            # regression has no filter stack unless explicitly (and wrongly) requested
            kwargs.setdefault("with_filter", False)
        return cls(**kwargs)


def _coerce(raw, kind):
    if not isinstance(raw, str):
        return kind(raw)
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return kind(raw)


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


class Adam:
    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        """In-place update of every parameter array."""
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient in {k}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def one_cycle_lr(step: int, total_steps: int, lr_min: float, lr_max: float) -> float:
    """Triangle: lr_min at step 0, lr_max at total_steps // 2, lr_min at the last step."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if total_steps == 1:
        return lr_min
    peak = total_steps // 2
    if step <= peak:
        frac = step / peak if peak else 1.0
    else:
        frac = (total_steps - 1 - step) / (total_steps - 1 - peak)
    return lr_min + frac * (lr_max - lr_min)


@dataclass
class LRRangeResult:
    lrs: np.ndarray
    metrics: np.ndarray
    smoothed: np.ndarray
    lr_min: float
    lr_max: float
    at_boundary: bool

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["lr", "metric", "smoothed", "selected"])
            for lr, m, s in zip(self.lrs, self.metrics, self.smoothed):
                tag = "lr_max" if lr == self.lr_max else ""
                w.writerow([f"{lr:.6g}", f"{m:.6g}", f"{s:.6g}", tag])


def default_lr_grid(points_per_decade: int = 4) -> np.ndarray:
    return np.logspace(-7, 1, 8 * points_per_decade + 1)


def smooth_log_curve(lrs, values, sigma_decades: float = 0.5) -> np.ndarray:
    """Gaussian kernel regression over log10(lr), ignoring non-finite points."""
    x = np.log10(np.asarray(lrs, dtype=np.float64))
    y = np.asarray(values, dtype=np.float64)
    ok = np.isfinite(y)
    k = np.exp(-0.5 * ((x[:, None] - x[None, ok]) / sigma_decades) ** 2)
    return (k @ y[ok]) / k.sum(axis=1)


def lr_range_test(probe: Callable[[float], float], lrs=None,
                  sigma_decades: float = 0.5) -> LRRangeResult:
    """Run ``probe(lr)`` over a log grid; lr_max = argmin of the smoothed curve."""
    lrs = default_lr_grid() if lrs is None else np.asarray(lrs, dtype=np.float64)
    metrics = []
    for lr in lrs:
        try:
            m = float(probe(float(lr)))
        except (FloatingPointError, NonFiniteGradientError):
            m = math.nan
        metrics.append(m if math.isfinite(m) else math.nan)
        log.info("lr %.3g -> %.4g", lr, metrics[-1])
    metrics = np.asarray(metrics)
    if not np.any(np.isfinite(metrics)):
        raise RuntimeError("every learning-rate probe diverged; try a grid of smaller rates")
    smoothed = smooth_log_curve(lrs, metrics, sigma_decades)
    i = int(np.argmin(smoothed))
    at_boundary = i in (0, len(lrs) - 1)
    if at_boundary:
        log.warning("smoothed curve minimum at the grid boundary (lr=%.3g); widen the grid", lrs[i])
    lr_max = float(lrs[i])
    return LRRangeResult(lrs, metrics, smoothed, lr_max / 100.0, lr_max, at_boundary)


@dataclass
class TrainLog:
    epoch: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_mae: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_mae", "lr"])
            for row in zip(self.epoch, self.train_loss, self.val_mae, self.lr):
                w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])


@dataclass
class TrainResult:
    model: Model
    log: TrainLog
    config: TrainConfig

    @property
    def best_val_mae(self) -> float:
        return self.log.val_mae[self.log.best_epoch] if self.log.val_mae else math.nan


def batch_slices(n: int, batch_size: int) -> list[slice]:
    """Contiguous batches; a trailing batch of one joins the previous batch."""
    bounds = list(range(0, n, batch_size)) + [n]
    slices = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]
    if len(slices) > 1 and slices[-1].stop - slices[-1].start == 1:
        last = slices.pop()
        slices[-1] = slice(slices[-1].start, last.stop)
    return slices


def mae_bpm(model: Model, x: np.ndarray, hr: np.ndarray) -> float:
    pred = model.predict_bpm(x)
    return float(np.mean(np.abs(pred - hr)))


def train_loop(config: TrainConfig, splits: SplitSets, progress: Callable | None = None,
               model: Model | None = None, lr_fn: Callable[[int, int], float] | None = None,
               keep_best: bool = True) -> TrainResult:
    """Train, tracking validation MAE each epoch; returns the best-epoch model.

    ``lr_fn(step, total)`` overrides the one-cycle schedule. With
    ``keep_best=False`` the final-epoch weights are returned.
    """
    if not splits.train:
        raise ValueError("training set is empty")
    if len(splits.train) < 2:
        raise ValueError("need at least two training samples")
    dtype = np.dtype(config.dtype)
    x_tr, hr_tr, lab_tr = stack(splits.train, dtype)
    x_va, hr_va, _ = stack(splits.val, dtype)
    if not splits.val:
        log.warning("validation set empty; keeping the final-epoch model")

    model = model if model is not None else build_model(config.model_spec, seed=config.seed, dtype=dtype)
    loss_fn = make_loss(config.loss, lab_tr, alpha=config.alpha, mse_on_softmax=config.mse_on_softmax)
    params = model.parameters()
    opt = Adam(params, config.beta1, config.beta2, config.adam_eps)
    rng = np.random.default_rng([config.seed, 2])

    n = len(x_tr)
    batches = batch_slices(n, config.batch_size)
    total = config.epochs * len(batches)
    step = 0
    tlog = TrainLog()
    best_state, best_mae = None, math.inf

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        model.train()
        losses = []
        for sl in batches:
            idx = order[sl]
            xb = x_tr[idx]
            if config.augment:
                xb = augment_batch(xb, rng)
            out = model.forward(xb)
            value, grad = loss_fn(out, hr_tr[idx], lab_tr[idx])
            model.backward(grad)
            lr = (lr_fn(step, total) if lr_fn is not None
                  else one_cycle_lr(step, total, config.lr_min, config.lr_max))
            opt.step(model.gradients(), lr)
            tlog.lr_trace.append(lr)
            losses.append(value)
            step += 1
        train_loss = float(np.mean(losses))
        val = mae_bpm(model, x_va, hr_va) if len(x_va) else math.nan
        tlog.epoch.append(epoch)
        tlog.train_loss.append(train_loss)
        tlog.val_mae.append(val)
        tlog.lr.append(lr)
        if len(x_va) and val < best_mae:
            best_mae = val
            best_state = model.state_dict()
            tlog.best_epoch = epoch
        if progress is not None:
            progress(epoch, train_loss, val, lr)

    if best_state is None:
        tlog.best_epoch = config.epochs - 1
    elif keep_best:
        model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model=model, log=tlog, config=config)


def training_probe(config: TrainConfig, splits: SplitSets, epochs_per_point: int = 5,
                   metric_set: str = "val") -> Callable[[float], float]:
    """Probe for :func:`lr_range_test`: MAE after a short constant-lr run."""
    def probe(lr: float) -> float:
        cfg = TrainConfig(**{**asdict(config), "epochs": epochs_per_point})
        with np.errstate(over="raise", invalid="raise"):
            result = train_loop(cfg, splits, lr_fn=lambda step, total: lr, keep_best=False)
        target = getattr(splits, metric_set) or splits.train
        x, hr, _ = stack(target, np.dtype(cfg.dtype))
        return mae_bpm(result.model, x, hr)
    return probe
