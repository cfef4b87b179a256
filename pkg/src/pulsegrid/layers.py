"""Dense layers with hand-written forward and backward passes.

Activations are plain ``numpy.ndarray`` objects. Every layer caches what it
needs during ``forward`` and consumes the cache in ``backward``, which
returns the gradient with respect to the layer input and fills
``layer.grads`` for the learnable parameters.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class Layer:
    """Base class. ``params`` and ``buffers`` map names to arrays."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.training = True

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def train(self, mode: bool = True) -> "Layer":
        self.training = mode
        return self

    def eval(self) -> "Layer":
        return self.train(False)

    def zero_grad(self):
        for name, p in self.params.items():
            self.grads[name] = np.zeros_like(p)

    def astype(self, dtype) -> "Layer":
        for store in (self.params, self.buffers):
            for name in store:
                store[name] = store[name].astype(dtype)
        self.zero_grad()
        return self

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def __call__(self, x):
        return self.forward(x)


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Layer):
    """Valid cross-correlation, stride 1, with per-output-channel bias."""

    def __init__(self, in_channels: int, out_channels: int, kernel: tuple[int, int],
                 rng: np.random.Generator | None = None, input_grad: bool = True):
        super().__init__()
        kh, kw = kernel
        if min(in_channels, out_channels, kh, kw) < 1:
            raise ShapeError(f"invalid conv geometry: {in_channels}->{out_channels}, kernel {kernel}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = (kh, kw)
        # the first layer of a network never needs dL/dx
        self.input_grad = input_grad
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kh * kw
        self.params["weight"] = _he_uniform(rng, (out_channels, in_channels, kh, kw), fan_in)
        self.params["bias"] = np.zeros(out_channels)
        self.zero_grad()
        self._cache = None

    def output_shape(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        if h < kh or w < kw:
            raise ShapeError(f"input {h}x{w} smaller than kernel {kh}x{kw}")
        return h - kh + 1, w - kw + 1

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"Conv2d expects (B, {self.in_channels}, H, W), got {tuple(x.shape)}")
        ho, wo = self.output_shape(x.shape[2], x.shape[3])
        w = self.params["weight"]
        co, c, kh, kw = w.shape
        b = x.shape[0]
        # channel-last layout keeps each (b, i, j) row of C values contiguous
        xl = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
        if c < 4:
            # few input channels: one im2col matmul beats kh*kw skinny ones
            win = sliding_window_view(xl, (kh, kw), axis=(1, 2))
            cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b * ho * wo, -1)
            out = cols @ w.transpose(0, 2, 3, 1).reshape(co, -1).T
            self._cache = (xl, cols)
        else:
            wq = np.ascontiguousarray(w.transpose(2, 3, 1, 0))
            out = np.zeros((b * ho * wo, co), dtype=x.dtype)
            buf = np.empty((b, ho, wo, c), dtype=x.dtype)
            for p in range(kh):
                for q in range(kw):
                    buf[...] = xl[:, p:p + ho, q:q + wo, :]
                    out += buf.reshape(-1, c) @ wq[p, q]
            self._cache = (xl, None)
        out = out.reshape(b, ho, wo, co).transpose(0, 3, 1, 2) + self.params["bias"][None, :, None, None]
        return np.ascontiguousarray(out)

    def backward(self, dout):
        xl, cols = self._cache
        w = self.params["weight"]
        co, c, kh, kw = w.shape
        b, h, wd, _ = xl.shape
        ho, wo = h - kh + 1, wd - kw + 1
        dmat = np.ascontiguousarray(dout.transpose(0, 2, 3, 1)).reshape(-1, co)
        self.grads["bias"] = dmat.sum(axis=0)
        if cols is not None:
            self.grads["weight"] = (dmat.T @ cols).reshape(co, kh, kw, c).transpose(0, 3, 1, 2)
        else:
            dw = np.empty_like(w)
            buf = np.empty((b, ho, wo, c), dtype=xl.dtype)
            for p in range(kh):
                for q in range(kw):
                    buf[...] = xl[:, p:p + ho, q:q + wo, :]
                    dw[:, :, p, q] = dmat.T @ buf.reshape(-1, c)
            self.grads["weight"] = dw
        if not self.input_grad:
            return None
        wq = np.ascontiguousarray(w.transpose(2, 3, 0, 1))
        dx = np.zeros((b, h, wd, c), dtype=dout.dtype)
        tmp = np.empty((b * ho * wo, c), dtype=dout.dtype)
        for p in range(kh):
            for q in range(kw):
                np.matmul(dmat, wq[p, q], out=tmp)
                dx[:, p:p + ho, q:q + wo, :] += tmp.reshape(b, ho, wo, c)
        return np.ascontiguousarray(dx.transpose(0, 3, 1, 2))


class Conv1d(Layer):
    """Valid 1D cross-correlation over (B, C, L), built on :class:`Conv2d`."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 rng: np.random.Generator | None = None):
        super().__init__()
        self._conv = Conv2d(in_channels, out_channels, (1, kernel), rng=rng)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        # share storage with the wrapped 2D layer, exposing 1D weight shape
        self.params["weight"] = self._conv.params["weight"][:, :, 0, :]
        self.params["bias"] = self._conv.params["bias"]
        self.zero_grad()

    def output_length(self, length: int) -> int:
        if length < self.kernel:
            raise ShapeError(f"input length {length} smaller than kernel {self.kernel}")
        return length - self.kernel + 1

    def _sync(self):
        self._conv.params["weight"] = self.params["weight"][:, :, None, :]
        self._conv.params["bias"] = self.params["bias"]

    def forward(self, x):
        if x.ndim != 3 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"Conv1d expects (B, {self.in_channels}, L), got {tuple(x.shape)}")
        self.output_length(x.shape[2])
        self._sync()
        return self._conv.forward(x[:, :, None, :])[:, :, 0, :]

    def backward(self, dout):
        dx = self._conv.backward(dout[:, :, None, :])
        self.grads["weight"] = self._conv.grads["weight"][:, :, 0, :]
        self.grads["bias"] = self._conv.grads["bias"]
        return dx[:, :, 0, :]


class Linear(Layer):
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.params["weight"] = _he_uniform(rng, (out_features, in_features), in_features)
        self.params["bias"] = np.zeros(out_features)
        self.zero_grad()
        self._x = None

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(
                f"Linear expects (B, {self.in_features}), got {tuple(x.shape)}")
        self._x = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, dout):
        self.grads["weight"] = dout.T @ self._x
        self.grads["bias"] = dout.sum(axis=0)
        return dout @ self.params["weight"]


class BatchNorm(Layer):
    """Batch normalization over every axis except the feature axis 1.

    Works for (B, F), (B, C, L) and (B, C, H, W) inputs. Running variance
    is tracked with the unbiased estimator.
    """

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.params["gamma"] = np.ones(num_features)
        self.params["beta"] = np.zeros(num_features)
        self.buffers["running_mean"] = np.zeros(num_features)
        self.buffers["running_var"] = np.ones(num_features)
        self.zero_grad()
        self._cache = None

    def _bcast(self, v, ndim):
        return v.reshape((1, -1) + (1,) * (ndim - 2))

    def forward(self, x):
        if x.ndim < 2 or x.shape[1] != self.num_features:
            raise ShapeError(
                f"BatchNorm expects feature axis of size {self.num_features}, got {tuple(x.shape)}")
        axes = (0,) + tuple(range(2, x.ndim))
        gamma = self._bcast(self.params["gamma"], x.ndim)
        beta = self._bcast(self.params["beta"], x.ndim)
        if self.training:
            if x.shape[0] < 2:
                raise ValueError("BatchNorm in train mode needs a batch of at least 2 samples")
            n = x.size // self.num_features
            mean = x.mean(axis=axes)
            xc = x - self._bcast(mean, x.ndim)
            var = (xc * xc).mean(axis=axes)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = xc * self._bcast(inv_std, x.ndim)
            m = self.momentum
            self.buffers["running_mean"] = (1 - m) * self.buffers["running_mean"] + m * mean
            self.buffers["running_var"] = (1 - m) * self.buffers["running_var"] + m * var * n / (n - 1)
            self._cache = (xhat, inv_std, axes, n, True)
        else:
            inv_std = 1.0 / np.sqrt(self.buffers["running_var"] + self.eps)
            xhat = (x - self._bcast(self.buffers["running_mean"], x.ndim)) * self._bcast(inv_std, x.ndim)
            self._cache = (xhat, inv_std, axes, None, False)
        return gamma * xhat + beta

    def backward(self, dout):
        xhat, inv_std, axes, n, batch_stats = self._cache
        nd = dout.ndim
        self.grads["gamma"] = (dout * xhat).sum(axis=axes)
        self.grads["beta"] = dout.sum(axis=axes)
        dxhat = dout * self._bcast(self.params["gamma"], nd)
        if not batch_stats:
            return dxhat * self._bcast(inv_std, nd)
        s1 = self._bcast(dxhat.sum(axis=axes), nd)
        s2 = self._bcast((dxhat * xhat).sum(axis=axes), nd)
        return self._bcast(inv_std / n, nd) * (n * dxhat - s1 - xhat * s2)


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0).astype(x.dtype, copy=False)

    def backward(self, dout):
        return dout * self._mask


class Dropout(Layer):
    """Inverted dropout; identity in eval mode."""

    def __init__(self, rate: float, rng: np.random.Generator | None = None):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._mask = None

    def forward(self, x):
        if not self.training or self.rate == 0.0:
            self._mask = None
            return x
        keep = self.rng.random(x.shape) >= self.rate
        self._mask = keep.astype(x.dtype) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, dout):
        return dout if self._mask is None else dout * self._mask


class Flatten(Layer):
    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Unflatten(Layer):
    """(B, L) -> (B, 1, L), feeding a single-channel 1D conv stack."""

    def forward(self, x):
        return x[:, None, :]

    def backward(self, dout):
        return dout[:, 0, :]
