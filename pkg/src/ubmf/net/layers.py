"""Minimal float64 layer vocabulary with hand-written backward passes.

Shapes: sequence tensors are ``[batch, channels, time]``; feature tensors
are ``[batch, features]``.  Every layer caches what its backward pass
needs on ``forward`` and overwrites ``self.grads`` on ``backward``.
Weight initialization is uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) from a
caller-supplied generator so builds are reproducible.
"""

from __future__ import annotations

import numpy as np

from ..errors import InvalidParameterError


def _f64(x):
    return np.asarray(x, dtype=np.float64)


class Layer:
    """Base layer: trainable ``params``, matching ``grads``, non-trainable
    ``state`` (only batch norm uses state)."""

    kind = "base"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.state: dict[str, np.ndarray] = {}

    def init_params(self, rng: np.random.Generator) -> None:
        pass

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def spec(self) -> dict:
        return {"type": self.kind}

    def zero_grads(self) -> None:
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}


class Conv1d(Layer):
    """1-D convolution (cross-correlation), valid padding unless ``pad``."""

    kind = "conv1d"

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1, pad: int = 0):
        super().__init__()
        if kernel < 1 or stride < 1 or pad < 0:
            raise InvalidParameterError("conv1d: kernel/stride must be >= 1, pad >= 0")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.pad = pad
        self.params = {
            "W": np.zeros((out_channels, in_channels, kernel)),
            "b": np.zeros(out_channels),
        }
        self.zero_grads()

    def init_params(self, rng):
        bound = 1.0 / np.sqrt(self.in_channels * self.kernel)
        self.params["W"] = rng.uniform(-bound, bound, self.params["W"].shape)
        self.params["b"] = rng.uniform(-bound, bound, self.params["b"].shape)

    def forward(self, x, train=False):
        x = _f64(x)
        if x.ndim != 3 or x.shape[1] != self.in_channels:
            raise InvalidParameterError(
                f"conv1d expects [B, {self.in_channels}, T], got {x.shape}")
        if self.pad:
            x = np.pad(x, ((0, 0), (0, 0), (self.pad, self.pad)))
        if x.shape[2] < self.kernel:
            raise InvalidParameterError(
                f"conv1d: padded length {x.shape[2]} < kernel {self.kernel}")
        win = np.lib.stride_tricks.sliding_window_view(x, self.kernel, axis=2)
        win = win[:, :, ::self.stride, :]
        self._win = win
        self._padded_shape = x.shape
        y = np.einsum("bclk,ock->bol", win, self.params["W"], optimize=True)
        return y + self.params["b"][None, :, None]

    def backward(self, dy):
        dy = _f64(dy)
        win = self._win
        self.grads["W"] = np.einsum("bol,bclk->ock", dy, win, optimize=True)
        self.grads["b"] = dy.sum(axis=(0, 2))
        g = np.einsum("bol,ock->bclk", dy, self.params["W"], optimize=True)
        dxp = np.zeros(self._padded_shape)
        L = dy.shape[2]
        s = self.stride
        for j in range(self.kernel):
            dxp[:, :, j:j + (L - 1) * s + 1:s] += g[:, :, :, j]
        if self.pad:
            dxp = dxp[:, :, self.pad:-self.pad]
        return dxp

    def spec(self):
        return {"type": self.kind, "in_channels": self.in_channels,
                "out_channels": self.out_channels, "kernel": self.kernel,
                "stride": self.stride, "pad": self.pad}


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.params = {"W": np.zeros((in_features, out_features)),
                       "b": np.zeros(out_features)}
        self.zero_grads()

    def init_params(self, rng):
        bound = 1.0 / np.sqrt(self.in_features)
        self.params["W"] = rng.uniform(-bound, bound, self.params["W"].shape)
        self.params["b"] = rng.uniform(-bound, bound, self.params["b"].shape)

    def forward(self, x, train=False):
        x = _f64(x)
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise InvalidParameterError(
                f"dense expects [B, {self.in_features}], got {x.shape}")
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dy):
        dy = _f64(dy)
        self.grads["W"] = self._x.T @ dy
        self.grads["b"] = dy.sum(axis=0)
        return dy @ self.params["W"].T

    def spec(self):
        return {"type": self.kind, "in_features": self.in_features,
                "out_features": self.out_features}


class BatchNorm(Layer):
    """Batch normalization over axis 0 (feature input) or axes (0, 2)
    (sequence input).  Train mode uses batch statistics and updates the
    running estimates; eval mode uses the frozen running estimates, so
    inference output never depends on batch composition."""

    kind = "batchnorm"

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.params = {"gamma": np.ones(num_features), "beta": np.zeros(num_features)}
        self.state = {"running_mean": np.zeros(num_features),
                      "running_var": np.ones(num_features)}
        self.zero_grads()

    def _axes_and_shape(self, x):
        if x.ndim == 2:
            return (0,), (1, self.num_features)
        if x.ndim == 3:
            return (0, 2), (1, self.num_features, 1)
        raise InvalidParameterError(f"batchnorm expects 2-D or 3-D input, got {x.ndim}-D")

    def forward(self, x, train=False):
        x = _f64(x)
        axes, shape = self._axes_and_shape(x)
        if x.shape[1] != self.num_features:
            raise InvalidParameterError(
                f"batchnorm expects {self.num_features} features, got {x.shape[1]}")
        gamma = self.params["gamma"].reshape(shape)
        beta = self.params["beta"].reshape(shape)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = x.size // self.num_features
            if m < 2:
                raise InvalidParameterError("batchnorm train mode needs >= 2 values per feature")
            self.state["running_mean"] = ((1 - self.momentum) * self.state["running_mean"]
                                          + self.momentum * mean)
            self.state["running_var"] = ((1 - self.momentum) * self.state["running_var"]
                                         + self.momentum * var)
            inv = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean.reshape(shape)) * inv.reshape(shape)
            self._cache = (xhat, inv, x - mean.reshape(shape), axes, shape, m)
            self._train_mode = True
            return gamma * xhat + beta
        inv = 1.0 / np.sqrt(self.state["running_var"] + self.eps)
        xhat = (x - self.state["running_mean"].reshape(shape)) * inv.reshape(shape)
        self._cache = (xhat, inv, None, axes, shape, None)
        self._train_mode = False
        return gamma * xhat + beta

    def backward(self, dy):
        dy = _f64(dy)
        xhat, inv, xc, axes, shape, m = self._cache
        self.grads["gamma"] = (dy * xhat).sum(axis=axes)
        self.grads["beta"] = dy.sum(axis=axes)
        gamma = self.params["gamma"].reshape(shape)
        if not self._train_mode:
            return dy * gamma * inv.reshape(shape)
        dxhat = dy * gamma
        inv_b = inv.reshape(shape)
        # standard batch-norm backward, vectorized over the reduce axes
        term1 = dxhat
        term2 = dxhat.sum(axis=axes).reshape(shape) / m
        term3 = xhat * (dxhat * xhat).sum(axis=axes).reshape(shape) / m
        return inv_b * (term1 - term2 - term3)

    def spec(self):
        return {"type": self.kind, "num_features": self.num_features,
                "eps": self.eps, "momentum": self.momentum}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        x = _f64(x)
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy):
        return np.where(self._mask, _f64(dy), 0.0)


class LeakyReLU(Layer):
    kind = "leaky_relu"

    def __init__(self, slope: float = 0.2):
        super().__init__()
        self.slope = slope

    def forward(self, x, train=False):
        x = _f64(x)
        self._mask = x > 0
        return np.where(self._mask, x, self.slope * x)

    def backward(self, dy):
        dy = _f64(dy)
        return np.where(self._mask, dy, self.slope * dy)

    def spec(self):
        return {"type": self.kind, "slope": self.slope}


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, train=False):
        x = _f64(x)
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        self._y = out
        return out

    def backward(self, dy):
        return _f64(dy) * self._y * (1.0 - self._y)


class Tanh(Layer):
    kind = "tanh"

    def forward(self, x, train=False):
        self._y = np.tanh(_f64(x))
        return self._y

    def backward(self, dy):
        return _f64(dy) * (1.0 - self._y ** 2)


class MaxPool1d(Layer):
    kind = "maxpool1d"

    def __init__(self, kernel: int, stride: int):
        super().__init__()
        if kernel < 1 or stride < 1:
            raise InvalidParameterError("maxpool1d: kernel and stride must be >= 1")
        self.kernel = kernel
        self.stride = stride

    def forward(self, x, train=False):
        x = _f64(x)
        if x.ndim != 3:
            raise InvalidParameterError("maxpool1d expects [B, C, T]")
        if x.shape[2] < self.kernel:
            raise InvalidParameterError(
                f"maxpool1d: length {x.shape[2]} < kernel {self.kernel}")
        win = np.lib.stride_tricks.sliding_window_view(x, self.kernel, axis=2)
        win = win[:, :, ::self.stride, :]
        self._idx = win.argmax(axis=3)
        self._in_shape = x.shape
        return win.max(axis=3)

    def backward(self, dy):
        dy = _f64(dy)
        B, C, L = dy.shape
        dxw = np.zeros((B, C, L, self.kernel))
        np.put_along_axis(dxw, self._idx[..., None], dy[..., None], axis=3)
        dx = np.zeros(self._in_shape)
        s = self.stride
        for j in range(self.kernel):
            dx[:, :, j:j + (L - 1) * s + 1:s] += dxw[:, :, :, j]
        return dx

    def spec(self):
        return {"type": self.kind, "kernel": self.kernel, "stride": self.stride}


class GlobalAvgPool(Layer):
    kind = "gap"

    def forward(self, x, train=False):
        x = _f64(x)
        if x.ndim != 3:
            raise InvalidParameterError("gap expects [B, C, T]")
        self._T = x.shape[2]
        return x.mean(axis=2)

    def backward(self, dy):
        dy = _f64(dy)
        return np.repeat(dy[:, :, None], self._T, axis=2) / self._T


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train=False):
        x = _f64(x)
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return _f64(dy).reshape(self._shape)


class Reshape(Layer):
    """[B, C*T] -> [B, C, T]; used as a decoder output head."""

    kind = "reshape"

    def __init__(self, channels: int, length: int):
        super().__init__()
        self.channels = channels
        self.length = length

    def forward(self, x, train=False):
        x = _f64(x)
        if x.shape[1] != self.channels * self.length:
            raise InvalidParameterError(
                f"reshape expects {self.channels * self.length} features, got {x.shape[1]}")
        return x.reshape(x.shape[0], self.channels, self.length)

    def backward(self, dy):
        return _f64(dy).reshape(dy.shape[0], self.channels * self.length)

    def spec(self):
        return {"type": self.kind, "channels": self.channels, "length": self.length}


_LAYER_TYPES = {
    "conv1d": Conv1d,
    "dense": Dense,
    "batchnorm": BatchNorm,
    "relu": ReLU,
    "leaky_relu": LeakyReLU,
    "sigmoid": Sigmoid,
    "tanh": Tanh,
    "maxpool1d": MaxPool1d,
    "gap": GlobalAvgPool,
    "flatten": Flatten,
    "reshape": Reshape,
}


def make_layer(spec: dict) -> Layer:
    """Build a layer from its spec dict (inverse of ``Layer.spec``)."""
    spec = dict(spec)
    kind = spec.pop("type", None)
    cls = _LAYER_TYPES.get(kind)
    if cls is None:
        raise InvalidParameterError(f"unknown layer type {kind!r}")
    return cls(**spec)
