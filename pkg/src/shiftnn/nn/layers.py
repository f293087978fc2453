"""Forward/backward implementations of the supported layer kinds.

Layers are stateless descriptions; parameters live in an external dict
keyed by "<layer name>.<param>" so callers can swap in quantized weights
without touching the layer objects.  Activations are NCHW.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError


def im2col(x, kh, kw, stride, pad):
    """Patch matrix of shape (N*Ho*Wo, C*kh*kw) plus the output dims."""
    N, C, H, W = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Hp, Wp = x.shape[2], x.shape[3]
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    win = np.lib.stride_tricks.as_strided(
        x, (N, C, Ho, Wo, kh, kw), (s0, s1, s2 * stride, s3 * stride, s2, s3)
    )
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        N * Ho * Wo, C * kh * kw
    )
    return cols, Ho, Wo


def col2im(dcols, x_shape, kh, kw, stride, pad, Ho, Wo):
    """Scatter-add inverse of im2col."""
    N, C, H, W = x_shape
    Hp, Wp = H + 2 * pad, W + 2 * pad
    dxp = np.zeros((N, C, Hp, Wp), dtype=dcols.dtype)
    dwin = dcols.reshape(N, Ho, Wo, C, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + Ho * stride : stride, j : j + Wo * stride : stride] += dwin[
                :, :, :, :, i, j
            ]
    if pad:
        return dxp[:, :, pad : Hp - pad, pad : Wp - pad]
    return dxp


class Conv2D:
    kind = "conv2d"

    def __init__(self, name, in_channels, out_channels, kernel, stride=1, pad=0, bias=True):
        if kernel < 1 or in_channels < 1 or out_channels < 1:
            raise ConfigError(f"{name}: conv dims must be positive")
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.pad = pad
        self.bias = bias

    @property
    def weight_name(self):
        return f"{self.name}.W"

    def param_shapes(self):
        shapes = {self.weight_name: (self.out_channels, self.in_channels, self.kernel, self.kernel)}
        if self.bias:
            shapes[f"{self.name}.b"] = (self.out_channels,)
        return shapes

    def init_params(self, rng, dtype):
        fan_in = self.in_channels * self.kernel * self.kernel
        w = rng.standard_normal(
            (self.out_channels, self.in_channels, self.kernel, self.kernel)
        ) * np.sqrt(2.0 / fan_in)
        params = {self.weight_name: w.astype(dtype)}
        if self.bias:
            params[f"{self.name}.b"] = np.zeros(self.out_channels, dtype=dtype)
        return params

    def out_shape(self, s):
        C, H, W = s
        if C != self.in_channels:
            raise ConfigError(
                f"{self.name}: expects {self.in_channels} input channels, got {C}"
            )
        Ho = (H + 2 * self.pad - self.kernel) // self.stride + 1
        Wo = (W + 2 * self.pad - self.kernel) // self.stride + 1
        if Ho < 1 or Wo < 1:
            raise ConfigError(f"{self.name}: kernel does not fit {H}x{W} input")
        return (self.out_channels, Ho, Wo)

    def forward(self, x, params, state, train):
        w = params[self.weight_name]
        cols, Ho, Wo = im2col(x, self.kernel, self.kernel, self.stride, self.pad)
        y = cols @ w.reshape(self.out_channels, -1).T
        if self.bias:
            y = y + params[f"{self.name}.b"]
        N = x.shape[0]
        y = y.reshape(N, Ho, Wo, self.out_channels).transpose(0, 3, 1, 2)
        return y, (cols, x.shape, Ho, Wo)

    def backward(self, dy, cache, params):
        cols, x_shape, Ho, Wo = cache
        w = params[self.weight_name]
        N = dy.shape[0]
        dy2 = dy.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, self.out_channels)
        grads = {self.weight_name: (dy2.T @ cols).reshape(w.shape)}
        if self.bias:
            grads[f"{self.name}.b"] = dy2.sum(axis=0)
        dcols = dy2 @ w.reshape(self.out_channels, -1)
        dx = col2im(dcols, x_shape, self.kernel, self.kernel, self.stride, self.pad, Ho, Wo)
        return dx, grads


class BatchNorm2D:
    """Per-channel batch normalization with running statistics.

    Training uses batch statistics (biased variance) and updates the
    running estimates with the given momentum; evaluation uses the
    running estimates.
    """

    kind = "batchnorm"

    def __init__(self, name, channels, momentum=0.1, eps=1e-5):
        self.name = name
        self.channels = channels
        self.momentum = momentum
        self.eps = eps

    def param_shapes(self):
        return {f"{self.name}.gamma": (self.channels,), f"{self.name}.beta": (self.channels,)}

    def init_params(self, rng, dtype):
        return {
            f"{self.name}.gamma": np.ones(self.channels, dtype=dtype),
            f"{self.name}.beta": np.zeros(self.channels, dtype=dtype),
        }

    def init_state(self, dtype):
        return {
            f"{self.name}.running_mean": np.zeros(self.channels, dtype=dtype),
            f"{self.name}.running_var": np.ones(self.channels, dtype=dtype),
        }

    def out_shape(self, s):
        if s[0] != self.channels:
            raise ConfigError(f"{self.name}: expects {self.channels} channels, got {s[0]}")
        return s

    def forward(self, x, params, state, train):
        g = params[f"{self.name}.gamma"][None, :, None, None]
        b = params[f"{self.name}.beta"][None, :, None, None]
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            rm, rv = state[f"{self.name}.running_mean"], state[f"{self.name}.running_var"]
            rm += self.momentum * (mean.astype(rm.dtype) - rm)
            rv += self.momentum * (var.astype(rv.dtype) - rv)
        else:
            mean = state[f"{self.name}.running_mean"]
            var = state[f"{self.name}.running_var"]
        invstd = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * invstd[None, :, None, None]
        y = g * xhat + b
        return y, (xhat, invstd.astype(x.dtype), train)

    def backward(self, dy, cache, params):
        xhat, invstd, train = cache
        g = params[f"{self.name}.gamma"]
        dgamma = (dy * xhat).sum(axis=(0, 2, 3))
        dbeta = dy.sum(axis=(0, 2, 3))
        dxhat = dy * g[None, :, None, None]
        if train:
            m = dy.shape[0] * dy.shape[2] * dy.shape[3]
            dx = (
                invstd[None, :, None, None]
                / m
                * (
                    m * dxhat
                    - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                    - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                )
            )
        else:
            dx = dxhat * invstd[None, :, None, None]
        grads = {f"{self.name}.gamma": dgamma, f"{self.name}.beta": dbeta}
        return dx, grads


class LeakyReLU:
    kind = "leaky-relu"

    def __init__(self, name, slope=0.01):
        self.name = name
        self.slope = slope

    def param_shapes(self):
        return {}

    def init_params(self, rng, dtype):
        return {}

    def out_shape(self, s):
        return s

    def forward(self, x, params, state, train):
        neg = x < 0
        y = np.where(neg, np.asarray(self.slope, dtype=x.dtype) * x, x)
        return y, neg

    def backward(self, dy, cache, params):
        neg = cache
        dx = np.where(neg, np.asarray(self.slope, dtype=dy.dtype) * dy, dy)
        return dx, {}


class MaxPool2D:
    """Non-overlapping max pooling; gradients route to the first maximum."""

    kind = "maxpool"

    def __init__(self, name, size):
        if size < 2:
            raise ConfigError(f"{name}: pool size must be >= 2")
        self.name = name
        self.size = size

    def param_shapes(self):
        return {}

    def init_params(self, rng, dtype):
        return {}

    def out_shape(self, s):
        C, H, W = s
        if H % self.size or W % self.size:
            raise ConfigError(f"{self.name}: {H}x{W} not divisible by pool size {self.size}")
        return (C, H // self.size, W // self.size)

    def forward(self, x, params, state, train):
        N, C, H, W = x.shape
        s = self.size
        Ho, Wo = H // s, W // s
        xr = x.reshape(N, C, Ho, s, Wo, s).transpose(0, 1, 2, 4, 3, 5).reshape(
            N, C, Ho, Wo, s * s
        )
        idx = xr.argmax(axis=-1)
        y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
        return y, (idx, x.shape)

    def backward(self, dy, cache, params):
        idx, x_shape = cache
        N, C, H, W = x_shape
        s = self.size
        Ho, Wo = H // s, W // s
        dxr = np.zeros((N, C, Ho, Wo, s * s), dtype=dy.dtype)
        np.put_along_axis(dxr, idx[..., None], dy[..., None], axis=-1)
        dx = dxr.reshape(N, C, Ho, Wo, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H, W)
        return dx, {}


class Flatten:
    kind = "flatten"

    def __init__(self, name):
        self.name = name

    def param_shapes(self):
        return {}

    def init_params(self, rng, dtype):
        return {}

    def out_shape(self, s):
        return (int(np.prod(s)),)

    def forward(self, x, params, state, train):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache, params):
        return dy.reshape(cache), {}


class Dense:
    kind = "dense"

    def __init__(self, name, in_features, out_features, bias=True):
        self.name = name
        self.in_features = in_features
        self.out_features = out_features
        self.bias = bias

    @property
    def weight_name(self):
        return f"{self.name}.W"

    def param_shapes(self):
        shapes = {self.weight_name: (self.out_features, self.in_features)}
        if self.bias:
            shapes[f"{self.name}.b"] = (self.out_features,)
        return shapes

    def init_params(self, rng, dtype):
        w = rng.standard_normal((self.out_features, self.in_features)) * np.sqrt(
            2.0 / self.in_features
        )
        params = {self.weight_name: w.astype(dtype)}
        if self.bias:
            params[f"{self.name}.b"] = np.zeros(self.out_features, dtype=dtype)
        return params

    def out_shape(self, s):
        if len(s) != 1 or s[0] != self.in_features:
            raise ConfigError(f"{self.name}: expects ({self.in_features},) input, got {s}")
        return (self.out_features,)

    def forward(self, x, params, state, train):
        y = x @ params[self.weight_name].T
        if self.bias:
            y = y + params[f"{self.name}.b"]
        return y, x

    def backward(self, dy, cache, params):
        x = cache
        grads = {self.weight_name: dy.T @ x}
        if self.bias:
            grads[f"{self.name}.b"] = dy.sum(axis=0)
        dx = dy @ params[self.weight_name]
        return dx, grads
