"""Dense numeric layers with explicit forward/backward passes.

Everything runs in float64. Each layer's ``forward`` returns the output plus
an opaque context object; ``backward`` consumes that context, accumulates
parameter gradients in place, and returns the input gradient.
"""

from __future__ import annotations

import numpy as np


class TensorBuffer:
    """Dense parameter storage with paired gradient storage."""

    __slots__ = ("name", "shape", "values", "grad")

    def __init__(self, name: str, values: np.ndarray):
        self.name = name
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        self.shape = self.values.shape
        self.grad = np.zeros_like(self.values)

    def zero_grad(self):
        self.grad[...] = 0.0

    @property
    def size(self) -> int:
        return self.values.size


def glorot_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    name = "layer"

    def params(self) -> list[TensorBuffer]:
        return []

    def out_shape(self, in_shape: tuple) -> tuple:
        raise NotImplementedError

    def forward(self, x: np.ndarray):
        raise NotImplementedError

    def backward(self, dy: np.ndarray, ctx):
        raise NotImplementedError


class Conv2d(Layer):
    """Valid (no padding) square convolution via im2col."""

    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int, rng, name="conv"):
        self.in_ch, self.out_ch, self.k, self.stride = in_ch, out_ch, k, stride
        self.name = name
        fan_in = in_ch * k * k
        fan_out = out_ch * k * k
        self.w = TensorBuffer(f"{name}.w", glorot_uniform((out_ch, in_ch, k, k), fan_in, fan_out, rng))
        self.b = TensorBuffer(f"{name}.b", np.zeros(out_ch))

    def params(self):
        return [self.w, self.b]

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ValueError(f"{self.name}: expected (C,H,W) input, got {in_shape}")
        c, h, w = in_shape
        if c != self.in_ch:
            raise ValueError(f"{self.name}: expected {self.in_ch} input channels, got {c}")
        if h < self.k or w < self.k:
            raise ValueError(f"{self.name}: {h}x{w} input smaller than {self.k}x{self.k} kernel")
        oh = (h - self.k) // self.stride + 1
        ow = (w - self.k) // self.stride + 1
        return (self.out_ch, oh, ow)

    def _im2col(self, x):
        bsz, c, h, w = x.shape
        k, s = self.k, self.stride
        oh = (h - k) // s + 1
        ow = (w - k) // s + 1
        cols = np.empty((bsz, c, k, k, oh, ow))
        for ki in range(k):
            for kj in range(k):
                cols[:, :, ki, kj] = x[:, :, ki : ki + s * oh : s, kj : kj + s * ow : s]
        return cols.reshape(bsz, c * k * k, oh * ow), oh, ow

    def forward(self, x):
        bsz = x.shape[0]
        cols, oh, ow = self._im2col(x)
        wmat = self.w.values.reshape(self.out_ch, -1)
        y = np.matmul(wmat, cols) + self.b.values[:, None]
        return y.reshape(bsz, self.out_ch, oh, ow), (cols, x.shape, oh, ow)

    def backward(self, dy, ctx):
        cols, x_shape, oh, ow = ctx
        bsz = dy.shape[0]
        k, s = self.k, self.stride
        dym = dy.reshape(bsz, self.out_ch, oh * ow)
        self.w.grad += np.tensordot(dym, cols, axes=([0, 2], [0, 2])).reshape(self.w.shape)
        self.b.grad += dy.sum(axis=(0, 2, 3))
        wmat = self.w.values.reshape(self.out_ch, -1)
        dcols = np.matmul(wmat.T, dym).reshape(bsz, self.in_ch, k, k, oh, ow)
        dx = np.zeros(x_shape)
        for ki in range(k):
            for kj in range(k):
                dx[:, :, ki : ki + s * oh : s, kj : kj + s * ow : s] += dcols[:, :, ki, kj]
        return dx


class Dense(Layer):
    """Affine layer; flattens any non-batch dimensions on the way in."""

    def __init__(self, in_dim: int, out_dim: int, rng, name="dense"):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.name = name
        self.w = TensorBuffer(f"{name}.w", glorot_uniform((in_dim, out_dim), in_dim, out_dim, rng))
        self.b = TensorBuffer(f"{name}.b", np.zeros(out_dim))

    def params(self):
        return [self.w, self.b]

    def out_shape(self, in_shape):
        flat = int(np.prod(in_shape))
        if flat != self.in_dim:
            raise ValueError(f"{self.name}: expected {self.in_dim} inputs, got {in_shape}")
        return (self.out_dim,)

    def forward(self, x):
        orig_shape = x.shape
        xf = x.reshape(orig_shape[0], -1)
        return xf @ self.w.values + self.b.values, (xf, orig_shape)

    def backward(self, dy, ctx):
        xf, orig_shape = ctx
        self.w.grad += xf.T @ dy
        self.b.grad += dy.sum(axis=0)
        return (dy @ self.w.values.T).reshape(orig_shape)


class Relu(Layer):
    name = "relu"

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, dy, ctx):
        return np.where(ctx, dy, 0.0)


class Standardize(Layer):
    """Per-feature whitening over the batch: each column of the flattened
    (B, F) view ends with mean 0 and variance 1 (population variance,
    eps = 1e-5 inside the denominator). There are no running statistics:
    the output of a row depends on the whole batch, so callers must batch
    consistently. Requires batch size >= 2."""

    name = "standardize"
    eps = 1e-5

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        if x.shape[0] < 2:
            raise ValueError("standardize requires batch size >= 2")
        orig_shape = x.shape
        xf = x.reshape(orig_shape[0], -1)
        mu = xf.mean(axis=0)
        var = np.mean((xf - mu) ** 2, axis=0)
        std = np.sqrt(var + self.eps)
        xhat = (xf - mu) / std
        return xhat.reshape(orig_shape), (xhat, std, orig_shape)

    def backward(self, dy, ctx):
        xhat, std, orig_shape = ctx
        dyf = dy.reshape(orig_shape[0], -1)
        dx = (dyf - dyf.mean(axis=0) - xhat * np.mean(dyf * xhat, axis=0)) / std
        return dx.reshape(orig_shape)


class GlobalMeanPool(Layer):
    name = "pool"

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ValueError(f"pool: expected (C,H,W) input, got {in_shape}")
        return (in_shape[0],)

    def forward(self, x):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, dy, ctx):
        _, _, h, w = ctx
        return np.broadcast_to(dy[:, :, None, None] / (h * w), ctx).copy()


class L2Norm(Layer):
    """Row-wise projection onto the unit sphere."""

    name = "l2norm"

    def out_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ValueError(f"l2norm: expected flat input, got {in_shape}")
        return in_shape

    def forward(self, x):
        n = np.sqrt((x * x).sum(axis=1, keepdims=True))
        n = np.maximum(n, 1e-300)
        y = x / n
        return y, (y, n)

    def backward(self, dy, ctx):
        y, n = ctx
        return (dy - y * (dy * y).sum(axis=1, keepdims=True)) / n
