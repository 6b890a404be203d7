"""Minimal convolutional layers with explicit forward/backward passes.

Just enough machinery for the toy detector: strided 2-D convolution and a
smooth activation, all in numpy with analytically derived gradients (the
test suite checks every parameter against central finite differences, which
is why the activation is smooth rather than a ReLU with kinks).
"""

from __future__ import annotations

import numpy as np


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Conv2d:
    """Convolution with square kernel, configurable stride and zero padding."""

    def __init__(self, in_ch: int, out_ch: int, ksize: int, stride: int = 1,
                 pad: int = 0, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        fan_in = in_ch * ksize * ksize
        self.w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                            size=(out_ch, in_ch, ksize, ksize))
        self.b = np.zeros(out_ch)
        self.stride = stride
        self.pad = pad
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._cache = None

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.w.shape[2], self.stride, self.pad
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        k, s, p = self.w.shape[2], self.stride, self.pad
        oh, ow = self.out_size(h, w)
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        # gather kernel-offset slices into one (n, c*k*k, oh*ow) matrix so the
        # convolution is a single BLAS matmul
        cols = np.empty((n, c * k * k, oh * ow))
        idx = 0
        for ki in range(k):
            for kj in range(k):
                sl = xp[:, :, ki:ki + s * oh:s, kj:kj + s * ow:s]
                cols[:, idx * c:(idx + 1) * c, :] = sl.reshape(n, c, oh * ow)
                idx += 1
        w2 = self.w.transpose(2, 3, 1, 0).reshape(k * k * c, -1)  # (k*k*c, o)
        y = (cols.transpose(0, 2, 1) @ w2).transpose(0, 2, 1)
        y = y.reshape(n, -1, oh, ow) + self.b[None, :, None, None]
        self._cache = (cols, xp.shape, (h, w))
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        cols, xp_shape, (h, w) = self._cache
        n = dy.shape[0]
        k, s, p = self.w.shape[2], self.stride, self.pad
        c = self.w.shape[1]
        oh, ow = dy.shape[2], dy.shape[3]
        self.db += dy.sum(axis=(0, 2, 3))
        dyf = dy.reshape(n, -1, oh * ow)
        dw2 = np.zeros((k * k * c, self.w.shape[0]))
        for b in range(n):
            dw2 += cols[b] @ dyf[b].T
        self.dw += dw2.reshape(k, k, c, -1).transpose(3, 2, 0, 1)
        w2 = self.w.transpose(2, 3, 1, 0).reshape(k * k * c, -1)
        dcols = (dyf.transpose(0, 2, 1) @ w2.T).transpose(0, 2, 1)
        dxp = np.zeros(xp_shape)
        idx = 0
        for ki in range(k):
            for kj in range(k):
                dxp[:, :, ki:ki + s * oh:s, kj:kj + s * ow:s] += \
                    dcols[:, idx * c:(idx + 1) * c, :].reshape(n, c, oh, ow)
                idx += 1
        if p:
            return dxp[:, :, p:p + h, p:p + w]
        return dxp

    def params(self):
        return [self.w, self.b]

    def grads(self):
        return [self.dw, self.db]


class SiLU:
    """x * sigmoid(x): smooth everywhere, so finite differences agree."""

    def __init__(self):
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        s = sigmoid(x)
        self._cache = (x, s)
        return x * s

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x, s = self._cache
        return dy * (s * (1.0 + x * (1.0 - s)))


def zero_grads(layers) -> None:
    for layer in layers:
        if hasattr(layer, "dw"):
            layer.dw[:] = 0.0
            layer.db[:] = 0.0
