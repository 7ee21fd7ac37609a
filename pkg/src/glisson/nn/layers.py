"""Layers with explicit forward/backward passes on batched numpy arrays.

Image tensors are laid out ``(batch, channels, height, width)``; vectors are
``(batch, features)``.  Each layer caches what its backward pass needs during
``forward`` and writes parameter gradients into ``self.grads``.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def output_shape(self, shape: tuple) -> tuple:
        return shape

    def _expect(self, shape, ndim, what):
        if len(shape) != ndim:
            raise ShapeError(f"{self.kind}: expected {what}, got shape {shape}")


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in, n_out, rng, he=True, dtype=np.float64):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        std = np.sqrt(2.0 / n_in) if he else np.sqrt(1.0 / n_in)
        self.params["W"] = (rng.standard_normal((n_in, n_out)) * std).astype(dtype)
        self.params["b"] = np.zeros(n_out, dtype=dtype)

    def output_shape(self, shape):
        if shape != (self.n_in,):
            raise ShapeError(f"dense({self.n_in}->{self.n_out}): input shape {shape} does not match")
        return (self.n_out,)

    def forward(self, x, training=False):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"dense({self.n_in}->{self.n_out}): got input {x.shape}")
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dout):
        self.grads["W"] = self._x.T @ dout
        self.grads["b"] = dout.sum(axis=0)
        return dout @ self.params["W"].T


class Conv2D(Layer):
    """3x3 (or any odd ``k``) convolution, stride 1, zero 'same' padding."""

    kind = "conv2d"

    def __init__(self, c_in, c_out, rng, k=3, dtype=np.float64):
        super().__init__()
        if k % 2 != 1:
            raise ValueError("kernel size must be odd")
        self.c_in, self.c_out, self.k = c_in, c_out, k
        std = np.sqrt(2.0 / (c_in * k * k))
        self.params["W"] = (rng.standard_normal((c_out, c_in, k, k)) * std).astype(dtype)
        self.params["b"] = np.zeros(c_out, dtype=dtype)

    def output_shape(self, shape):
        self._expect(shape, 3, "(channels, height, width)")
        if shape[0] != self.c_in:
            raise ShapeError(f"conv2d({self.c_in}->{self.c_out}): input has {shape[0]} channels")
        return (self.c_out, shape[1], shape[2])

    def forward(self, x, training=False):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeError(f"conv2d({self.c_in}->{self.c_out}): got input {x.shape}")
        n, c, h, w = x.shape
        p = self.k // 2
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        # (n, c, h, w, k, k) -> (n, h, w, c, k, k) -> rows of c*k*k taps
        win = sliding_window_view(xp, (self.k, self.k), axis=(2, 3))
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * self.k * self.k)
        self._cols = cols
        self._xshape = x.shape
        wmat = self.params["W"].reshape(self.c_out, -1)
        out = cols @ wmat.T + self.params["b"]
        return out.reshape(n, h, w, self.c_out).transpose(0, 3, 1, 2)

    def backward(self, dout):
        n, c, h, w = self._xshape
        k, p = self.k, self.k // 2
        d = dout.transpose(0, 2, 3, 1).reshape(n * h * w, self.c_out)
        self.grads["W"] = (d.T @ self._cols).reshape(self.params["W"].shape)
        self.grads["b"] = d.sum(axis=0)
        dcols = (d @ self.params["W"].reshape(self.c_out, -1)).reshape(n, h, w, c, k, k)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, p:p + h, p:p + w]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=False):
        self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, dout):
        return dout * self._mask


class MaxPool2(Layer):
    """2x2 max pooling, stride 2; an odd trailing row/column is dropped.

    Tied maxima share the incoming gradient equally.
    """

    kind = "maxpool2"

    def output_shape(self, shape):
        self._expect(shape, 3, "(channels, height, width)")
        if shape[1] < 2 or shape[2] < 2:
            raise ShapeError(f"maxpool2: spatial size {shape[1:]} too small")
        return (shape[0], shape[1] // 2, shape[2] // 2)

    def forward(self, x, training=False):
        if x.ndim != 4:
            raise ShapeError(f"maxpool2: got input {x.shape}")
        n, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        self._xshape = x.shape
        xr = x[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2)
        out = xr.max(axis=(3, 5))
        mask = xr == out[:, :, :, None, :, None]
        counts = mask.sum(axis=(3, 5), keepdims=True)
        self._route = mask / counts.astype(x.dtype)
        return out

    def backward(self, dout):
        n, c, h, w = self._xshape
        h2, w2 = h // 2, w // 2
        grad = (self._route * dout[:, :, :, None, :, None]).reshape(n, c, 2 * h2, 2 * w2)
        if (2 * h2, 2 * w2) == (h, w):
            return grad
        dx = np.zeros(self._xshape, dtype=dout.dtype)
        dx[:, :, :2 * h2, :2 * w2] = grad
        return dx


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, training=False):
        self._xshape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._xshape)


class Dropout(Layer):
    """Inverted dropout; identity outside training."""

    kind = "dropout"

    def __init__(self, rate, rng):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng

    def forward(self, x, training=False):
        if not training or self.rate == 0.0:
            self._mask = None
            return x
        keep = 1.0 - self.rate
        self._mask = (self.rng.random(x.shape) < keep).astype(x.dtype) / keep
        return x * self._mask

    def backward(self, dout):
        return dout if self._mask is None else dout * self._mask


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, training=False):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        self._out = e / e.sum(axis=1, keepdims=True)
        return self._out

    def backward(self, dout):
        s = self._out
        return s * (dout - (dout * s).sum(axis=1, keepdims=True))


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))
