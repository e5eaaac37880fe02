"""Standard network building blocks with explicit forward/backward passes.

Every layer caches on forward exactly what its backward needs; backward
consumes the cache, so calling it a second time without a fresh forward
raises :class:`NoCachedForward`.  Parameter gradients land on
``Parameter.grad`` and backward returns the input gradient.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .ops import DTYPE, ShapeError, as_tensor, log_softmax, softmax

STANDARD, NOVEL = "standard", "novel"


class NoCachedForward(RuntimeError):
    """backward was called without a preceding (training-mode) forward."""


class Parameter:
    """A named trainable array with its gradient and learning-rate tag."""

    __slots__ = ("name", "data", "grad", "tag")

    def __init__(self, name: str, data: np.ndarray, tag: str = STANDARD):
        self.name = name
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad = None
        self.tag = tag

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.data.shape}, tag={self.tag})"


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """He-uniform draw: U(-sqrt(6/fan_in), +sqrt(6/fan_in))."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    """Base class: forward caches, backward consumes the cache once."""

    def params(self) -> list[Parameter]:
        return []

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        raise NotImplementedError

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _take_cache(self):
        cache = getattr(self, "_cache", None)
        if cache is None:
            raise NoCachedForward(f"{type(self).__name__}.backward without forward")
        self._cache = None
        return cache


class LinearLayer(Layer):
    """y = x W^T + b with W shaped (out_units, in_units)."""

    def __init__(self, in_units: int, out_units: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_units = in_units
        self.out_units = out_units
        self.W = Parameter("W", kaiming_uniform(rng, (out_units, in_units), in_units))
        self.b = Parameter("b", np.zeros(out_units))
        self._cache = None

    def params(self):
        return [self.W, self.b]

    def forward(self, x, train: bool = True):
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.in_units:
            raise ShapeError(f"expected (batch, {self.in_units}), got {x.shape}")
        if train:
            self._cache = x
        return x @ self.W.data.T + self.b.data

    def backward(self, upstream):
        x = self._take_cache()
        upstream = as_tensor(upstream)
        self.W.grad = upstream.T @ x
        self.b.grad = upstream.sum(axis=0)
        return upstream @ self.W.data


class ReLULayer(Layer):
    """max(0, x); the gradient is zero at exactly 0."""

    def __init__(self):
        self._cache = None

    def forward(self, x, train: bool = True):
        x = as_tensor(x)
        if train:
            self._cache = x
        return np.maximum(x, 0.0)

    def backward(self, upstream):
        x = self._take_cache()
        return np.where(x > 0, upstream, 0.0)


class FlattenLayer(Layer):
    """(batch, ...) -> (batch, prod(...))."""

    def __init__(self):
        self._cache = None

    def forward(self, x, train: bool = True):
        x = as_tensor(x)
        if train:
            self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, upstream):
        shape = self._take_cache()
        return as_tensor(upstream).reshape(shape)


class ConvLayer(Layer):
    """3x3 convolution, stride 1, pad 1: spatial size is preserved."""

    KSIZE = 3

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch = in_ch
        self.out_ch = out_ch
        fan_in = in_ch * self.KSIZE * self.KSIZE
        self.kernels = Parameter(
            "kernels", kaiming_uniform(rng, (out_ch, in_ch, self.KSIZE, self.KSIZE), fan_in)
        )
        self.bias = Parameter("bias", np.zeros(out_ch))
        self._cache = None

    def params(self):
        return [self.kernels, self.bias]

    def forward(self, x, train: bool = True):
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(f"expected (batch, {self.in_ch}, H, W), got {x.shape}")
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        win = sliding_window_view(xp, (self.KSIZE, self.KSIZE), axis=(2, 3))
        out = np.einsum("bchwij,ocij->bohw", win, self.kernels.data, optimize=True)
        out += self.bias.data[None, :, None, None]
        if train:
            self._cache = (x.shape, win)
        return out

    def backward(self, upstream):
        (xshape, win) = self._take_cache()
        upstream = as_tensor(upstream)
        B, _, H, W = xshape
        self.kernels.grad = np.einsum("bohw,bchwij->ocij", upstream, win, optimize=True)
        self.bias.grad = upstream.sum(axis=(0, 2, 3))
        dxp = np.zeros((B, self.in_ch, H + 2, W + 2))
        K = self.kernels.data
        for di in range(self.KSIZE):
            for dj in range(self.KSIZE):
                dxp[:, :, di : di + H, dj : dj + W] += np.einsum(
                    "bohw,oc->bchw", upstream, K[:, :, di, dj], optimize=True
                )
        return dxp[:, :, 1 : H + 1, 1 : W + 1]


class MaxPool2x2Layer(Layer):
    """2x2 max pooling, stride 2; gradient routes to the window argmax.

    Ties go to the first position in row-major window order.
    """

    def __init__(self):
        self._cache = None

    def forward(self, x, train: bool = True):
        x = as_tensor(x)
        B, C, H, W = x.shape
        if H % 2 or W % 2:
            raise ShapeError(f"spatial dims must be even, got {x.shape}")
        win = x.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(B, C, H // 2, W // 2, 4)
        idx = np.argmax(win, axis=-1)
        if train:
            self._cache = (x.shape, idx)
        return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(self, upstream):
        (xshape, idx) = self._take_cache()
        upstream = as_tensor(upstream)
        B, C, H, W = xshape
        dwin = np.zeros((B, C, H // 2, W // 2, 4))
        np.put_along_axis(dwin, idx[..., None], upstream[..., None], axis=-1)
        dwin = dwin.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return dwin.reshape(B, C, H, W)


def softmax_xent(logits, labels):
    """Mean cross-entropy over the batch and its logit gradient.

    Returns ``(loss, dlogits)`` with dlogits = (softmax - onehot) / batch.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    B, C = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"labels must be ({B},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"label out of range [0, {C})")
    logp = log_softmax(logits, axis=1)
    loss = -logp[np.arange(B), labels].mean()
    dlogits = softmax(logits, axis=1)
    dlogits[np.arange(B), labels] -= 1.0
    return loss, dlogits / B
