"""Differentiable operations used by the transformer.

Broadcasting is limited to the two cases the model needs: a trailing
vector (biases, norm parameters) and a leading batch axis (positional
embeddings, class tokens). Anything else is rejected.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import erf

from vitlab.common import ShapeError
from .tensor import Function, Tensor, as_tensor

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    if a == b:
        return a
    for big, small in ((a, b), (b, a)):
        trimmed = _strip_leading_ones(small)
        if len(big) >= len(trimmed) and big[len(big) - len(trimmed) :] == trimmed:
            return big
    raise ShapeError(f"Cannot broadcast shapes {a} and {b}")


def _strip_leading_ones(shape: Tuple[int, ...]) -> Tuple[int, ...]:
    i = 0
    while i < len(shape) and shape[i] == 1:
        i += 1
    return shape[i:]


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    trimmed = _strip_leading_ones(shape)
    extra = grad.ndim - len(trimmed)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad.reshape(shape)


def _lift(value, like: Tensor) -> Tensor:
    return as_tensor(value, dtype=like.dtype)


class Add(Function):
    def forward(self, a, b):
        broadcast_shape(a.shape, b.shape)
        return a + b

    def backward(self, grad):
        a, b = self.inputs
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)


class Sub(Function):
    def forward(self, a, b):
        broadcast_shape(a.shape, b.shape)
        return a - b

    def backward(self, grad):
        a, b = self.inputs
        return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)


class Mul(Function):
    def forward(self, a, b):
        broadcast_shape(a.shape, b.shape)
        return a * b

    def backward(self, grad):
        a, b = self.inputs
        return (
            _unbroadcast(grad * b.data, a.shape),
            _unbroadcast(grad * a.data, b.shape),
        )


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    return Add.apply(a, _lift(b, a))


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    return Sub.apply(a, _lift(b, a))


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    return Mul.apply(a, _lift(b, a))


class MatMul(Function):
    def forward(self, a, b):
        _check_matmul(a.shape, b.shape)
        return np.matmul(a, b)

    def backward(self, grad):
        a, b = self.inputs
        grad_a = np.matmul(grad, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2 and a.ndim > 2:
            k, n = b.shape
            grad_b = a.data.reshape(-1, k).T @ grad.reshape(-1, n)
        else:
            grad_b = np.matmul(np.swapaxes(a.data, -1, -2), grad)
        return grad_a, grad_b


def _check_matmul(a: Tuple[int, ...], b: Tuple[int, ...]) -> None:
    if len(a) < 2 or len(b) < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a} and {b}")
    if a[-1] != b[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a} @ {b}")
    if len(b) > 2 and a[:-2] != b[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a} @ {b}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


tensor_matmul = matmul


class Reshape(Function):
    def forward(self, a, shape):
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.inputs[0].shape),)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


class Transpose(Function):
    def forward(self, a, axes):
        self.axes = axes
        return np.transpose(a, axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    return Transpose.apply(a, axes=tuple(axes))


class Index(Function):
    def forward(self, a, index):
        self.index = index
        return np.array(a[index])

    def backward(self, grad):
        (a,) = self.inputs
        full = np.zeros_like(a.data)
        np.add.at(full, self.index, grad)
        return (full,)


def index(a: Tensor, idx) -> Tensor:
    return Index.apply(a, index=idx)


class Concat(Function):
    def forward(self, *arrays, axis):
        self.axis = axis
        self.sizes = [arr.shape[axis] for arr in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, splits, axis=self.axis))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


class Sum(Function):
    def forward(self, a, axis, keepdims):
        self.axis = axis
        self.keepdims = keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        (a,) = self.inputs
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, a.shape).copy(),)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


class Softmax(Function):
    def forward(self, x, axis):
        if not -x.ndim <= axis < x.ndim:
            raise ShapeError(f"softmax axis {axis} is invalid for shape {x.shape}")
        if x.shape[axis] == 0:
            raise ShapeError(f"softmax over an empty axis (shape {x.shape})")
        self.axis = axis
        shifted = np.exp(x - x.max(axis=axis, keepdims=True))
        self.out = shifted / shifted.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - (grad * y).sum(axis=self.axis, keepdims=True)),)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


class LayerNorm(Function):
    def forward(self, x, gamma, beta, eps):
        if eps <= 0:
            raise ValueError(f"layer_norm eps must be positive, got {eps}")
        if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
            raise ShapeError(
                f"layer_norm parameters {gamma.shape}/{beta.shape} do not match "
                f"last axis of {x.shape}"
            )
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        self.rstd = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mu) * self.rstd
        return self.xhat * gamma + beta

    def backward(self, grad):
        _, gamma, _ = self.inputs
        xhat, rstd = self.xhat, self.rstd
        lead = tuple(range(grad.ndim - 1))
        grad_gamma = (grad * xhat).sum(axis=lead)
        grad_beta = grad.sum(axis=lead)
        g = grad * gamma.data
        grad_x = rstd * (
            g
            - g.mean(axis=-1, keepdims=True)
            - xhat * (g * xhat).mean(axis=-1, keepdims=True)
        )
        return grad_x, grad_gamma, grad_beta


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    return LayerNorm.apply(x, gamma, beta, eps=eps)


class GELU(Function):
    """Exact GELU, x * Phi(x), using the error function."""

    def forward(self, x):
        self.cdf = 0.5 * (1.0 + erf(x / _SQRT2))
        return x * self.cdf

    def backward(self, grad):
        x = self.inputs[0].data
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (grad * (self.cdf + x * pdf),)


def gelu(x: Tensor) -> Tensor:
    return GELU.apply(x)


class Dropout(Function):
    def forward(self, x, mask):
        self.mask = mask
        return x * mask

    def backward(self, grad):
        return (grad * self.mask,)


def dropout(
    x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool
) -> Tensor:
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
    return Dropout.apply(x, mask=mask)
