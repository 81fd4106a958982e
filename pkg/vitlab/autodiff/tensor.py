"""Dense tensors with a define-by-run gradient tape."""

from __future__ import annotations

from abc import ABC, abstractmethod
from contextlib import contextmanager
from contextvars import ContextVar
import logging
from typing import Any, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from vitlab.common import GraphError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]

_default_dtype: ContextVar[np.dtype] = ContextVar(
    "vitlab_default_dtype", default=np.dtype(np.float32)
)
_grad_enabled: ContextVar[bool] = ContextVar("vitlab_grad_enabled", default=True)
_active_tape: ContextVar[Optional["Tape"]] = ContextVar(
    "vitlab_active_tape", default=None
)


def default_dtype() -> np.dtype:
    return _default_dtype.get()


@contextmanager
def precision(dtype) -> Iterator[np.dtype]:
    """Temporarily change the dtype new tensors are created with."""
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"Unsupported precision {dtype}; use float32 or float64")
    token = _default_dtype.set(dtype)
    try:
        yield dtype
    finally:
        _default_dtype.reset(token)


@contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording them on the tape."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def grad_enabled() -> bool:
    return _grad_enabled.get()


class Function(ABC):
    """A differentiable operation recorded on the tape.

    ``forward`` receives the raw arrays of the inputs, ``backward`` receives
    the gradient of the output and returns one gradient (or None) per input.
    """

    def __init__(self, *inputs: "Tensor") -> None:
        self.inputs = inputs
        self.output: Optional[Tensor] = None
        self.tape: Optional[Tape] = None

    @abstractmethod
    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    @abstractmethod
    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: "Tensor", **kwargs: Any) -> "Tensor":
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        requires_grad = grad_enabled() and any(t.requires_grad for t in inputs)
        result = Tensor(out, requires_grad=requires_grad, dtype=out.dtype)
        if requires_grad:
            fn.output = result
            result._node = fn
            Tape.current().record(fn)
        return result

    def __repr__(self) -> str:
        shapes = ", ".join(str(t.shape) for t in self.inputs)
        return f"<{type(self).__name__}({shapes})>"


class Tape:
    """Ordered record of the operations of one forward pass.

    Nodes are appended in execution order, so the list is already
    topologically sorted. A backward pass consumes the tape.
    """

    def __init__(self) -> None:
        self.nodes: List[Function] = []

    @classmethod
    def current(cls) -> "Tape":
        tape = _active_tape.get()
        if tape is None:
            tape = cls()
            _active_tape.set(tape)
        return tape

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Function) -> None:
        node.tape = self
        self.nodes.append(node)

    def reset(self) -> None:
        for node in self.nodes:
            node.tape = None
        self.nodes = []

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise GraphError(
                f"Backward requires a scalar loss, got shape {loss.shape}"
            )
        if not loss.requires_grad or loss._node is None or loss._node.tape is not self:
            raise GraphError("Loss is detached from the gradient tape")

        pending = {id(loss): np.ones_like(loss.data)}
        visited = 0
        for node in reversed(self.nodes):
            grad = pending.pop(id(node.output), None)
            if grad is None:
                continue
            visited += 1
            input_grads = node.backward(grad)
            for tensor, g in zip(node.inputs, input_grads):
                if g is None or not tensor.requires_grad:
                    continue
                if g.shape != tensor.shape:
                    raise ShapeError(
                        f"{type(node).__name__} produced gradient of shape "
                        f"{g.shape} for input of shape {tensor.shape}"
                    )
                if tensor._node is None:
                    tensor._accumulate(g)
                elif id(tensor) in pending:
                    pending[id(tensor)] = pending[id(tensor)] + g
                else:
                    pending[id(tensor)] = g
        logger.debug("Backward visited %d of %d nodes", visited, len(self.nodes))
        self.reset()


def reverse_backward(loss: "Tensor") -> None:
    """Populate ``grad`` of every leaf that contributes to ``loss``."""
    tape = loss._node.tape if loss._node is not None else None
    if tape is None:
        raise GraphError("Loss is detached from the gradient tape")
    tape.backward(loss)


class Tensor:
    """Row-major dense array that can take part in reverse-mode autodiff."""

    __array_priority__ = 100

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype=None,
        name: Optional[str] = None,
    ) -> None:
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = default_dtype()
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Function] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        return Tensor(
            self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name
        )

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad += grad

    def backward(self) -> None:
        reverse_backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic -------------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return F.sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        return F.sub(other, self)

    def __mul__(self, other) -> "Tensor":
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            raise ShapeError("Division is only supported by Python scalars")
        return F.mul(self, 1.0 / other)

    def __neg__(self) -> "Tensor":
        return F.mul(self, -1.0)

    def __matmul__(self, other) -> "Tensor":
        return F.matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return F.index(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return F.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False, dtype=dtype)


from . import functional as F  # noqa: E402
