"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a row-major numpy buffer. Operations are subclasses of
:class:`Function`; when a :class:`GradTape` is active on the current thread and
any input requires a gradient, the output is recorded on that tape together
with the function instance that knows its backward rule. Outside a tape every
operation is a plain, non-tracking numpy computation, which is what makes
concurrent inference on frozen parameters safe.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Any, Iterator, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Function",
    "GradTape",
    "ShapeError",
    "NonFiniteError",
    "GradientError",
    "backward",
    "no_grad",
    "get_default_dtype",
    "set_default_dtype",
    "default_dtype",
    "record_shapes",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class GradientError(RuntimeError):
    """Raised for misuse of the differentiation machinery."""


_state = threading.local()
_default_dtype = np.dtype(np.float32)


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise TypeError(f"unsupported element type {dtype}; use float32 or float64")
    _default_dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the element type used for new tensors."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def _active_tape() -> Optional["GradTape"]:
    return getattr(_state, "tape", None)


@contextlib.contextmanager
def record_shapes() -> Iterator[list]:
    """Record the shape of every tensor produced by an operation on this thread.

    Used as an allocation probe: the yielded list fills with ``(op_name, shape)``
    pairs while the context is active.
    """
    log: list = []
    stack = getattr(_state, "probes", None)
    if stack is None:
        stack = _state.probes = []
    stack.append(log)
    try:
        yield log
    finally:
        stack.remove(log)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording on the current thread's tape."""
    tape = _active_tape()
    _state.tape = None
    try:
        yield
    finally:
        _state.tape = tape


class Tensor:
    """A dense n-dimensional array with optional gradient tracking.

    Args:
        data: array-like contents. Floating numpy arrays keep their dtype
            unless ``dtype`` is given; everything else uses the default dtype.
        requires_grad: whether gradients should flow into this tensor.
        dtype: explicit element type (float32 or float64).
    """

    __array_priority__ = 100

    def __init__(self, data: Any, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _default_dtype
        arr = np.asarray(data, dtype=dtype)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._ctx: Optional[Function] = None
        self._tape: Optional[GradTape] = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
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
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar (implemented in ops) -------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def sum(self, axis=None):
        from . import ops
        return ops.sum(self, axis)

    def mean(self, axis=None):
        from . import ops
        return ops.mean(self, axis)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    @property
    def T(self):
        from . import ops
        return ops.swap_last(self)


class Parameter(Tensor):
    """A leaf tensor that is learnable; always requires a gradient."""

    def __init__(self, data: Any, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape}, dtype={self.dtype})"


def as_tensor(x: Any, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


class Function:
    """Base class for differentiable operations.

    Subclasses implement ``forward`` on numpy arrays (stashing whatever the
    backward rule needs on ``self``) and ``backward``, which maps the upstream
    gradient to one gradient per input (``None`` where no gradient flows).
    """

    name = "op"

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Any, **kwargs) -> Tensor:
        tensors = tuple(as_tensor(t) for t in inputs)
        fn = cls(*tensors)
        out_data = fn.forward(*(t.data for t in tensors), **kwargs)
        if not np.all(np.isfinite(out_data)):
            raise NonFiniteError(f"{fn.name} produced non-finite values (output shape {out_data.shape})")
        out = Tensor(out_data, dtype=out_data.dtype)
        probes = getattr(_state, "probes", None)
        if probes:
            for log in probes:
                log.append((fn.name, out.shape))
        tape = _active_tape()
        if tape is not None and any(t.requires_grad for t in tensors):
            out.requires_grad = True
            out._ctx = fn
            tape._record(out)
        return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class GradTape:
    """Ordered record of tracked operations for one training step.

    Use as a context manager; operations executed inside it on tensors that
    require gradients are appended in execution order, which is already a
    topological order of the computation graph.

    Example:
        >>> with GradTape() as tape:
        ...     loss = (x * y).sum()
        >>> tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._previous: Optional[GradTape] = None

    def __enter__(self) -> "GradTape":
        self._previous = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._previous
        self._previous = None

    def _record(self, out: Tensor) -> None:
        out._tape = self
        self.nodes.append(out)

    def backward(self, loss: Tensor, retain_graph: bool = False) -> None:
        """Replay the recorded operations in reverse from ``loss``.

        Unless ``retain_graph`` is set, the recorded graph is released
        afterwards (it is a reference cycle that would otherwise keep every
        intermediate activation alive until the cyclic collector runs).
        """
        if loss.size != 1:
            raise GradientError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise GradientError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        position = self.nodes.index(loss)
        for node in reversed(self.nodes[: position + 1]):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            fn = node._ctx
            for inp, gi in zip(fn.inputs, fn.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                gi = _unbroadcast(np.asarray(gi, dtype=inp.dtype), inp.shape)
                if inp._ctx is None:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                elif id(inp) in grads:
                    grads[id(inp)] = grads[id(inp)] + gi
                else:
                    grads[id(inp)] = gi
        if not retain_graph:
            self.release()

    def release(self) -> None:
        """Drop the recorded graph; recorded outputs become plain tensors."""
        for node in self.nodes:
            node._ctx, node._tape = None, None
        self.nodes = []


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Populate ``.grad`` on every leaf that ``loss`` depends on.

    Raises:
        GradientError: if ``loss`` is not a scalar or was computed without an
            active tape.
    """
    if loss.size != 1:
        raise GradientError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise GradientError("loss has no tape; compute it inside a GradTape context")
    loss._tape.backward(loss, retain_graph)
