"""Dense tensors, named parameters and the computation tape.

Operations (see :mod:`evpnet.ops`) record themselves on the innermost active
:class:`Tape` whenever one of their inputs requires a gradient.  Outside of a
tape nothing is recorded, which is how evaluation runs.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_local = threading.local()

DTYPES = {"f32": np.float32, "f64": np.float64}


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf while finite checks were enabled."""


def _state():
    if not hasattr(_local, "tapes"):
        _local.tapes = []
        _local.dtype = np.float32
        _local.debug = False
    return _local


def default_dtype():
    return _state().dtype


def set_default_dtype(dtype) -> None:
    _state().dtype = np.dtype(DTYPES.get(dtype, dtype)).type


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors ("f32" or "f64")."""
    st = _state()
    old = st.dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        st.dtype = old


def debug_enabled() -> bool:
    return _state().debug


def set_debug(flag: bool) -> None:
    _state().debug = bool(flag)


@contextlib.contextmanager
def debug(flag: bool = True):
    """Raise :class:`NonFiniteError` as soon as any op emits a non-finite value."""
    st = _state()
    old = st.debug
    st.debug = flag
    try:
        yield
    finally:
        st.debug = old


class Tensor:
    """An N-dimensional array with an optional gradient slot.

    Feature maps use the N x C x H x W layout.  Tensors are treated as
    immutable once an op has produced them.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype.kind == "f" else default_dtype()
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Operator sugar; the implementations live in evpnet.ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, _wrap(other, self))

    def __rsub__(self, other):
        from . import ops
        return ops.sub(_wrap(other, self), self)

    def __mul__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scale(self, other)
        return ops.mul(self, _wrap(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.neg(self)


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


class Parameter(Tensor):
    """A trainable tensor with a unique name and a gradient accumulator.

    ``decay`` marks whether weight decay applies to it.
    """

    __slots__ = ("name", "decay")

    def __init__(self, data, name: str = "", decay: bool = True, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.decay = decay
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


class _Record:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; ops executed inside record onto it.  A tape can
    be differentiated once, after which it must be :meth:`reset`.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._produced: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        _state().tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        tapes = _state().tapes
        if tapes and tapes[-1] is self:
            tapes.pop()
        else:  # pragma: no cover - misuse guard
            tapes.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward: Callable) -> None:
        if self._consumed:
            raise RuntimeError("tape already differentiated; call reset() before reuse")
        self.records.append(_Record(tuple(inputs), output, backward))
        self._produced.add(id(output))

    def reset(self) -> None:
        self.records.clear()
        self._produced.clear()
        self._consumed = False

    def _sweep(self, loss: Tensor, leaf_sink: Callable[[Tensor, np.ndarray], None]) -> None:
        if self._consumed:
            raise RuntimeError("backward called twice on the same tape without reset()")
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise ValueError("loss was not produced on this tape")
        self._consumed = True
        grads = {id(loss): np.ones_like(loss.data)}
        produced = self._produced
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for inp, gi in zip(rec.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in produced:
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
                else:
                    leaf_sink(inp, gi)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every requires-grad leaf's ``grad``."""

        def sink(leaf: Tensor, g: np.ndarray) -> None:
            g = g.astype(leaf.dtype, copy=False)
            if leaf.grad is None:
                leaf.grad = g.copy()
            else:
                leaf.grad = leaf.grad + g

        self._sweep(loss, sink)

    def grad(self, loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
        """Return gradients for ``wrt`` without touching any accumulator."""
        wrt = list(wrt)
        out = {id(t): np.zeros_like(t.data) for t in wrt}

        def sink(leaf: Tensor, g: np.ndarray) -> None:
            key = id(leaf)
            if key in out:
                out[key] = out[key] + g

        self._sweep(loss, sink)
        return [out[id(t)] for t in wrt]


def current_tape() -> Optional[Tape]:
    tapes = _state().tapes
    return tapes[-1] if tapes else None


@contextlib.contextmanager
def no_record():
    """Suspend recording, e.g. for evaluation forwards inside a training step."""
    st = _state()
    saved = st.tapes
    st.tapes = []
    try:
        yield
    finally:
        st.tapes = saved


def emit(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result, recording it on the active tape when needed."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    st = _state()
    if st.debug and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values emitted by {getattr(backward, '__qualname__', 'op')}")
    if st.tapes:
        for t in inputs:
            if t.requires_grad:
                out.requires_grad = True
                st.tapes[-1].record(inputs, out, backward)
                break
    return out


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)
