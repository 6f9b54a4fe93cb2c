"""Dense float64 tensors with a reverse-mode gradient tape.

Every differentiable operation appends a record to the active :class:`GradTape`
when at least one of its inputs requires a gradient. ``backward`` replays the
records of the loss's tape in exact reverse recording order, accumulating
gradients into the ``grad`` field of leaf tensors.

Repeated backward calls *accumulate* into leaf gradients; call
:meth:`Tensor.zero_grad` (or :func:`zero_grads`) between steps.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class _State(threading.local):
    def __init__(self) -> None:
        self.tapes: list[GradTape] = []
        self.grad_enabled = True
        self.strict = False


_state = _State()


class Record(NamedTuple):
    op: str
    out: "Tensor"
    inputs: tuple["Tensor", ...]
    backward: BackwardFn


class GradTape:
    """Ordered log of differentiable operations.

    Use as a context manager to make it the active tape::

        with GradTape() as tape:
            loss = (x * x).sum()
        tape.backward(loss)
    """

    def __init__(self) -> None:
        self.records: list[Record] = []

    def __enter__(self) -> "GradTape":
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _state.tapes.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.records)

    def ops(self) -> list[str]:
        return [r.op for r in self.records]

    def _append(self, op: str, out: "Tensor", inputs: tuple["Tensor", ...], backward: BackwardFn) -> None:
        out._tape = self
        out._index = len(self.records)
        self.records.append(Record(op, out, inputs, backward))

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.run_backward([(loss, np.ones_like(loss.data))])

    def run_backward(self, seeds: Iterable[tuple["Tensor", np.ndarray]]) -> None:
        """Propagate explicit upstream gradients ``seeds`` back to the leaves."""
        grads: dict[int, np.ndarray] = {}
        stop = -1
        for t, g in seeds:
            g = np.asarray(g, dtype=np.float64)
            if g.shape != t.data.shape:
                raise ShapeError(f"seed gradient shape {g.shape} != tensor shape {t.shape}")
            if t._tape is None:
                if t.requires_grad:
                    t._accumulate(g)
                continue
            if t._tape is not self:
                raise ContractError("seed tensor was recorded on a different tape")
            grads[id(t)] = grads[id(t)] + g if id(t) in grads else g
            stop = max(stop, t._index)
        for i in range(stop, -1, -1):
            rec = self.records[i]
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for inp, gi in zip(rec.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._tape is None:
                    inp._accumulate(gi)
                else:
                    key = id(inp)
                    grads[key] = grads[key] + gi if key in grads else gi


_default_tape = GradTape()


def active_tape() -> GradTape:
    return _state.tapes[-1] if _state.tapes else _default_tape


def reset_default_tape() -> None:
    """Drop everything recorded outside an explicit ``GradTape`` context."""
    _default_tape.records.clear()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def set_strict(flag: bool) -> None:
    """When strict, every op raises :class:`NumericError` on NaN/Inf output."""
    _state.strict = bool(flag)


def is_strict() -> bool:
    return _state.strict


@contextlib.contextmanager
def strict(flag: bool = True) -> Iterator[None]:
    prev = _state.strict
    _state.strict = flag
    try:
        yield
    finally:
        _state.strict = prev


class Tensor:
    """N-dimensional float64 array that may participate in a gradient tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None) -> None:
        arr = np.array(data, dtype=np.float64)
        if any(n <= 0 for n in arr.shape):
            raise ShapeError(f"extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._tape: GradTape | None = None
        self._index = -1

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        t._tape = None
        t._index = -1
        return t

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- gradients -----------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor / tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def abs(self):
        return tabs(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64), False)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf that ``loss`` depends on."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    if loss._tape is None:
        loss._accumulate(np.ones_like(loss.data))
        return
    loss._tape.backward(loss)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def check_finite(data: np.ndarray, op: str) -> None:
    if _state.strict and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by {op}")


def make_result(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    """Wrap ``data`` as an op output, recording it on the active tape if needed."""
    check_finite(data, op)
    needs = _state.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, needs)
    if needs:
        tape = active_tape()
        for t in inputs:
            if t._tape is not None and t._tape is not tape:
                raise ContractError(f"{op}: input was recorded on a different tape")
        tape._append(op, out, inputs, backward_fn)
    return out


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_result(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_result(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return make_result(
        "mul", ad * bd, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    ad = a.data
    out = ad ** exponent
    return make_result(
        "pow", out, (a,), lambda g: (g * exponent * ad ** (exponent - 1.0),)
    )


def tabs(a: Tensor) -> Tensor:
    ad = a.data
    return make_result("abs", np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def leaky_relu(a: Tensor, negative_slope: float = 0.1) -> Tensor:
    ad = a.data
    slope = np.where(ad > 0, 1.0, negative_slope)
    return make_result("leaky_relu", ad * slope, (a,), lambda g: (g * slope,))


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return make_result("sum", np.asarray(out, dtype=np.float64), (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis) * (1.0 / float(n))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return make_result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a: Tensor, key) -> Tensor:
    shape = a.shape
    out = np.array(a.data[key], dtype=np.float64)

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return make_result("getitem", out, (a,), bw)


def flip(a: Tensor, axis: int) -> Tensor:
    return make_result("flip", np.flip(a.data, axis).copy(), (a,), lambda g: (np.flip(g, axis).copy(),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    ref = tensors[0].shape
    for i, t in enumerate(tensors[1:], 1):
        if t.ndim != len(ref) or any(
            t.shape[d] != ref[d] for d in range(len(ref)) if d != axis % len(ref)
        ):
            raise ShapeError(f"concat: input {i} shape {t.shape} incompatible with {ref} off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return make_result("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)
