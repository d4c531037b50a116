"""Tensor, tape and reverse-mode backward pass."""

from __future__ import annotations

import threading
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from neurogen.gradcore import kernels as _kernels

SINGLE = "single"
DOUBLE = "double"
_DTYPES = {SINGLE: np.float32, DOUBLE: np.float64}


class GradError(RuntimeError):
    """Raised for misuse of the tape or the backward pass."""


class ShapeError(ValueError):
    """A kernel received inputs whose shapes do not conform."""


def precision_of(dtype) -> str:
    dtype = np.dtype(dtype)
    if dtype == np.float32:
        return SINGLE
    if dtype == np.float64:
        return DOUBLE
    raise TypeError(f"unsupported dtype {dtype}; expected float32 or float64")


class Tensor:
    """Dense row-major array with an optional gradient requirement.

    Identity semantics: two tensors are the same key in a gradient map
    only if they are the same object.
    """

    __slots__ = ("data", "requires_grad", "_op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, precision: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if precision is not None:
            arr = np.asarray(data, dtype=_DTYPES[precision])
        else:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self._op = None  # set when produced by a recorded kernel

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def precision(self) -> str:
        return precision_of(self.data.dtype)

    @property
    def is_leaf(self) -> bool:
        return self._op is None

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, precision={self.precision}{grad})"

    # operator sugar over apply_kernel
    def __add__(self, other):
        return apply_kernel("add", [self, _as_tensor(other, self)])

    def __mul__(self, other):
        if np.isscalar(other):
            return apply_kernel("mul", [self], scalar=float(other))
        return apply_kernel("mul", [self, _as_tensor(other, self)])

    __rmul__ = __mul__

    def __neg__(self):
        return apply_kernel("mul", [self], scalar=-1.0)

    def __sub__(self, other):
        return self + (-_as_tensor(other, self))

    def __matmul__(self, other):
        return apply_kernel("matmul", [self, other])

    def __getitem__(self, index):
        if not isinstance(index, tuple):
            index = (index,)
        return apply_kernel("slice_view", [self], index=index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply_kernel("reshape", [self], shape=shape)


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


class _Record:
    __slots__ = ("kind", "inputs", "output", "attrs", "ctx")

    def __init__(self, kind, inputs, output, attrs, ctx):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.attrs = attrs
        self.ctx = ctx


_state = threading.local()


def _tape_stack() -> list["GradTape"]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> "GradTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class GradTape:
    """Records differentiable kernel applications in execution order.

    Use as a context manager; a tape is bound to the thread that opened it
    and can be consumed by exactly one backward pass.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def _record(self, rec: _Record) -> None:
        if self.consumed:
            raise GradError("cannot record onto a consumed tape")
        for t in rec.inputs:
            if t.requires_grad and t.is_leaf:
                self._leaves.setdefault(id(t), t)
        self.records.append(rec)

    @property
    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())


class GradMap(Mapping):
    """Gradient map keyed by tensor identity."""

    def __init__(self):
        self._grads: dict[int, np.ndarray] = {}
        self._keys: dict[int, Tensor] = {}

    def _set(self, tensor: Tensor, grad: np.ndarray) -> None:
        self._grads[id(tensor)] = grad
        self._keys[id(tensor)] = tensor

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        return self._grads[id(tensor)]

    def __contains__(self, tensor) -> bool:
        return isinstance(tensor, Tensor) and id(tensor) in self._grads

    def __iter__(self):
        return iter(self._keys.values())

    def __len__(self) -> int:
        return len(self._grads)


def apply_kernel(kind: str, inputs: Sequence[Tensor], **attrs: Any) -> Tensor:
    """Run kernel ``kind`` on ``inputs`` and record it when gradients are needed."""
    spec = _kernels.REGISTRY.get(kind)
    if spec is None:
        raise KeyError(f"unknown kernel id {kind!r}")
    inputs = [t if isinstance(t, Tensor) else Tensor(t) for t in inputs]
    if len({t.data.dtype for t in inputs}) > 1:
        raise TypeError(
            f"{kind}: mixed precision inputs {[t.precision for t in inputs]}"
        )
    arrays = [t.data for t in inputs]
    try:
        out, ctx = spec.forward(arrays, attrs)
    except _kernels.KernelShapeError as exc:
        raise ShapeError(f"{kind}: {exc} (shapes {[a.shape for a in arrays]})") from None
    dtype = arrays[0].dtype if arrays else np.float32
    if out.dtype != dtype:
        out = out.astype(dtype)
    needs_grad = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs_grad)
    if needs_grad:
        tape = active_tape()
        if tape is not None:
            rec = _Record(kind, inputs, result, attrs, ctx)
            result._op = rec
            tape._record(rec)
    return result


def backward(loss: Tensor, tape: GradTape, wrt: Iterable[Tensor] | None = None) -> GradMap:
    """Reverse sweep over ``tape`` seeded with d(loss)/d(loss) = 1.

    Returns gradients for every requires-grad leaf seen on the tape plus
    any tensor listed in ``wrt``; leaves the loss does not depend on get
    exact zeros.
    """
    if loss.data.size != 1:
        raise GradError(f"loss must be scalar, got shape {loss.shape}")
    if tape.consumed:
        raise GradError("backward already called on this tape")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g_out = grads.pop(id(rec.output), None)
        if g_out is None:
            continue
        needs = [t.requires_grad for t in rec.inputs]
        arrays = [t.data for t in rec.inputs]
        spec = _kernels.REGISTRY[rec.kind]
        in_grads = spec.backward(g_out, arrays, rec.output.data, rec.ctx, rec.attrs, needs)
        for t, g, need in zip(rec.inputs, in_grads, needs):
            if not need or g is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g

    result = GradMap()
    targets = dict(tape._leaves)
    if loss.requires_grad and loss.is_leaf:
        targets.setdefault(id(loss), loss)
    for t in wrt or ():
        targets.setdefault(id(t), t)
    for key, t in targets.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(t.data)
        result._set(t, np.asarray(g, dtype=t.data.dtype).reshape(t.shape))
    return result
