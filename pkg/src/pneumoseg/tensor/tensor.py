"""Dense tensor with tape-based reverse-mode differentiation."""
from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand extents are incompatible with an operator."""


class Tensor:
    """Rank <= 4 dense array with an optional gradient.

    Floating numpy input keeps its dtype (float32 or float64); anything else
    becomes float32. float64 exists so gradient checks have useful tolerances.
    """

    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim > 4:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum of 4")
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)  # keeps 0-d arrays 0-d
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.is_leaf = True
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic used by losses and tests; model math lives in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        from . import ops
        return ops.add(self, ops.mul(other, -1.0))

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def sum(self):
        from . import ops
        return ops.sum(self)

    def mean(self):
        from . import ops
        return ops.mean(self)

    def backward(self):
        tape = current_tape()
        if tape is None:
            raise RuntimeError("backward() needs an active Tape")
        tape.backward(self)


class _Record:
    __slots__ = ("inputs", "output", "fn", "op")

    def __init__(self, op, inputs, output, fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.fn = fn


_TAPES: list[Tape] = []


def current_tape():
    return _TAPES[-1] if _TAPES else None


class Tape:
    """Ordered record of differentiable operations for one step.

    Used as a context manager; operations on tensors that require grad are
    recorded while the tape is active. Recording order is topological by
    construction, so backward is a single reverse sweep.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def record(self, op, inputs, output, fn):
        self.records.append(_Record(op, inputs, output, fn))

    def backward(self, loss: Tensor, retain_grads=False):
        """Populate ``.grad`` on every leaf reachable from ``loss``.

        Gradients accumulate into existing ``.grad`` arrays, so a tensor used
        several times (or over several tapes) receives the sum. With
        ``retain_grads`` intermediate outputs keep their gradient too.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        pending = {id(loss): np.ones_like(loss.data)}
        if loss.is_leaf and loss.requires_grad:
            _accumulate(loss, pending[id(loss)])
        for rec in reversed(self.records):
            g = pending.pop(id(rec.output), None)
            if g is None:
                continue
            if retain_grads:
                _accumulate(rec.output, g)
            grads = rec.fn(g)
            for t, gi in zip(rec.inputs, grads):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                if t.is_leaf:
                    _accumulate(t, gi)
                else:
                    key = id(t)
                    if key in pending:
                        pending[key] = pending[key] + gi
                    else:
                        pending[key] = gi
        self.records.clear()


def _accumulate(t, g):
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def backward(loss: Tensor, tape: Tape, retain_grads=False):
    tape.backward(loss, retain_grads=retain_grads)


def record(op, inputs, output, fn):
    """Attach ``fn`` (grad_out -> grads per input) to the active tape.

    No-op when no tape is active or no input requires grad; returns whether a
    record was made so callers can skip saving backward state.
    """
    tape = current_tape()
    if tape is None or not any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        return False
    output.requires_grad = True
    output.is_leaf = False
    tape.record(op, inputs, output, fn)
    return True


def recording(*inputs):
    """True when an op on ``inputs`` will be recorded."""
    return current_tape() is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
