"""Dense float64 tensors and a reverse-mode gradient tape.

Every differentiable op appends a record to the active :class:`Tape`; the
tape is replayed in reverse to accumulate gradients keyed by node id.
"""
from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

_node_ids = itertools.count()
_local = threading.local()


def _next_id() -> int:
    return next(_node_ids)


class Tensor:
    """N-d array of doubles with an optional place on the gradient tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = _next_id()
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar; the implementations live in pyramidflow.ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, _lift(other))

    def __rsub__(self, other):
        from . import ops
        return ops.sub(_lift(other), self)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def sum(self):
        from . import ops
        return ops.sum(self)

    def mean(self):
        from . import ops
        return ops.mean(self)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


class Parameter(Tensor):
    """A named leaf tensor that always requires gradient."""

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True, name=name)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Record:
    kind: str
    inputs: tuple
    output_id: int
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

    @property
    def input_ids(self) -> tuple:
        return tuple(t.node_id for t in self.inputs)


class Tape:
    """Ordered op log plus gradient storage.

    Use as a context manager; ops executed inside the block are recorded on
    this tape. Tapes are thread-confined: the active tape is a thread-local.
    """

    def __init__(self):
        self.records: list[Record] = []
        self.grads: dict[int, np.ndarray] = {}
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.pop()

    def record(self, kind: str, inputs: Iterable[Tensor], output: Tensor, vjp) -> None:
        self.records.append(Record(kind, tuple(inputs), output.node_id, vjp))
        self._produced.add(output.node_id)

    def holds(self, t: Tensor) -> bool:
        return t.node_id in self._produced

    @property
    def op_count(self) -> int:
        return len(self.records)

    def op_kinds(self) -> list[str]:
        return [r.kind for r in self.records]

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Replay the tape in reverse from ``loss``; returns grads by node id."""
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.holds(loss):
            raise ValueError("loss was not produced on this tape")
        grads = {loss.node_id: np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.get(rec.output_id)
            if g is None:
                continue
            for inp, ig in zip(rec.inputs, rec.vjp(g)):
                if ig is None or not inp.requires_grad:
                    continue
                prev = grads.get(inp.node_id)
                grads[inp.node_id] = ig if prev is None else prev + ig
        self.grads = grads
        return grads

    def grad(self, t: Tensor) -> np.ndarray:
        g = self.grads.get(t.node_id)
        return np.zeros_like(t.data) if g is None else g

    def clear(self) -> None:
        self.records.clear()
        self.grads = {}
        self._produced.clear()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def make_op(kind: str, data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Wrap ``data`` as an op output and record it when any input needs grad.

    ``vjp`` maps the output gradient to one gradient (or None) per input.
    """
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.node_id = _next_id()
    out.name = None
    if needs:
        tape.record(kind, inputs, out, vjp)
    return out


def backward(loss: Tensor, params: Mapping[str, Tensor] | Iterable[Tensor] | None = None,
             tape: Optional[Tape] = None) -> dict[str, np.ndarray]:
    """Differentiate a scalar loss; gradients keyed by parameter name.

    Parameters the loss does not reach get zero gradients.
    """
    tape = tape or active_tape()
    if tape is None:
        raise ValueError("no active tape")
    tape.backward(loss)
    if params is None:
        seen = {}
        for rec in tape.records:
            for t in rec.inputs:
                if isinstance(t, Parameter):
                    seen[t.name] = t
        params = seen
    if not isinstance(params, Mapping):
        params = {p.name: p for p in params}
    return {name: tape.grad(p) for name, p in params.items()}
