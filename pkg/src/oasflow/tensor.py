"""Tensor storage, named parameters and the reverse-mode tape.

Every differentiable op in :mod:`oasflow.ops` computes its forward result with
numpy and, when a :class:`Tape` is active and any input requires a gradient,
appends a node holding a closure that maps the output gradient to input
gradients.  :func:`backward` replays those closures in reverse record order.
"""

from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when tensor dimensions do not line up."""


class Tensor:
    """A dense array plus an optional gradient buffer.

    Activations are rank 4 ``(n, c, h, w)``; biases are rank 1 and the loss is
    a rank-0 scalar.  ``data`` is always a contiguous float array.
    """

    __slots__ = ("data", "grad", "requires_grad", "_from_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")  # ascontiguousarray would promote rank 0
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._from_op = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class Param(Tensor):
    """A learned tensor with a name and a gradient buffer of identical shape."""

    __slots__ = ("name",)

    def __init__(self, name: str, value, dtype=None):
        super().__init__(value, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape})"


class ParamStore:
    """Ordered, name-keyed collection of :class:`Param`."""

    def __init__(self, params: Iterable[Param] = ()):
        self._params: OrderedDict[str, Param] = OrderedDict()
        for p in params:
            self.add(p)

    def add(self, param: Param) -> Param:
        if param.name in self._params:
            raise KeyError(f"duplicate parameter name {param.name!r}")
        self._params[param.name] = param
        return param

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Param]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def num_elements(self) -> int:
        return sum(p.size for p in self._params.values())


@dataclass
class Node:
    out: Tensor
    inputs: Sequence[Tensor]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _stack() -> list["Tape"]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


class RegimeProbe:
    """Collects digests of the discrete state piecewise ops pass through.

    Leaky ReLU contributes its sign pattern and bilinear sampling its floor
    indices.  Two evaluations with equal digests lie on the same smooth piece,
    which lets finite-difference checks skip pairs that straddle a kink.
    """

    def __init__(self):
        self.digests: list[bytes] = []

    def __enter__(self) -> "RegimeProbe":
        _local.probe = self
        return self

    def __exit__(self, *exc) -> None:
        _local.probe = None

    def signature(self) -> bytes:
        import hashlib

        return hashlib.sha1(b"".join(self.digests)).digest()


def note_regime(*arrays: np.ndarray) -> None:
    """Log discrete state to the active :class:`RegimeProbe`, if any."""
    probe = getattr(_local, "probe", None)
    if probe is not None:
        import hashlib

        h = hashlib.sha1()
        for a in arrays:
            h.update(np.ascontiguousarray(a).tobytes())
        probe.digests.append(h.digest())


class Tape:
    """Ordered record of differentiable ops executed inside ``with tape:``."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)


def record(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``out_data`` and, if it is on a gradient path, log it on the tape."""
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._from_op = True
        tape.nodes.append(Node(out, tuple(inputs), backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf reached.

    Gradients add onto existing buffers, so calling twice without zeroing
    doubles them.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.data.shape:
                raise ShapeError(f"adjoint shape {gi.shape} does not match input {t.data.shape}")
            if t._from_op:
                key = id(t)
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = gi
            elif t.grad is None:
                t.grad = np.array(gi, dtype=t.data.dtype)
            else:
                t.grad += gi
