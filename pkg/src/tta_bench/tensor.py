"""Dense tensors, an explicitly scoped autodiff tape, and an instrumented allocator.

Every :class:`Tensor` reports its byte size to the allocator that was current
when it was created and returns it when garbage collected. The profiler swaps
in a fresh :class:`Allocator` per run, so peaks are attributable to that run.
"""

from __future__ import annotations

import contextlib
import itertools
from collections import Counter
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes do not conform to an operator's shape rule."""


class NumericError(FloatingPointError):
    """Raised when an operator receives non-finite input."""


class ContractError(RuntimeError):
    """Raised when a call violates an API precondition (e.g. non-scalar loss)."""


@dataclass(frozen=True)
class AllocStats:
    live_bytes: int
    peak_bytes: int
    alloc_events: int


class Allocator:
    """Byte counter for live tensor storage with a sticky peak."""

    def __init__(self) -> None:
        self.live_bytes = 0
        self.peak_bytes = 0
        self.alloc_events = 0

    def allocate(self, nbytes: int) -> None:
        self.live_bytes += nbytes
        self.alloc_events += 1
        if self.live_bytes > self.peak_bytes:
            self.peak_bytes = self.live_bytes

    def free(self, nbytes: int) -> None:
        self.live_bytes -= nbytes

    def reset(self) -> None:
        # live bytes of still-alive tensors are forgotten; they keep freeing
        # against this instance, so only reset between runs
        self.live_bytes = 0
        self.peak_bytes = 0
        self.alloc_events = 0

    def reset_peak(self) -> None:
        self.peak_bytes = self.live_bytes

    def stats(self) -> AllocStats:
        return AllocStats(self.live_bytes, self.peak_bytes, self.alloc_events)


_DEFAULT_ALLOCATOR = Allocator()
_allocator: ContextVar[Allocator] = ContextVar("allocator", default=_DEFAULT_ALLOCATOR)
_dtype: ContextVar[type] = ContextVar("dtype", default=np.float32)
_tape: ContextVar["Tape | None"] = ContextVar("tape", default=None)
_counters: ContextVar["OpCounters | None"] = ContextVar("counters", default=None)


def current_allocator() -> Allocator:
    return _allocator.get()


def alloc_stats() -> AllocStats:
    return _allocator.get().stats()


def reset_peak() -> None:
    _allocator.get().reset_peak()


@contextlib.contextmanager
def allocator_scope(allocator: Allocator | None = None) -> Iterator[Allocator]:
    """Route all tensor allocations inside the block to ``allocator``."""
    allocator = allocator or Allocator()
    token = _allocator.set(allocator)
    try:
        yield allocator
    finally:
        _allocator.reset(token)


@contextlib.contextmanager
def scratch(*arrays: np.ndarray) -> Iterator[None]:
    """Account temporary numpy buffers for the duration of the block."""
    alloc = _allocator.get()
    nbytes = sum(a.nbytes for a in arrays)
    alloc.allocate(nbytes)
    try:
        yield
    finally:
        alloc.free(nbytes)


def default_dtype() -> type:
    return _dtype.get()


@contextlib.contextmanager
def precision(dtype: type) -> Iterator[None]:
    """Create new tensors with ``dtype`` (float64 is used by gradient checks)."""
    token = _dtype.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _dtype.reset(token)


_uids = itertools.count()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "uid", "_alloc", "_nbytes", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, *, copy: bool = True) -> None:
        dtype = _dtype.get()
        if copy or not isinstance(data, np.ndarray) or data.dtype != dtype:
            arr = np.array(data, dtype=dtype, order="C", copy=True)
        else:
            arr = np.ascontiguousarray(data)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.uid = next(_uids)
        self._alloc = _allocator.get()
        self._nbytes = arr.nbytes
        self._alloc.allocate(self._nbytes)

    @classmethod
    def wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        """Adopt ``arr`` without copying when dtype and layout already match."""
        return cls(arr, requires_grad=requires_grad, copy=False)

    def __del__(self) -> None:
        alloc = getattr(self, "_alloc", None)
        if alloc is not None:
            alloc.free(self._nbytes)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"


class Context:
    """Per-node storage for values the backward rule needs."""

    __slots__ = ("saved", "params")

    def __init__(self) -> None:
        self.saved: dict[str, Tensor] = {}
        self.params: dict = {}

    def save(self, **arrays: np.ndarray) -> None:
        for name, arr in arrays.items():
            self.saved[name] = Tensor.wrap(arr)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.saved[name].data


BackwardFn = Callable[[Context, np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output_uid: int
    ctx: Context
    backward: BackwardFn


@dataclass
class OpCounters:
    forward: Counter = field(default_factory=Counter)
    backward_passes: int = 0
    model_forwards: int = 0
    batch_sizes: list[int] = field(default_factory=list)

    def gradient_ops(self) -> int:
        return self.backward_passes


@contextlib.contextmanager
def counting() -> Iterator[OpCounters]:
    counters = OpCounters()
    token = _counters.set(counters)
    try:
        yield counters
    finally:
        _counters.reset(token)


def active_counters() -> OpCounters | None:
    return _counters.get()


class Tape:
    """Records differentiable ops issued inside ``with tape:``.

    Ops are only recorded when at least one input requires a gradient. A tape
    is single use: :func:`backward` consumes it.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._token = None
        self.consumed = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise ContractError("tape already consumed by backward()")
        self._token = _tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape.reset(self._token)
        self._token = None

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()


def active_tape() -> Tape | None:
    return _tape.get()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    token = _tape.set(None)
    try:
        yield
    finally:
        _tape.reset(token)


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise ContractError("tape already consumed by backward()")
    counters = _counters.get()
    if counters is not None:
        counters.backward_passes += 1

    produced = {node.output_uid for node in tape.nodes}
    if loss.uid not in produced:
        raise ContractError("loss was not produced on this tape")

    grads: dict[int, Tensor] = {loss.uid: Tensor.wrap(np.ones_like(loss.data))}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output_uid, None)
        if g is None:
            continue
        in_grads = node.backward(node.ctx, g.data)
        del g
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.uid in produced:
                prev = grads.get(inp.uid)
                grads[inp.uid] = Tensor.wrap(gi if prev is None else prev.data + gi)
            else:
                leaves[inp.uid] = inp
                gi = np.asarray(gi, dtype=inp.data.dtype)
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
        node.ctx.saved.clear()
    tape.clear()
    tape.consumed = True
