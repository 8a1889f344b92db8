"""Instrumented operation counting.

Kernels call :func:`record` as they execute; nothing is recorded unless a
:func:`counting` context is active. Counts are attributed to the innermost
:func:`scope` so reports can be broken down per layer.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field

COUNT_MODES = ("inference_nnz", "dense_estimate")


@dataclass
class OpCounts:
    muls: int = 0
    adds: int = 0
    macs: int = 0

    @property
    def ops(self) -> int:
        return self.muls + self.adds + self.macs

    def __iadd__(self, other: OpCounts) -> OpCounts:
        self.muls += other.muls
        self.adds += other.adds
        self.macs += other.macs
        return self

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.muls, self.adds, self.macs)


@dataclass
class OpCounter:
    mode: str = "inference_nnz"
    total: OpCounts = field(default_factory=OpCounts)
    per_scope: dict[str, OpCounts] = field(default_factory=dict)

    def add(self, scope_name: str, muls: int, adds: int, macs: int) -> None:
        delta = OpCounts(int(muls), int(adds), int(macs))
        self.total += delta
        self.per_scope.setdefault(scope_name, OpCounts())
        self.per_scope[scope_name] += delta


_counter: contextvars.ContextVar[OpCounter | None] = contextvars.ContextVar("counter", default=None)
_scope: contextvars.ContextVar[str] = contextvars.ContextVar("scope", default="")


@contextlib.contextmanager
def counting(mode: str = "inference_nnz"):
    """Activate op counting for the enclosed block and yield the counter."""
    if mode not in COUNT_MODES:
        raise ValueError(f"unknown counting mode {mode!r}")
    counter = OpCounter(mode=mode)
    token = _counter.set(counter)
    try:
        yield counter
    finally:
        _counter.reset(token)


@contextlib.contextmanager
def scope(name: str):
    token = _scope.set(name)
    try:
        yield
    finally:
        _scope.reset(token)


def active() -> OpCounter | None:
    return _counter.get()


def record(muls: int = 0, adds: int = 0, macs: int = 0) -> None:
    counter = _counter.get()
    if counter is not None:
        counter.add(_scope.get(), muls, adds, macs)
