"""Matmul FLOP accounting, scoped to pipeline stages.

Only matrix products are counted (2*m*n*k per product, times any stacked
batch dimensions); elementwise work is free by design. A counter is
activated per execution context, never shared globally, so concurrent
pipelines each carry their own ledger.
"""

from __future__ import annotations

import contextlib
import contextvars
from collections import defaultdict


class CounterNotResetError(RuntimeError):
    """Raised when an instrumented run is handed a non-zero counter."""


class FlopCounter:
    """Integer FLOP ledger keyed by (stage, kind).

    ``stage`` names a pipeline phase (encoder_stage1, decoder, ...);
    ``kind`` separates attention/projection matmuls from feed-forward ones
    so attention-only subsets can be reported next to full counts.
    """

    def __init__(self) -> None:
        self.total = 0
        self.by_stage: dict[str, int] = defaultdict(int)
        self.by_stage_kind: dict[tuple[str, str], int] = defaultdict(int)

    def add(self, n: int, stage: str, kind: str) -> None:
        self.total += n
        self.by_stage[stage] += n
        self.by_stage_kind[(stage, kind)] += n

    def reset(self) -> None:
        self.total = 0
        self.by_stage.clear()
        self.by_stage_kind.clear()

    def stage_total(self, *stages: str) -> int:
        return sum(self.by_stage.get(s, 0) for s in stages)

    def kind_total(self, kind: str, *stages: str) -> int:
        chosen = stages or tuple({s for s, _ in self.by_stage_kind})
        return sum(self.by_stage_kind.get((s, kind), 0) for s in chosen)

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "by_stage": dict(sorted(self.by_stage.items())),
            "by_stage_kind": {f"{s}/{k}": v for (s, k), v in sorted(self.by_stage_kind.items())},
        }


_ACTIVE: contextvars.ContextVar[FlopCounter | None] = contextvars.ContextVar(
    "fusionrank_flop_counter", default=None
)
_STAGE: contextvars.ContextVar[str] = contextvars.ContextVar(
    "fusionrank_flop_stage", default="other"
)
_KIND: contextvars.ContextVar[str] = contextvars.ContextVar(
    "fusionrank_flop_kind", default="attention"
)


def record(n: int) -> None:
    """Charge ``n`` FLOPs to the active counter, if any."""
    counter = _ACTIVE.get()
    if counter is not None:
        counter.add(n, _STAGE.get(), _KIND.get())


@contextlib.contextmanager
def active(counter: FlopCounter):
    """Route FLOP charges to ``counter`` for the duration of the block."""
    token = _ACTIVE.set(counter)
    try:
        yield counter
    finally:
        _ACTIVE.reset(token)


@contextlib.contextmanager
def stage(name: str):
    token = _STAGE.set(name)
    try:
        yield
    finally:
        _STAGE.reset(token)


@contextlib.contextmanager
def kind(name: str):
    token = _KIND.set(name)
    try:
        yield
    finally:
        _KIND.reset(token)


def current() -> FlopCounter | None:
    return _ACTIVE.get()
