"""Event log of model invocations and index queries, tagged by stage."""

from __future__ import annotations

import contextlib
import time
from dataclasses import asdict, dataclass, field

STAGES = ("prefill", "thought-gen", "subquery-gen", "retrieval", "answer-gen", "latent-decode")
KINDS = ("parallel-forward", "autoregressive-decode", "index-query")

PARALLEL = "parallel-forward"
AUTOREGRESSIVE = "autoregressive-decode"
INDEX_QUERY = "index-query"


@dataclass
class LedgerEvent:
    """One model invocation (or one index query).

    A parallel forward may also absorb pending context tokens (question,
    retrieved documents) ahead of its slot tokens; those are counted in
    ``prefill_tokens`` and their share of the wall clock in
    ``prefill_duration``, which is part of ``duration``.
    """

    stage: str
    kind: str
    tokens_in: int = 0
    tokens_out: int = 0
    duration: float = 0.0
    prefill_tokens: int = 0
    prefill_duration: float = 0.0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")

    def to_record(self, with_timing: bool = True) -> dict:
        rec = asdict(self)
        if not with_timing:
            rec.pop("duration")
            rec.pop("prefill_duration")
        return rec


@dataclass
class ForwardPassLedger:
    events: list[LedgerEvent] = field(default_factory=list)

    def record(self, stage: str, kind: str, tokens_in: int = 0, tokens_out: int = 0,
               duration: float = 0.0, prefill_tokens: int = 0, prefill_duration: float = 0.0) -> LedgerEvent:
        event = LedgerEvent(stage, kind, tokens_in, tokens_out, duration, prefill_tokens, prefill_duration)
        self.events.append(event)
        return event

    @contextlib.contextmanager
    def timed(self, stage: str, kind: str, tokens_in: int = 0, tokens_out: int = 0):
        """Record one event whose duration covers the ``with`` body; yields the event."""
        event = self.record(stage, kind, tokens_in, tokens_out)
        start = time.perf_counter()
        try:
            yield event
        finally:
            event.duration = time.perf_counter() - start

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def extend(self, other: "ForwardPassLedger") -> None:
        self.events.extend(other.events)

    def total_duration(self) -> float:
        return sum(e.duration for e in self.events)

    def to_records(self, with_timing: bool = True) -> list[dict]:
        return [e.to_record(with_timing) for e in self.events]

    @classmethod
    def from_records(cls, records: list[dict]) -> "ForwardPassLedger":
        return cls([LedgerEvent(**r) for r in records])
