"""Structured trace events and their JSON-lines serialization.

One event per line, fixed top-level key order (t, kind, actor, detail) and
sorted detail keys, so traces from identical runs byte-diff clean.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable

KINDS = frozenset(
    {
        "send",
        "deliver",
        "drop",
        "defrag_insert",
        "defrag_evict",
        "reassembled",
        "cache_write",
        "cache_hit",
        "assoc_demobilized",
        "kod_sent",
        "rate_limited",
        "attack_phase",
        "clock_step",
    }
)


@dataclass
class TraceEvent:
    t: int
    kind: str
    actor: str
    detail: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown trace kind {self.kind!r}")

    def to_json(self) -> str:
        body = json.dumps(self.detail, sort_keys=True, separators=(",", ":"))
        return f'{{"t":{self.t},"kind":"{self.kind}","actor":"{self.actor}","detail":{body}}}'

    @classmethod
    def from_json(cls, line: str) -> "TraceEvent":
        obj = json.loads(line)
        return cls(t=obj["t"], kind=obj["kind"], actor=obj["actor"], detail=obj["detail"])


def write_jsonl(events: Iterable[TraceEvent], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ev in events:
            fh.write(ev.to_json())
            fh.write("\n")


def read_jsonl(path) -> list[TraceEvent]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(TraceEvent.from_json(line))
    return out
