"""Event log shared by the memory model, the scheduler and the checkers.

Every simulated instruction, adversary action and operation boundary is one
:class:`Event`.  Events serialize to JSON lines with a fixed key order so
traces are byte-stable across runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import IO, Iterable, Iterator

# Key order of the JSON-lines encoding.  Fields that are None are omitted.
FIELDS = ("seq", "pid", "kind", "addr", "value", "pflag", "shared", "op", "sid")

KINDS = frozenset(
    ["load", "store", "cas", "faa", "pwb", "pfence", "evict", "crash", "inv", "resp"]
)
STORE_KINDS = frozenset(["store", "cas", "faa"])

# pid used for events that no logical process issued (crash, eviction).
SYSTEM_PID = -1


class TraceError(ValueError):
    """A trace is malformed or inconsistent."""


@dataclass(slots=True)
class Event:
    seq: int
    pid: int
    kind: str
    addr: int | None = None
    value: int | None = None
    pflag: bool | None = None
    shared: bool | None = None
    op: str | None = None
    sid: int | None = None

    @property
    def is_store(self) -> bool:
        """True when the event wrote memory (a failed CAS did not)."""
        return self.sid is not None

    @property
    def is_metadata(self) -> bool:
        # counter cells and flag-clearing writes: shared, but outside P-V semantics
        return self.shared is True and self.pflag is None

    def to_dict(self) -> dict:
        out = {}
        for name in FIELDS:
            v = getattr(self, name)
            if v is not None:
                out[name] = v
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "Event":
        unknown = set(d) - set(FIELDS)
        if unknown:
            raise TraceError(f"unknown event fields {sorted(unknown)}")
        try:
            ev = cls(**d)
        except TypeError as exc:
            raise TraceError(str(exc)) from None
        if ev.kind not in KINDS:
            raise TraceError(f"unknown event kind {ev.kind!r}")
        return ev


@dataclass(frozen=True)
class Operation:
    """One high-level operation reconstructed from inv/resp events."""

    id: int
    pid: int
    name: str
    arg: int | None
    inv_seq: int
    resp_seq: int | None = None
    ret: int | None = None

    @property
    def pending(self) -> bool:
        return self.resp_seq is None


class Trace:
    """Totally ordered event log with dense sequence numbers starting at 1."""

    def __init__(self, events: Iterable[Event] = ()):
        self.events: list[Event] = []
        for ev in events:
            self.events.append(ev)
        self._check_dense()

    def _check_dense(self) -> None:
        for i, ev in enumerate(self.events, start=1):
            if ev.seq != i:
                raise TraceError(f"event #{i} has seq {ev.seq}; sequence must be dense")

    @property
    def next_seq(self) -> int:
        return len(self.events) + 1

    def emit(self, pid: int, kind: str, addr=None, value=None, pflag=None, shared=None, op=None, sid=None) -> Event:
        events = self.events
        ev = Event(len(events) + 1, pid, kind, addr, value, pflag, shared, op, sid)
        events.append(ev)
        return ev

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[Event]:
        return iter(self.events)

    def __getitem__(self, i):
        return self.events[i]

    def count(self, kind: str, since: int = 1) -> int:
        return sum(1 for ev in self.events[since - 1 :] if ev.kind == kind)

    def eras(self) -> list[list[Event]]:
        """Split the trace at crash events.  Crash events end their era."""
        eras: list[list[Event]] = [[]]
        for ev in self.events:
            eras[-1].append(ev)
            if ev.kind == "crash":
                eras.append([])
        return eras

    def history(self) -> list[Operation]:
        return operations(self.events)

    def store_order(self) -> dict[int, list[int]]:
        """Per-address list of store ids in linearization order."""
        order: dict[int, list[int]] = {}
        for ev in self.events:
            if ev.kind in STORE_KINDS and ev.sid is not None:
                order.setdefault(ev.addr, []).append(ev.sid)
        return order

    # -- serialization -------------------------------------------------
    def to_jsonl(self) -> str:
        return "".join(ev.to_json() + "\n" for ev in self.events)

    def dump(self, fp: IO[str]) -> None:
        for ev in self.events:
            fp.write(ev.to_json())
            fp.write("\n")

    @classmethod
    def from_jsonl(cls, text: str | Iterable[str]) -> "Trace":
        lines = text.splitlines() if isinstance(text, str) else text
        events = []
        for lineno, line in enumerate(lines, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceError(f"line {lineno}: {exc}") from None
            events.append(Event.from_dict(d))
        return cls(events)


def operations(events: Iterable[Event]) -> list[Operation]:
    """Pair invocations with their matching responses.

    Raises :class:`TraceError` if some process's inv/resp subsequence is not
    sequential.
    """
    ops: list[Operation] = []
    open_ops: dict[int, int] = {}
    for ev in events:
        if ev.kind == "inv":
            if ev.pid in open_ops:
                raise TraceError(f"seq {ev.seq}: pid {ev.pid} invoked while an op is open")
            open_ops[ev.pid] = len(ops)
            ops.append(Operation(len(ops), ev.pid, ev.op, ev.value, ev.seq))
        elif ev.kind == "resp":
            idx = open_ops.pop(ev.pid, None)
            if idx is None:
                raise TraceError(f"seq {ev.seq}: response without invocation")
            o = ops[idx]
            if o.name != ev.op:
                raise TraceError(f"seq {ev.seq}: response {ev.op!r} does not match {o.name!r}")
            ops[idx] = Operation(o.id, o.pid, o.name, o.arg, o.inv_seq, ev.seq, ev.value)
        elif ev.kind == "crash":
            # processes die at a crash; their open operations stay pending
            open_ops.clear()
    return ops
