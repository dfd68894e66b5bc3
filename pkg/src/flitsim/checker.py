"""Trace checkers.

Everything here works from the event log alone.  Persistence is tracked by
an independent re-implementation of the flush/fence rules
(:class:`PersistTracker`), keyed by store id, so the checkers do not trust
the memory model they are checking.

A store counts as persisted at time ``t`` once it, or any later store to the
same address, has reached persistent memory by ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .pmem import PersistentSnapshot
from .trace import STORE_KINDS, Event, Operation, Trace, TraceError, operations

PASS = "pass"
VIOLATION = "violation"


@dataclass
class Verdict:
    result: str = PASS
    condition: str | None = None
    witnesses: list[int] = field(default_factory=list)
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.result == PASS

    def to_dict(self) -> dict:
        return {
            "result": self.result,
            "condition": self.condition,
            "witnesses": list(self.witnesses),
            "message": self.message,
        }


def violation(condition: str, witnesses: Iterable[int], message: str) -> Verdict:
    w = sorted(set(witnesses))
    if not w:
        raise ValueError("a violation needs at least one witness event")
    return Verdict(VIOLATION, condition, w, message)


class BoundError(ValueError):
    """Instance is larger than the brute-force bound."""


class PersistTracker:
    """Replays pwb/pfence/evict/crash to know which stores are persisted."""

    def __init__(self, line_words: int = 1):
        self.L = line_words
        self.vol: dict[int, tuple[int, int]] = {}  # addr -> (value, sid)
        self.pers: dict[int, tuple[int, int]] = {}
        self.max_persisted: dict[int, int] = {}  # addr -> newest sid ever persisted
        self.buffers: dict[int, dict[int, list]] = {}

    def value(self, addr: int) -> tuple[int, int]:
        return self.vol.get(addr, (0, 0))

    def _line_words(self, addr: int):
        lo = (addr // self.L) * self.L
        return range(lo, lo + self.L)

    def _persist(self, words) -> None:
        for a, (v, s) in words:
            if s > self.pers.get(a, (0, 0))[1]:
                self.pers[a] = (v, s)
            if s > self.max_persisted.get(a, 0):
                self.max_persisted[a] = s

    def persisted(self, addr: int, sid: int) -> bool:
        return self.max_persisted.get(addr, 0) >= sid

    def apply(self, ev: Event) -> None:
        k = ev.kind
        if k in STORE_KINDS and ev.sid is not None:
            self.vol[ev.addr] = (ev.value, ev.sid)
        elif k == "pwb":
            line = ev.addr // self.L
            self.buffers.setdefault(ev.pid, {})[line] = [
                (a, self.vol.get(a, (0, 0))) for a in self._line_words(ev.addr)
            ]
        elif k == "pfence":
            for words in self.buffers.pop(ev.pid, {}).values():
                self._persist(words)
        elif k == "evict":
            self._persist([(a, self.vol.get(a, (0, 0))) for a in self._line_words(ev.addr)])
        elif k == "crash":
            self.vol = dict(self.pers)
            self.buffers.clear()

    def snapshot(self) -> PersistentSnapshot:
        return PersistentSnapshot(
            {a: v for a, (v, _) in self.pers.items()}, {a: s for a, (_, s) in self.pers.items()}
        )


# -- persistence condition 1 ----------------------------------------------------


def check_condition1(trace: Iterable[Event], line_words: int = 1) -> Verdict:
    """Every load (and failed CAS) returns the latest linearized store's value."""
    t = PersistTracker(line_words)
    for ev in trace:
        if ev.kind == "load" or (ev.kind == "cas" and ev.sid is None):
            value, sid = t.value(ev.addr)
            if ev.value != value:
                return violation(
                    "cond1",
                    [ev.seq] + ([sid] if sid else []),
                    f"seq {ev.seq}: load of {ev.addr} returned {ev.value}, latest store "
                    f"{sid or 'initial'} wrote {value}",
                )
        t.apply(ev)
    return Verdict()


# -- persistence conditions 2-4 ---------------------------------------------------


def check_conditions234(trace: Iterable[Event], line_words: int = 1) -> Verdict:
    """Replay the trace maintaining each process's dependencies.

    A p-store makes its process depend on it; a p-load (or a p-flagged
    read-modify-write, or failed CAS) makes its process depend on every
    earlier p-store to that address in the current era.  At each shared
    data store and each response the process's dependencies must be
    persisted.

    Dependencies on one address are kept as the newest store id: with the
    superseded-store rule, persisting it discharges every older one.
    Discharged dependencies are dropped, which cannot change a verdict since
    persistence is monotone.
    """
    t = PersistTracker(line_words)
    last_pstore: dict[int, int] = {}
    # pid -> addr -> (sid, seq of the event that created the dependency, source)
    deps: dict[int, dict[int, tuple[int, int, str]]] = {}

    def require(pid: int, ev: Event, what: str) -> Verdict | None:
        d = deps.get(pid)
        if not d:
            return None
        for addr in list(d):
            sid, origin, source = d[addr]
            if t.persisted(addr, sid):
                del d[addr]
                continue
            cond = "cond3/4" if source == "load" else "cond2/4"
            return violation(
                cond,
                [sid, origin, ev.seq],
                f"seq {ev.seq}: pid {pid} {what} while store {sid} to {addr} "
                f"(a dependency via {source} at seq {origin}) is not persisted",
            )
        return None

    def depend(pid: int, addr: int, sid: int, origin: int, source: str) -> None:
        if t.persisted(addr, sid):
            return
        d = deps.setdefault(pid, {})
        cur = d.get(addr)
        if cur is None or cur[0] < sid:
            d[addr] = (sid, origin, source)

    for ev in trace:
        k = ev.kind
        if k in ("load", "store", "cas", "faa") and not ev.is_metadata:
            if ev.pflag is None or ev.shared is None:
                raise TraceError(f"seq {ev.seq}: data event lacks pflag/shared annotations")
            if ev.is_store and ev.shared:
                v = require(ev.pid, ev, "linearized a shared store")
                if v is not None:
                    return v
            if ev.pflag:
                if k != "store":
                    prior = last_pstore.get(ev.addr)
                    if prior is not None:
                        depend(ev.pid, ev.addr, prior, ev.seq, "load")
                if ev.is_store:
                    depend(ev.pid, ev.addr, ev.sid, ev.seq, "store")
                    last_pstore[ev.addr] = ev.sid
        elif k == "resp":
            v = require(ev.pid, ev, "completed an operation")
            if v is not None:
                return v
        elif k == "crash":
            deps.clear()
            last_pstore.clear()
        t.apply(ev)
    return Verdict()


# -- flit-counter bound -------------------------------------------------------------


def check_counters(
    trace: Iterable[Event],
    procs: int,
    *,
    packed: bool = False,
    quiescent: bool = True,
    line_words: int = 1,
) -> Verdict:
    """Every observed flit-counter value lies in ``[0, procs]``.

    Observations are the values read by counter loads and the values written
    by counter updates (events tagged ``op="counter"``).  With ``quiescent``
    all counters must also be zero at the end of the trace.
    """
    t = PersistTracker(line_words)
    seen_addrs = set()
    for ev in trace:
        if ev.op == "counter" and ev.kind in ("load", "store", "faa"):
            seen_addrs.add(ev.addr)
            for v in _lanes(ev.value, packed):
                if not 0 <= v <= procs:
                    return violation(
                        "counter-bound",
                        [ev.seq],
                        f"seq {ev.seq}: counter at {ev.addr} observed as {v}, outside [0, {procs}]",
                    )
        t.apply(ev)
    if quiescent:
        for addr in sorted(seen_addrs):
            value, sid = t.value(addr)
            if any(_lanes(value, packed)):
                return violation(
                    "counter-balance",
                    [sid] if sid else [max(1, len(t.vol))],
                    f"counter at {addr} is {value} at quiescence",
                )
    return Verdict()


def _lanes(word: int, packed: bool) -> list[int]:
    if packed:
        return [(word >> (8 * i)) & 0xFF for i in range(8)]
    return [word - (1 << 64) if word >> 63 else word]


# -- sequential specification ----------------------------------------------------


class SetSpec:
    """Sequential set: ``insert``/``delete``/``contains`` returning 0 or 1."""

    name = "set"

    @staticmethod
    def initial() -> frozenset:
        return frozenset()

    @staticmethod
    def apply(state: frozenset, name: str, arg) -> tuple[frozenset, int]:
        if name == "insert":
            return (state, 0) if arg in state else (state | {arg}, 1)
        if name == "delete":
            return (state - {arg}, 1) if arg in state else (state, 0)
        if name == "contains":
            return state, int(arg in state)
        raise ValueError(f"unknown set operation {name!r}")


SPECS = {"set": SetSpec}


# -- linearizability -------------------------------------------------------------

MAX_LIN_OPS = 12


def _linearize(ops: Sequence[Operation], spec, init, target=None):
    """Wing & Gong search with memoization on (linearized set, state).

    Pending operations may be linearized anywhere after their invocation,
    with whatever result the sequential specification gives, or left out.
    Returns the final state of a successful linearization, or None; on
    failure ``_linearize.last_info`` holds the deepest frontier reached, for
    witnesses.
    """
    n = len(ops)
    inv = [o.inv_seq for o in ops]
    INF = float("inf")
    resp = [o.resp_seq if o.resp_seq is not None else INF for o in ops]
    completed = 0
    for i, o in enumerate(ops):
        if not o.pending:
            completed |= 1 << i
    seen = set()
    info = {"depth": -1, "frontier": ()}

    stack = [(0, init)]
    while stack:
        done, state = stack.pop()
        key = (done, state)
        if key in seen:
            continue
        seen.add(key)
        if done & completed == completed and (target is None or state == target):
            return state
        depth = bin(done).count("1")
        min_resp = min((resp[i] for i in range(n) if not done >> i & 1), default=INF)
        frontier = []
        for i in range(n):
            if done >> i & 1 or inv[i] > min_resp:
                continue
            o = ops[i]
            new_state, ret = spec.apply(state, o.name, o.arg)
            if not o.pending and ret != o.ret:
                frontier.append(i)
                continue
            stack.append((done | 1 << i, new_state))
        if depth > info["depth"]:
            info["depth"] = depth
            info["frontier"] = tuple(frontier) or tuple(
                i for i in range(n) if not done >> i & 1 and inv[i] <= min_resp
            )
    _linearize.last_info = info
    return None


def _ops_witness(ops: Sequence[Operation], idxs) -> list[int]:
    w = []
    for i in idxs:
        o = ops[i]
        w.append(o.inv_seq)
        if o.resp_seq is not None:
            w.append(o.resp_seq)
    return w or [ops[0].inv_seq]


def check_linearizable(
    history: Sequence[Operation] | Trace, spec=SetSpec, max_ops: int = MAX_LIN_OPS, init=None
) -> Verdict:
    """Brute-force linearizability of a crash-free history."""
    if isinstance(history, Trace):
        if any(ev.kind == "crash" for ev in history):
            raise ValueError("history contains a crash; use check_durable_linearizable")
        history = history.history()
    ops = list(history)
    if len(ops) > max_ops:
        raise BoundError(f"{len(ops)} operations exceed the brute-force bound of {max_ops}")
    if not ops:
        return Verdict()
    init = spec.initial() if init is None else init
    if _linearize(ops, spec, init) is not None:
        return Verdict()
    info = _linearize.last_info
    return violation(
        "linearizability",
        _ops_witness(ops, info["frontier"]),
        f"no legal linearization; stuck after {max(info['depth'], 0)} of {len(ops)} operations",
    )


# -- durable linearizability ------------------------------------------------------

Recover = Callable[[PersistentSnapshot], object]


def check_durable_linearizable(
    trace: Trace | Iterable[Event],
    spec=SetSpec,
    recover_fn: Recover | None = None,
    *,
    line_words: int = 1,
    max_ops: int = MAX_LIN_OPS,
    snapshots: Sequence[PersistentSnapshot] | None = None,
) -> Verdict:
    """Era-by-era durable linearizability.

    For every era ending in a crash, completed operations must be linearized
    and crash-pending ones may be, in some order respecting real time, so
    that the final abstract state equals ``recover_fn`` applied to the
    persistent image at the crash.  That recovered state is the initial
    state of the next era.  The final era, if not crashed, only needs to be
    linearizable.

    Crash images are rebuilt from the trace unless ``snapshots`` are given.
    ``recover_fn`` may return a :class:`~flitsim.structures.RecoveredState`
    or a set of keys; any exception it raises is reported as a violation.
    """
    events = list(trace)
    tracker = PersistTracker(line_words)
    era: list[Event] = []
    state = spec.initial()
    crash_no = 0
    for ev in events + [None]:
        if ev is not None:
            tracker.apply(ev)
            era.append(ev)
            if ev.kind != "crash":
                continue
        crashed = ev is not None
        ops = operations(era)
        if len(ops) > max_ops:
            raise BoundError(f"era with {len(ops)} operations exceeds the bound of {max_ops}")
        target = None
        if crashed:
            if recover_fn is None:
                raise ValueError("trace has a crash but no recover_fn was given")
            snap = snapshots[crash_no] if snapshots is not None else tracker.snapshot()
            try:
                rec = recover_fn(snap)
            except Exception as exc:  # corruption of any kind is a verdict
                return violation("durable-lin", [ev.seq], f"recovery failed at crash seq {ev.seq}: {exc}")
            target = frozenset(getattr(rec, "keys", rec))
        if ops or target is not None:
            final = _linearize(ops, spec, state, target)
            if final is None:
                where = f"crash at seq {ev.seq}" if crashed else "final era"
                w = _ops_witness(ops, _linearize.last_info["frontier"]) if ops else []
                if crashed:
                    w.append(ev.seq)
                msg = f"no linearization of the era before {where} explains the state"
                if target is not None:
                    msg += f" (recovered {sorted(target)}, era starts from {sorted(state)})"
                return violation("durable-lin", w, msg)
            state = final
        if crashed:
            crash_no += 1
        era = []
    return Verdict()
