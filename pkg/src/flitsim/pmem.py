"""Simulated NVRAM machine with a volatile and a persistent image.

All loads and stores act on the volatile image.  ``pwb`` copies the current
contents of a cache line into the issuing process's flush buffer, and
``pfence`` writes that process's buffered lines to the persistent image.  A
crash replaces the volatile image with the persistent one.

Each word carries the id of the store that produced its value (0 for the
initial value), so persistence can be reasoned about per store rather than
per value.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

from .trace import SYSTEM_PID, Trace

MASK64 = (1 << 64) - 1
FLAG_BIT = 1 << 63

NULL = 0


class MemoryFault(RuntimeError):
    """Access outside allocated memory, or a disabled adversary action."""


class CapacityError(MemoryFault):
    pass


@dataclass(frozen=True)
class PersistentSnapshot:
    """Immutable copy of the persistent image."""

    values: Mapping[int, int]
    sids: Mapping[int, int] = field(default_factory=dict)

    def __getitem__(self, addr: int) -> int:
        return self.values.get(addr, 0)

    def get(self, addr: int, default: int = 0) -> int:
        return self.values.get(addr, default)

    def __eq__(self, other):
        if not isinstance(other, PersistentSnapshot):
            return NotImplemented
        return _nonzero(self.values) == _nonzero(other.values)

    def __hash__(self):
        return hash(frozenset(_nonzero(self.values).items()))


def _nonzero(m: Mapping[int, int]) -> dict[int, int]:
    return {a: v for a, v in m.items() if v}


class Memory:
    """Word-addressed dual-image memory.

    ``line_words`` sets the pwb granularity: address ``a`` lies on line
    ``a // line_words``.  Word 0 is reserved as the null address.
    """

    def __init__(
        self,
        capacity: int = 1 << 22,
        line_words: int = 1,
        adversary: bool = False,
        trace: Trace | None = None,
    ):
        if line_words < 1:
            raise ValueError("line_words must be >= 1")
        self.capacity = capacity
        self.line_words = line_words
        self.adversary = adversary
        self.trace = trace if trace is not None else Trace()
        self.cursor = 1
        self.volatile: dict[int, int] = {}
        self.volatile_sid: dict[int, int] = {}
        self.persistent: dict[int, int] = {}
        self.persistent_sid: dict[int, int] = {}
        # pid -> line -> ((addr, value, sid), ...) captured at pwb time
        self.flush_buffers: dict[int, dict[int, tuple]] = {}
        self.write_history: dict[int, list[tuple[int, int, int]]] = {}
        self.instr_counters: dict[int, Counter] = {}

    # -- allocation ----------------------------------------------------
    def alloc(self, n: int, align: int = 1) -> int:
        base = -(-self.cursor // align) * align
        if base + n > self.capacity:
            raise CapacityError(f"out of simulated memory allocating {n} words")
        self.cursor = base + n
        return base

    def _check(self, addr: int) -> None:
        if not (0 < addr < self.cursor):
            raise MemoryFault(f"access to unallocated address {addr}")

    def line(self, addr: int) -> int:
        return addr // self.line_words

    def line_addrs(self, line: int) -> range:
        lo = max(line * self.line_words, 1)
        hi = min((line + 1) * self.line_words, self.cursor)
        return range(lo, hi)

    def _count(self, pid: int, kind: str) -> None:
        try:
            self.instr_counters[pid][kind] += 1
        except KeyError:
            self.instr_counters[pid] = Counter({kind: 1})

    def _write(self, addr: int, value: int, seq: int) -> None:
        self.volatile[addr] = value
        self.volatile_sid[addr] = seq
        self.write_history.setdefault(addr, []).append((seq, value, seq))

    # -- instructions --------------------------------------------------
    def load(self, pid: int, addr: int, *, pflag=None, shared=None, op=None) -> int:
        self._check(addr)
        value = self.volatile.get(addr, 0)
        self._count(pid, "load")
        self.trace.emit(pid, "load", addr=addr, value=value, pflag=pflag, shared=shared, op=op)
        return value

    def store(self, pid: int, addr: int, value: int, *, pflag=None, shared=None, op=None) -> int:
        self._check(addr)
        value &= MASK64
        seq = len(self.trace.events) + 1
        self._write(addr, value, seq)
        self._count(pid, "store")
        self.trace.emit(
            pid, "store", addr=addr, value=value, pflag=pflag, shared=shared, op=op, sid=seq
        )
        return seq

    def cas(self, pid: int, addr: int, expected: int, new: int, *, pflag=None, shared=None, op=None):
        """Returns ``(success, observed, sid)``; ``sid`` is None on failure."""
        self._check(addr)
        observed = self.volatile.get(addr, 0)
        self._count(pid, "store")
        if observed != expected:
            self.trace.emit(
                pid, "cas", addr=addr, value=observed, pflag=pflag, shared=shared, op=op
            )
            return False, observed, None
        new &= MASK64
        seq = len(self.trace.events) + 1
        self._write(addr, new, seq)
        self.trace.emit(
            pid, "cas", addr=addr, value=new, pflag=pflag, shared=shared, op=op, sid=seq
        )
        return True, observed, seq

    def faa(self, pid: int, addr: int, delta: int, *, pflag=None, shared=None, op=None):
        """Returns ``(old, sid)``.  Arithmetic wraps at 64 bits."""
        self._check(addr)
        old = self.volatile.get(addr, 0)
        new = (old + delta) & MASK64
        seq = len(self.trace.events) + 1
        self._write(addr, new, seq)
        self._count(pid, "store")
        self.trace.emit(
            pid, "faa", addr=addr, value=new, pflag=pflag, shared=shared, op=op, sid=seq
        )
        return old, seq

    def pwb(self, pid: int, addr: int, *, op=None) -> None:
        self._check(addr)
        line = self.line(addr)
        snap = tuple(
            (a, self.volatile.get(a, 0), self.volatile_sid.get(a, 0)) for a in self.line_addrs(line)
        )
        self.flush_buffers.setdefault(pid, {})[line] = snap
        self._count(pid, "pwb")
        self.trace.emit(pid, "pwb", addr=addr, op=op)

    def pfence(self, pid: int, *, op=None) -> None:
        buf = self.flush_buffers.pop(pid, None)
        if buf:
            for snap in buf.values():
                self._persist(snap)
        self._count(pid, "pfence")
        self.trace.emit(pid, "pfence", op=op)

    def _persist(self, snap) -> None:
        # a stale snapshot never overwrites a newer persisted store
        psid = self.persistent_sid
        for a, v, s in snap:
            if s > psid.get(a, 0):
                self.persistent[a] = v
                psid[a] = s

    # -- adversary and crash --------------------------------------------
    def evict(self, line: int) -> None:
        if not self.adversary:
            raise MemoryFault("eviction requested but the adversary is disabled")
        addrs = self.line_addrs(line)
        self._persist(
            tuple((a, self.volatile.get(a, 0), self.volatile_sid.get(a, 0)) for a in addrs)
        )
        self.trace.emit(SYSTEM_PID, "evict", addr=line * self.line_words)

    def crash(self) -> PersistentSnapshot:
        self.volatile = dict(self.persistent)
        self.volatile_sid = dict(self.persistent_sid)
        self.flush_buffers.clear()
        self.trace.emit(SYSTEM_PID, "crash")
        return self.snapshot()

    def snapshot(self) -> PersistentSnapshot:
        return PersistentSnapshot(
            MappingProxyType(dict(self.persistent)), MappingProxyType(dict(self.persistent_sid))
        )

    def volatile_snapshot(self) -> dict[int, int]:
        return _nonzero(self.volatile)

    def buffered_lines(self, pid: int) -> dict[int, tuple]:
        return dict(self.flush_buffers.get(pid, {}))

    def totals(self) -> Counter:
        out = Counter()
        for c in self.instr_counters.values():
            out.update(c)
        return out
