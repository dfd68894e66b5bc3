"""P-V interface over the simulated memory.

:class:`PvMemory` turns p-/v-, shared/private loads and stores into raw
instructions.  Four back ends are provided:

``plain``
    every shared p-load is followed by a pwb.
``flit-adj`` / ``flit-ht:<slots>[:packed]``
    flush-if-tagged: a p-store holds its location's counter above zero while
    its value may be unpersisted, and p-loads flush only tagged locations.
``lap``
    link-and-persist: a flag bit in the data word marks unflushed values.

All methods that touch memory are generators meant to be driven by the
scheduler with ``yield from``.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

from .pmem import FLAG_BIT, MASK64, Memory
from .sched import Instr
from .trace import SYSTEM_PID

PLAIN = "plain"
FLIT_ADJACENT = "flit_adjacent"
FLIT_HASHED = "flit_hashed"
LINK_AND_PERSIST = "link_and_persist"

MUTANTS = (
    "none",
    "drop-leading-pfence",
    "drop-inner-pfence",
    "drop-store-pwb",
    "skip-counter-increment",
)

LANES_PER_WORD = 8
LANE_BITS = 8
LANE_MASK = (1 << LANE_BITS) - 1


class ModeError(ValueError):
    """Workload and P-V mode are incompatible."""


class UnsupportedPrimitive(ModeError):
    pass


class PrivacyViolation(RuntimeError):
    pass


class OperationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PvMode:
    kind: str
    slots: int = 0
    packed: bool = False

    def __post_init__(self):
        if self.kind not in (PLAIN, FLIT_ADJACENT, FLIT_HASHED, LINK_AND_PERSIST):
            raise ValueError(f"unknown mode kind {self.kind!r}")
        if self.kind == FLIT_HASHED and self.slots < 1:
            raise ValueError("hashed counter table needs at least one slot")

    @classmethod
    def parse(cls, text: str) -> "PvMode":
        """Parse ``plain | flit-adj | flit-ht:<slots>[:packed] | lap``."""
        if text == "plain":
            return cls(PLAIN)
        if text == "flit-adj":
            return cls(FLIT_ADJACENT)
        if text == "lap":
            return cls(LINK_AND_PERSIST)
        parts = text.split(":")
        if parts[0] == "flit-ht" and len(parts) in (2, 3):
            try:
                slots = int(parts[1])
            except ValueError:
                raise ValueError(f"bad slot count in mode {text!r}") from None
            if len(parts) == 3 and parts[2] != "packed":
                raise ValueError(f"bad mode suffix in {text!r}")
            return cls(FLIT_HASHED, slots, len(parts) == 3)
        raise ValueError(f"unknown mode {text!r}")

    def __str__(self) -> str:
        if self.kind == PLAIN:
            return "plain"
        if self.kind == FLIT_ADJACENT:
            return "flit-adj"
        if self.kind == LINK_AND_PERSIST:
            return "lap"
        return f"flit-ht:{self.slots}" + (":packed" if self.packed else "")

    @property
    def is_flit(self) -> bool:
        return self.kind in (FLIT_ADJACENT, FLIT_HASHED)


def splitmix64(x: int) -> int:
    """Finalizer of the splitmix64 generator, used as the counter hash."""
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class CounterMap:
    """Maps data addresses to flit-counter cells.

    Adjacent mode puts the counter of data word ``2k`` at word ``2k + 1``.
    Hashed mode reserves a table of ``slots`` counters; address ``a`` uses
    slot ``splitmix64(a) % slots``.  Packed tables hold eight 8-bit counters
    per word: slot ``s`` is lane ``s % 8`` of table word ``s // 8``.
    """

    def __init__(self, mode: PvMode, memory: Memory):
        self.mode = mode
        self.packed = mode.packed
        self.region: range | None = None
        self._adjacent: set[int] = set()
        if mode.kind == FLIT_HASHED:
            words = -(-mode.slots // LANES_PER_WORD) if mode.packed else mode.slots
            base = memory.alloc(words)
            self.region = range(base, base + words)

    def register_adjacent(self, data_addr: int) -> None:
        self._adjacent.add(data_addr + 1)

    def slot(self, addr: int) -> int:
        return splitmix64(addr) % self.mode.slots

    def counter_of(self, addr: int) -> tuple[int, int | None]:
        """Return ``(counter word address, lane)``; lane is None unless packed."""
        if self.mode.kind == FLIT_ADJACENT:
            return addr + 1, None
        s = self.slot(addr)
        if self.packed:
            return self.region.start + s // LANES_PER_WORD, s % LANES_PER_WORD
        return self.region.start + s, None

    def is_counter(self, addr: int) -> bool:
        if self.region is not None:
            return addr in self.region
        return addr in self._adjacent

    def addresses(self):
        return self.region if self.region is not None else sorted(self._adjacent)

    @staticmethod
    def read(word: int, lane: int | None) -> int:
        """Counter value held in ``word``; unpacked words are read as signed."""
        if lane is None:
            return word - (1 << 64) if word >> 63 else word
        return (word >> (LANE_BITS * lane)) & LANE_MASK

    @staticmethod
    def delta(lane: int | None, d: int) -> int:
        return d if lane is None else d << (LANE_BITS * lane)

    def lanes(self, word: int) -> list[int]:
        if not self.packed:
            return [self.read(word, None)]
        return [self.read(word, i) for i in range(LANES_PER_WORD)]


class PvMemory:
    """The P-V interface facade.

    ``mutant`` selects one of the documented faulty variants of the FliT
    store path (see :data:`MUTANTS`); it is only meaningful in FliT modes.
    With ``debug_private`` every private access asserts that no other
    process has touched the address.
    """

    def __init__(
        self,
        memory: Memory,
        mode: PvMode | str,
        *,
        mutant: str = "none",
        debug_private: bool = False,
    ):
        if isinstance(mode, str):
            mode = PvMode.parse(mode)
        if mutant not in MUTANTS:
            raise ValueError(f"unknown mutant {mutant!r}")
        self.mem = memory
        self.mode = mode
        self.mutant = mutant
        self.debug_private = debug_private
        self.counters = CounterMap(mode, memory) if mode.is_flit else None
        self.stride = 2 if mode.kind == FLIT_ADJACENT else 1
        self.in_op: set[int] = set()
        # ghost bookkeeping, not part of simulated memory
        self.pending_pstores: Counter = Counter()
        self.collisions = 0
        self.counter_min = 0
        self.counter_max = 0
        self._touched: dict[int, set[int]] = {}

    # -- layout ------------------------------------------------------------
    def alloc(self, n_fields: int) -> list[int]:
        """Allocate an object of ``n_fields`` data words; returns their addresses."""
        if self.mode.kind == FLIT_ADJACENT:
            base = self.mem.alloc(2 * n_fields, align=2)
            fields = [base + 2 * i for i in range(n_fields)]
            for f in fields:
                self.counters.register_adjacent(f)
            return fields
        base = self.mem.alloc(n_fields)
        return list(range(base, base + n_fields))

    def require_flag_bit_free(self, uses_top_bit: bool) -> None:
        if self.mode.kind == LINK_AND_PERSIST and uses_top_bit:
            raise ModeError("link-and-persist needs bit 63 of every data word")

    def counter_of(self, addr: int) -> tuple[int, int | None]:
        if self.counters is None:
            raise ModeError(f"mode {self.mode} has no flit-counters")
        return self.counters.counter_of(addr)

    # -- operation boundaries ---------------------------------------------
    def begin_op(self, pid: int) -> None:
        if pid in self.in_op:
            raise OperationError(f"pid {pid} already has an open operation")
        self.in_op.add(pid)

    def complete_op(self, pid: int):
        if pid not in self.in_op:
            raise OperationError(f"pid {pid} has no open operation")
        yield Instr("pfence", op="complete")
        self.in_op.discard(pid)

    # -- loads ---------------------------------------------------------------
    def load(self, pid: int, addr: int, pflag: bool = True, shared: bool = True):
        if not shared:
            self._check_private(pid, addr)
        else:
            self._touch(pid, addr)
        val = yield Instr("load", addr, pflag=pflag, shared=shared)
        kind = self.mode.kind
        if kind == LINK_AND_PERSIST:
            if pflag and shared and val & FLAG_BIT:
                yield Instr("pwb", addr, op="load")
            return val & ~FLAG_BIT
        if not (pflag and shared):
            return val
        if kind == PLAIN:
            yield Instr("pwb", addr, op="load")
            return val
        caddr, lane = self.counters.counter_of(addr)
        word = yield Instr("load", caddr, shared=True, op="counter")
        c = CounterMap.read(word, lane)
        self._observe(word)
        if c > 0:
            if self.pending_pstores[addr] == 0:
                self.collisions += 1
            yield Instr("pwb", addr, op="load")
        return val

    # -- stores --------------------------------------------------------------
    def store(self, pid: int, addr: int, kind: str, args: tuple, pflag: bool = True, shared: bool = True):
        """Store-like flit-instruction; ``kind`` is ``write``, ``cas`` or ``faa``.

        Returns None for ``write``, ``(success, observed)`` for ``cas`` and the
        old value for ``faa``.
        """
        if kind not in ("write", "cas", "faa"):
            raise ValueError(f"unknown store kind {kind!r}")
        if not shared:
            self._check_private(pid, addr)
            return (yield from self._private_store(addr, kind, args, pflag))
        self._touch(pid, addr)
        mode = self.mode.kind
        if mode == LINK_AND_PERSIST:
            return (yield from self._lap_store(addr, kind, args, pflag))
        if mode == PLAIN:
            yield Instr("pfence", op="store")
            r = yield self._data(addr, kind, args, pflag, True)
            if pflag:
                yield Instr("pwb", addr, op="store")
                yield Instr("pfence", op="store")
            return _result(kind, r)
        return (yield from self._flit_store(addr, kind, args, pflag))

    def _flit_store(self, addr, kind, args, pflag):
        m = self.mutant
        if m != "drop-leading-pfence":
            yield Instr("pfence", op="store")
        if not pflag:
            r = yield self._data(addr, kind, args, False, True)
            return _result(kind, r)
        caddr, lane = self.counters.counter_of(addr)
        if m != "skip-counter-increment":
            old, _ = yield Instr("faa", caddr, (CounterMap.delta(lane, 1),), shared=True, op="counter")
            self._observe((old + CounterMap.delta(lane, 1)) & MASK64)
            if CounterMap.read(old, lane) > self.pending_pstores[addr]:
                self.collisions += 1
        self.pending_pstores[addr] += 1
        r = yield self._data(addr, kind, args, True, True)
        if m != "drop-store-pwb":
            yield Instr("pwb", addr, op="store")
        if m != "drop-inner-pfence":
            yield Instr("pfence", op="store")
        old, _ = yield Instr("faa", caddr, (CounterMap.delta(lane, -1),), shared=True, op="counter")
        self._observe((old + CounterMap.delta(lane, -1)) & MASK64)
        self.pending_pstores[addr] -= 1
        return _result(kind, r)

    def _private_store(self, addr, kind, args, pflag):
        if self.mode.kind == LINK_AND_PERSIST:
            _check_value(kind, args)
        r = yield self._data(addr, kind, args, pflag, False)
        if pflag:
            yield Instr("pwb", addr, op="store")
            yield Instr("pfence", op="store")
        return _result(kind, r)

    def _lap_store(self, addr, kind, args, pflag):
        _check_value(kind, args)
        yield Instr("pfence", op="store")
        if not pflag:
            r = yield self._data(addr, kind, args, False, True)
            if kind == "cas":
                ok, obs, _ = r
                return ok, obs & ~FLAG_BIT
            return _result(kind, r)
        if kind != "cas":
            raise UnsupportedPrimitive(f"link-and-persist p-stores must use CAS, not {kind}")
        expected, new = args
        flagged = new | FLAG_BIT
        ok, obs, _ = yield Instr("cas", addr, (expected, flagged), pflag=True, shared=True)
        if not ok and obs == expected | FLAG_BIT:
            # logically equal but not yet flushed: persist it, then replace it
            yield Instr("pwb", addr, op="load")
            yield Instr("pfence", op="store")
            ok, obs, _ = yield Instr("cas", addr, (obs, flagged), pflag=True, shared=True)
        if ok:
            yield Instr("pwb", addr, op="store")
            yield Instr("pfence", op="store")
            yield Instr("cas", addr, (flagged, new), shared=True, op="flag")
        elif obs & FLAG_BIT:
            yield Instr("pwb", addr, op="load")
        return ok, obs & ~FLAG_BIT

    @staticmethod
    def _data(addr, kind, args, pflag, shared) -> Instr:
        if kind == "write":
            return Instr("store", addr, args, pflag=pflag, shared=shared)
        return Instr(kind, addr, args, pflag=pflag, shared=shared)

    # -- recovery --------------------------------------------------------------
    def reset_counters(self) -> None:
        """Zero every counter cell that survived a crash.

        Counters are volatile metadata; the dead processes that raised them
        can never lower them again.
        """
        if self.counters is None:
            return
        mem = self.mem
        for caddr in sorted(a for a, v in mem.volatile.items() if v and self.counters.is_counter(a)):
            mem.store(SYSTEM_PID, caddr, 0, shared=True, op="counter")
        self.pending_pstores.clear()
        self.in_op.clear()

    # -- ghost checks ------------------------------------------------------------
    def _observe(self, word: int) -> None:
        for v in self.counters.lanes(word):
            if v < self.counter_min:
                self.counter_min = v
            if v > self.counter_max:
                self.counter_max = v

    def _touch(self, pid: int, addr: int) -> None:
        if self.debug_private:
            self._touched.setdefault(addr, set()).add(pid)

    def _check_private(self, pid: int, addr: int) -> None:
        if not self.debug_private:
            return
        seen = self._touched.setdefault(addr, set())
        others = seen - {pid}
        if others:
            raise PrivacyViolation(
                f"pid {pid} made a private access to {addr} already touched by {sorted(others)}"
            )
        seen.add(pid)


def _check_value(kind, args):
    vals = args[1:] if kind == "cas" else args
    for v in vals:
        if v & FLAG_BIT:
            raise ModeError("value uses bit 63, which link-and-persist reserves")


def _result(kind, r):
    if kind == "write":
        return None
    if kind == "cas":
        ok, observed, _ = r
        return ok, observed
    old, _ = r
    return old
