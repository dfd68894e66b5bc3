"""Deterministic scheduling of logical processes over a :class:`Memory`.

A logical process is a generator.  It yields :class:`Instr` requests (exactly
one memory instruction each) and :class:`Inv`/:class:`Resp` markers for
operation boundaries; the scheduler executes the request when it picks the
process and sends the result back::

    def program():
        yield Inv("insert", 5)
        ok = yield from pv.store(pid, addr, "cas", (0, 5))
        yield Resp("insert", ok)

Only instructions are scheduling points.  An invocation is recorded when the
process is next scheduled (right before its first instruction); a response
is recorded right after the last instruction of the operation.
"""

from __future__ import annotations

import json
import random
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, Generator, Iterable, Iterator, Sequence

from .pmem import Memory, MemoryFault, PersistentSnapshot
from .trace import SYSTEM_PID, Event, Trace, TraceError


@dataclass(frozen=True, slots=True)
class Instr:
    kind: str
    addr: int | None = None
    args: tuple = ()
    pflag: bool | None = None
    shared: bool | None = None
    op: str | None = None


@dataclass(frozen=True, slots=True)
class Inv:
    name: str
    arg: int | None = None


@dataclass(frozen=True, slots=True)
class Resp:
    name: str
    value: int | None = None


Program = Generator


def execute(mem: Memory, pid: int, ins: Instr):
    k = ins.kind
    if k == "load":
        return mem.load(pid, ins.addr, pflag=ins.pflag, shared=ins.shared, op=ins.op)
    if k == "store":
        return mem.store(pid, ins.addr, ins.args[0], pflag=ins.pflag, shared=ins.shared, op=ins.op)
    if k == "cas":
        return mem.cas(pid, ins.addr, *ins.args, pflag=ins.pflag, shared=ins.shared, op=ins.op)
    if k == "faa":
        return mem.faa(pid, ins.addr, ins.args[0], pflag=ins.pflag, shared=ins.shared, op=ins.op)
    if k == "pwb":
        return mem.pwb(pid, ins.addr, op=ins.op)
    if k == "pfence":
        return mem.pfence(pid, op=ins.op)
    raise ValueError(f"unknown instruction {k!r}")


class Status(Enum):
    RUNNABLE = "runnable"
    BLOCKED = "blocked-never"
    DONE = "done"


class LogicalProcess:
    def __init__(self, pid: int, program: Program):
        self.pid = pid
        self.program = program
        self.status = Status.RUNNABLE
        self.pending: Instr | None = None
        self._inv: Inv | None = None
        self.steps = 0

    def start(self, mem: Memory) -> None:
        self._advance(mem, None, first=True)

    def step(self, mem: Memory) -> None:
        if self._inv is not None:
            mem.trace.emit(self.pid, "inv", value=self._inv.arg, op=self._inv.name)
            self._inv = None
        result = execute(mem, self.pid, self.pending)
        self.steps += 1
        self._advance(mem, result)

    def _advance(self, mem: Memory, value, first: bool = False) -> None:
        gen = self.program
        while True:
            try:
                req = next(gen) if first else gen.send(value)
            except StopIteration:
                self.pending = None
                self.status = Status.DONE
                if self._inv is not None:
                    raise RuntimeError(f"pid {self.pid}: program ended inside an invocation")
                return
            first = False
            value = None
            if isinstance(req, Instr):
                self.pending = req
                return
            if isinstance(req, Inv):
                if self._inv is not None:
                    raise RuntimeError(f"pid {self.pid}: nested invocation")
                self._inv = req
            elif isinstance(req, Resp):
                if self._inv is not None:
                    # operation without instructions
                    mem.trace.emit(self.pid, "inv", value=self._inv.arg, op=self._inv.name)
                    self._inv = None
                mem.trace.emit(self.pid, "resp", value=_wordify(req.value), op=req.name)
            else:
                raise TypeError(f"pid {self.pid} yielded {req!r}")

    def kill(self) -> None:
        self.program.close()
        self.status = Status.BLOCKED
        self.pending = None


def _wordify(v):
    if isinstance(v, bool):
        return int(v)
    return v


# -- policies ------------------------------------------------------------


@dataclass(frozen=True)
class RoundRobin:
    kind: str = "round_robin"

    def chooser(self):
        last = [-1]

        def choose(runnable: list[LogicalProcess]) -> LogicalProcess:
            for p in runnable:
                if p.pid > last[0]:
                    break
            else:
                p = runnable[0]
            last[0] = p.pid
            return p

        return choose


@dataclass(frozen=True)
class RandomPolicy:
    seed: int = 0
    kind: str = "random"

    def chooser(self):
        rng = random.Random(self.seed)
        return lambda runnable: runnable[rng.randrange(len(runnable))]


@dataclass(frozen=True)
class Exhaustive:
    max_steps: int = 14
    max_branches: int | None = None
    kind: str = "exhaustive"


@dataclass(frozen=True)
class Scripted:
    """Replays a list of choice indices into the pid-ordered runnable list."""

    choices: tuple[int, ...]
    kind: str = "scripted"

    def chooser(self):
        it = iter(self.choices)
        return lambda runnable: runnable[next(it, 0)]


def parse_policy(text: str, seed: int = 0):
    if text in ("rr", "round_robin"):
        return RoundRobin()
    if text in ("rand", "random"):
        return RandomPolicy(seed)
    if text in ("exh", "exhaustive"):
        return Exhaustive()
    raise ValueError(f"unknown policy {text!r}")


# -- adversary -------------------------------------------------------------


@dataclass(frozen=True)
class AdversaryPlan:
    """Crash and eviction schedule.

    ``crash_at=k`` crashes after exactly ``k`` instructions have executed.
    ``evictions`` lists ``(step, line)`` pairs applied before that step;
    ``evict_rate`` adds seeded random evictions of allocated lines.
    """

    crash_at: int | tuple[int, ...] | None = None
    evictions: tuple[tuple[int, int], ...] = ()
    evict_rate: float = 0.0
    evict_seed: int = 0

    @property
    def crash_steps(self) -> frozenset[int]:
        if self.crash_at is None:
            return frozenset()
        if isinstance(self.crash_at, int):
            return frozenset([self.crash_at])
        return frozenset(self.crash_at)

    @property
    def evicts(self) -> bool:
        return bool(self.evictions) or self.evict_rate > 0


NO_ADVERSARY = AdversaryPlan()


# -- running ---------------------------------------------------------------

CrashHook = Callable[[PersistentSnapshot, Memory], Iterable[Program]]


@dataclass
class RunResult:
    trace: Trace
    memory: Memory
    status: str  # "done" | "budget" | "crashed"
    steps: int
    choices: list[int] = field(default_factory=list)
    snapshots: list[PersistentSnapshot] = field(default_factory=list)
    pids: list[int] = field(default_factory=list)


def _spawn(programs, first_pid: int) -> list[LogicalProcess]:
    procs = []
    pid = first_pid
    for item in programs:
        if isinstance(item, tuple):
            pid, prog = item
        else:
            prog = item
        procs.append(LogicalProcess(pid, prog))
        pid += 1
    pids = [p.pid for p in procs]
    if len(set(pids)) != len(pids):
        raise ValueError(f"duplicate pids {pids}")
    return procs


def run(
    programs: Sequence,
    policy=RoundRobin(),
    adversary: AdversaryPlan = NO_ADVERSARY,
    memory: Memory | None = None,
    *,
    budget: int = 1_000_000,
    on_crash: CrashHook | None = None,
) -> RunResult:
    """Drive ``programs`` to completion, budget exhaustion, or a crash.

    After a crash every live process is discarded; ``on_crash`` may return
    recovery programs, which get fresh pids.  Without a hook the run stops at
    the crash with status ``"crashed"``.
    """
    mem = memory if memory is not None else Memory(adversary=adversary.evicts)
    if adversary.evicts and not mem.adversary:
        raise MemoryFault("adversary plan has evictions but memory adversary is disabled")
    procs = _spawn(programs, 0)
    for p in procs:
        p.start(mem)
    next_pid = max((p.pid for p in procs), default=-1) + 1
    choose = policy.chooser()
    crash_steps = adversary.crash_steps
    evictions: dict[int, list[int]] = {}
    for step, line in adversary.evictions:
        evictions.setdefault(step, []).append(line)
    erng = random.Random(adversary.evict_seed)

    result = RunResult(mem.trace, mem, "done", 0)
    step = 0
    while True:
        for line in evictions.get(step, ()):
            mem.evict(line)
        if adversary.evict_rate and erng.random() < adversary.evict_rate:
            mem.evict(erng.randrange(1, mem.cursor) // mem.line_words)
        if step in crash_steps:
            snap = mem.crash()
            result.snapshots.append(snap)
            for p in procs:
                if p.status is Status.RUNNABLE:
                    p.kill()
            if on_crash is None:
                result.status = "crashed"
                break
            procs = _spawn(on_crash(snap, mem), next_pid)
            for p in procs:
                p.start(mem)
            next_pid = max((p.pid for p in procs), default=next_pid - 1) + 1
            result.status = "crashed"
        runnable = [p for p in procs if p.status is Status.RUNNABLE]
        if not runnable:
            break
        if step >= budget:
            result.status = "budget"
            break
        p = choose(runnable)
        result.choices.append(runnable.index(p))
        result.pids.append(p.pid)
        p.step(mem)
        step += 1
    result.steps = step
    return result


def manifest(policy, adversary: AdversaryPlan, n_procs: int, budget: int, **extra) -> dict:
    pol = asdict(policy) if hasattr(policy, "__dataclass_fields__") else {"kind": str(policy)}
    adv = asdict(adversary)
    if isinstance(adv["crash_at"], tuple):
        adv["crash_at"] = list(adv["crash_at"])
    adv["evictions"] = [list(e) for e in adv["evictions"]]
    out = {
        "policy": pol,
        "seed": pol.get("seed"),
        "adversary": adv,
        "processes": n_procs,
        "budget": budget,
    }
    out.update(extra)
    return out


def manifest_json(m: dict) -> str:
    return json.dumps(m, sort_keys=True, indent=2) + "\n"


# -- exhaustive enumeration --------------------------------------------------


class BoundExceeded(RuntimeError):
    pass


@dataclass
class Interleaving:
    trace: Trace
    choices: tuple[int, ...]
    memory: Memory | None = None
    snapshot: PersistentSnapshot | None = None  # set for crashed prefixes


Setup = Callable[[], tuple[Memory, Sequence]]


def enumerate_interleavings(
    setup: Setup,
    max_steps: int = 14,
    *,
    crash: bool = False,
    max_branches: int | None = None,
) -> Iterator[Interleaving]:
    """Yield every distinct scheduler choice sequence exactly once (DFS).

    ``setup`` must build a fresh memory and fresh programs on every call; each
    interleaving is produced by re-executing from scratch.  With ``crash=True``
    the yielded items are instead every distinct schedule prefix (including
    the empty one and each complete run) followed by a crash.
    """
    prefix: list[int] = []
    first_new = 0
    produced = 0
    while True:
        mem, programs = setup()
        procs = _spawn(programs, 0)
        for p in procs:
            p.start(mem)
        choices: list[int] = []
        widths: list[int] = []
        depth = 0
        while True:
            runnable = [p for p in procs if p.status is Status.RUNNABLE]
            if crash and depth >= first_new:
                yield _crashed(mem, choices)
            if not runnable:
                break
            if depth >= max_steps:
                raise BoundExceeded(f"schedule exceeds {max_steps} steps")
            i = prefix[depth] if depth < len(prefix) else 0
            widths.append(len(runnable))
            choices.append(i)
            runnable[i].step(mem)
            depth += 1
        if not crash:
            yield Interleaving(mem.trace, tuple(choices), mem)
        produced += 1
        if max_branches is not None and produced >= max_branches:
            return
        k = len(choices) - 1
        while k >= 0 and choices[k] + 1 >= widths[k]:
            k -= 1
        if k < 0:
            return
        prefix = choices[:k] + [choices[k] + 1]
        first_new = k + 1


def _crashed(mem: Memory, choices: list[int]) -> Interleaving:
    events = list(mem.trace.events)
    events.append(Event(len(events) + 1, SYSTEM_PID, "crash"))
    return Interleaving(Trace(events), tuple(choices), None, mem.snapshot())


def count_interleavings(setup: Setup, max_steps: int = 14) -> int:
    return sum(1 for _ in enumerate_interleavings(setup, max_steps))


def crash_points(n_steps: int, k: int = 64, seed: int = 0) -> list[int]:
    """Crash indices for a run of ``n_steps`` steps: all of them when there
    are at most ``k`` candidates, otherwise ``k`` sampled ones."""
    candidates = n_steps + 1
    if candidates <= k:
        return list(range(candidates))
    return sorted(random.Random(seed).sample(range(candidates), k))


# -- replay ------------------------------------------------------------------


class ReplayError(TraceError):
    """Recorded event disagrees with the state the replay reached."""


def replay(trace: Trace | Iterable[Event], memory: Memory | None = None) -> Memory:
    """Re-apply recorded events to ``memory`` and verify each one."""
    events = list(trace)
    mem = memory if memory is not None else Memory()
    top = max((ev.addr for ev in events if ev.addr is not None), default=0)
    if ev_line := [ev for ev in events if ev.kind == "evict"]:
        top = max(top, max(e.addr for e in ev_line) + mem.line_words - 1)
    mem.cursor = max(mem.cursor, top + 1)
    mem.adversary = True
    for ev in events:
        got = _reapply(mem, ev)
        if got.to_dict() != ev.to_dict():
            raise ReplayError(f"seq {ev.seq}: recorded {ev.to_dict()} but replay gives {got.to_dict()}")
    return mem


def _reapply(mem: Memory, ev: Event) -> Event:
    k, pid = ev.kind, ev.pid
    kw = dict(pflag=ev.pflag, shared=ev.shared, op=ev.op)
    if k == "load":
        mem.load(pid, ev.addr, **kw)
    elif k == "store":
        mem.store(pid, ev.addr, ev.value, **kw)
    elif k == "cas":
        cur = mem.volatile.get(ev.addr, 0)
        if ev.sid is not None:
            mem.cas(pid, ev.addr, cur, ev.value, **kw)
        else:
            # force a failure; the observed value must still match
            mem.cas(pid, ev.addr, cur ^ 1, 0, **kw)
    elif k == "faa":
        cur = mem.volatile.get(ev.addr, 0)
        mem.faa(pid, ev.addr, (ev.value or 0) - cur, **kw)
    elif k == "pwb":
        mem.pwb(pid, ev.addr, op=ev.op)
    elif k == "pfence":
        mem.pfence(pid, op=ev.op)
    elif k == "evict":
        mem.evict(mem.line(ev.addr))
    elif k == "crash":
        mem.crash()
    elif k in ("inv", "resp"):
        mem.trace.emit(pid, k, value=ev.value, op=ev.op)
    else:
        raise ReplayError(f"seq {ev.seq}: unknown kind {k!r}")
    return mem.trace.events[-1]
