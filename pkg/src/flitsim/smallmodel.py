"""Exhaustive small-model checks of the FliT store/load paths.

Two tiny two-process workloads are enumerated under every schedule:

``store-load``
    each process p-stores its own location, then p-loads the other's
    (two operations per process, two shared locations).
``load-store``
    one process p-stores ``x``; the other, within a single operation,
    p-loads ``x`` and p-stores ``y``.  This is the shape that needs the
    fence in front of a shared store.

On top of that, a solo ``insert`` into an empty list is crashed after every
possible step and checked for durable linearizability.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .checker import SetSpec, Verdict, check_condition1, check_conditions234, check_counters, check_durable_linearizable
from .pmem import Memory
from .pvlib import MUTANTS, PvMemory
from .sched import Inv, Resp, enumerate_interleavings
from .structures import DurableList, client

WORKLOADS = ("store-load", "load-store")
CHECKS = ("cond1", "cond234", "counters")
# enough for the longest FliT schedule of either workload
SUITE_MAX_STEPS = 24


def _pstore_op(pv, pid, addr, value):
    yield Inv("write", value)
    pv.begin_op(pid)
    yield from pv.store(pid, addr, "write", (value,))
    yield from pv.complete_op(pid)
    yield Resp("write", None)


def _pload_op(pv, pid, addr):
    yield Inv("read", None)
    pv.begin_op(pid)
    v = yield from pv.load(pid, addr)
    yield from pv.complete_op(pid)
    yield Resp("read", v)


def _copy_op(pv, pid, src, dst):
    yield Inv("copy", None)
    pv.begin_op(pid)
    v = yield from pv.load(pid, src)
    yield from pv.store(pid, dst, "write", (v + 10,))
    yield from pv.complete_op(pid)
    yield Resp("copy", v)


def workload_setup(name: str, mode: str = "flit-adj", mutant: str = "none", line_words: int = 1):
    """Return a ``setup()`` building fresh memory and programs for ``name``."""
    if name not in WORKLOADS:
        raise ValueError(f"unknown workload {name!r}")

    def setup():
        mem = Memory(line_words=line_words)
        pv = PvMemory(mem, mode, mutant=mutant)
        x = pv.alloc(1)[0]
        y = pv.alloc(1)[0]
        if name == "store-load":

            def proc(pid, mine, other, value):
                yield from _pstore_op(pv, pid, mine, value)
                yield from _pload_op(pv, pid, other)

            return mem, [proc(0, x, y, 1), proc(1, y, x, 2)]

        def writer(pid):
            yield from _pstore_op(pv, pid, x, 1)

        def copier(pid):
            yield from _copy_op(pv, pid, x, y)

        return mem, [writer(0), copier(1)]

    return setup


@dataclass
class SuiteResult:
    mode: str
    mutant: str
    interleavings: dict[str, int] = field(default_factory=dict)
    failures: list[dict] = field(default_factory=list)
    counter_range: tuple[int, int] = (0, 0)

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "mutant": self.mutant,
            "interleavings": dict(self.interleavings),
            "failures": list(self.failures),
            "counter_range": list(self.counter_range),
        }


def _counter_range(trace, packed: bool):
    lo, hi = 0, 0
    for ev in trace:
        if ev.op == "counter" and ev.value is not None:
            vals = [(ev.value >> (8 * i)) & 0xFF for i in range(8)] if packed else [
                ev.value - (1 << 64) if ev.value >> 63 else ev.value
            ]
            lo, hi = min(lo, *vals), max(hi, *vals)
    return lo, hi


def exhaustive_suite(
    mode: str = "flit-adj",
    mutant: str = "none",
    workloads=WORKLOADS,
    *,
    max_steps: int = SUITE_MAX_STEPS,
    stop_on_violation: bool = False,
    line_words: int = 1,
    checks=CHECKS,
) -> SuiteResult:
    """Check every interleaving of each workload with cond1, cond234 and the
    counter bound (or the subset named in ``checks``).  Failures record the
    workload, schedule and verdict."""
    unknown = set(checks) - set(CHECKS)
    if unknown:
        raise ValueError(f"unknown checks {sorted(unknown)}")
    res = SuiteResult(mode, mutant)
    packed = mode.endswith(":packed")
    lo, hi = 0, 0
    for name in workloads:
        n = 0
        for il in enumerate_interleavings(workload_setup(name, mode, mutant, line_words), max_steps):
            n += 1
            if mode.startswith("flit"):
                a, b = _counter_range(il.trace, packed)
                lo, hi = min(lo, a), max(hi, b)
            for check in checks:
                if check == "cond1":
                    v = check_condition1(il.trace, line_words)
                elif check == "cond234":
                    v = check_conditions234(il.trace, line_words)
                else:
                    v = check_counters(il.trace, 2, packed=packed, line_words=line_words)
                if not v.ok:
                    res.failures.append(
                        {"workload": name, "check": check, "schedule": list(il.choices), **v.to_dict()}
                    )
                    break
            if stop_on_violation and res.failures:
                break
        res.interleavings[name] = n
        if stop_on_violation and res.failures:
            break
    res.counter_range = (lo, hi)
    return res


@dataclass
class SweepResult:
    crash_points: int
    recovered: set = field(default_factory=set)
    failures: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def solo_insert_sweep(mode: str = "flit-adj", mutant: str = "none", key: int = 3, ds_buckets: int = 1) -> SweepResult:
    """Crash a solo ``insert(key)`` after every step; each crashed prefix must
    be durably linearizable and must recover to ``{}`` or ``{key}``."""
    holder = {}

    def setup():
        mem = Memory()
        pv = PvMemory(mem, mode, mutant=mutant)
        ds = DurableList(pv, buckets=ds_buckets)
        holder["ds"] = ds
        return mem, [client(ds, 0, [("insert", key)])]

    count = 0
    res = SweepResult(0)
    for il in enumerate_interleavings(setup, max_steps=200, crash=True):
        count += 1
        ds = holder["ds"]
        v = check_durable_linearizable(il.trace, SetSpec, ds.recover, snapshots=[il.snapshot])
        try:
            res.recovered.add(ds.recover(il.snapshot).keys)
        except Exception as exc:  # corrupted snapshot
            res.recovered.add(f"corrupt: {exc}")
        if not v.ok:
            res.failures.append({"crash_after": len(il.choices), **v.to_dict()})
    res.crash_points = count
    return res


def mutation_campaign(mutant: str, mode: str = "flit-adj") -> dict:
    """Run the exhaustive suite and the crash sweep against ``mutant``."""
    if mutant not in MUTANTS:
        raise ValueError(f"unknown mutant {mutant!r}; choose from {', '.join(MUTANTS)}")
    suite = exhaustive_suite(mode, mutant, stop_on_violation=mutant != "none")
    sweep = solo_insert_sweep(mode, mutant)
    caught_by = []
    if suite.failures:
        caught_by.append("exhaustive")
    if sweep.failures:
        caught_by.append("crash-sweep")
    first = (suite.failures or sweep.failures or [None])[0]
    return {
        "mutant": mutant,
        "mode": mode,
        "caught": bool(caught_by),
        "caught_by": caught_by,
        "interleavings": suite.interleavings,
        "crash_points": sweep.crash_points,
        "recovered_states": sorted(
            (sorted(s) if isinstance(s, frozenset) else s for s in sweep.recovered),
            key=lambda s: (isinstance(s, str), len(s), str(s)),
        ),
        "witness": first,
    }


def verdict_of_campaign(summary: dict) -> Verdict:
    """Collapse a campaign summary into the verdict schema."""
    w = summary["witness"]
    if w is None:
        return Verdict(message=f"mutant {summary['mutant']}: all checks pass")
    return Verdict(
        "violation",
        w.get("condition"),
        w.get("witnesses", []),
        f"mutant {summary['mutant']} caught by {', '.join(summary['caught_by'])}: {w.get('message', '')}",
    )
