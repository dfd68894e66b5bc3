"""Experiment harness: workloads, crash campaigns and flush accounting.

A run pre-fills the set with half of the key range (pid 0, alone), then
``procs`` worker processes (pids ``1..procs``) execute ``ops`` operations in
total.  Every number in a :class:`Report` is recomputed from the trace
events at or after ``measure_from_seq``, so reports reconcile with traces
exactly.
"""

from __future__ import annotations

import csv
import io
import json
import random
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .checker import (
    BoundError,
    SetSpec,
    Verdict,
    check_condition1,
    check_conditions234,
    check_counters,
    check_durable_linearizable,
    check_linearizable,
)
from .pmem import Memory
from .pvlib import MUTANTS, PvMemory, PvMode
from .sched import (
    AdversaryPlan,
    BoundExceeded,
    Inv,
    Resp,
    RoundRobin,
    crash_points,
    enumerate_interleavings,
    manifest,
    manifest_json,
    parse_policy,
    run,
)
from .structures import OPS, make_set, parse_ds
from .trace import Trace, operations

CHECKS = ("cond1", "cond234", "counters", "lin", "dlin")
CHECK_ALIASES = {"durable-lin": "dlin", "durable_lin": "dlin"}
CRASH_MODES = ("none", "random", "sweep")
POLICIES = ("rr", "rand", "exh")
INSTR_KINDS = frozenset(["load", "store", "cas", "faa", "pwb", "pfence"])
UPDATE_OPS = ("insert", "delete")

# brute-force linearizability bound used by experiments; an era of a
# desk-scale run holds the prefill plus a few dozen operations
EXPERIMENT_LIN_OPS = 96


class ConfigError(ValueError):
    """An experiment configuration does not parse or is out of range."""


@dataclass(frozen=True)
class ExperimentConfig:
    ds: str = "list"
    mode: str = "flit-adj"
    procs: int = 2
    ops: int = 20  # total over all worker processes
    update_pct: int = 50
    key_range: int = 16
    seed: int = 0
    policy: str = "rand"
    crash: str = "none"
    line_words: int = 1
    checks: tuple[str, ...] = ()
    evict_rate: float = 0.0
    prefill: bool = True
    mutant: str = "none"
    sweep_points: int = 64
    exh_max_branches: int = 2000
    budget: int = 2_000_000

    def __post_init__(self):
        checks = tuple(CHECK_ALIASES.get(c, c) for c in self.checks)
        object.__setattr__(self, "checks", checks)
        self.validate()

    def validate(self) -> None:
        try:
            parse_ds(self.ds)
            PvMode.parse(self.mode)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.procs < 1:
            raise ConfigError("procs must be >= 1")
        if self.ops < 0:
            raise ConfigError("ops must be >= 0")
        if not 0 <= self.update_pct <= 100:
            raise ConfigError("update_pct must lie in [0, 100]")
        if self.key_range < 1:
            raise ConfigError("key_range must be >= 1")
        if self.policy not in POLICIES:
            raise ConfigError(f"policy must be one of {', '.join(POLICIES)}")
        if self.crash not in CRASH_MODES:
            raise ConfigError(f"crash must be one of {', '.join(CRASH_MODES)}")
        if self.policy == "exh" and self.crash != "none":
            raise ConfigError("exhaustive policy does not combine with crash injection")
        if self.line_words < 1:
            raise ConfigError("line_words must be >= 1")
        if not 0.0 <= self.evict_rate <= 1.0:
            raise ConfigError("evict_rate must lie in [0, 1]")
        if self.mutant not in MUTANTS:
            raise ConfigError(f"unknown mutant {self.mutant!r}")
        bad = [c for c in self.checks if c not in CHECKS]
        if bad:
            raise ConfigError(f"unknown checks {bad}; choose from {', '.join(CHECKS)}")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        d = dict(d)
        # accept the CLI spellings too
        for alias, name in (("updates", "update_pct"), ("keys", "key_range")):
            if alias in d:
                d[name] = d.pop(alias)
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        if isinstance(d.get("checks"), str):
            d["checks"] = [c for c in d["checks"].split(",") if c]
        if "checks" in d:
            d["checks"] = tuple(d["checks"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["checks"] = list(self.checks)
        return d


def generate_ops(cfg: ExperimentConfig) -> list[list[tuple[str, int]]]:
    """Per-worker operation lists; uniform keys, updates split 50/50."""
    rng = random.Random(cfg.seed)
    ops = []
    for _ in range(cfg.ops):
        key = rng.randrange(cfg.key_range)
        if rng.random() * 100 < cfg.update_pct:
            name = "insert" if rng.random() < 0.5 else "delete"
        else:
            name = "contains"
        ops.append((name, key))
    return [ops[i :: cfg.procs] for i in range(cfg.procs)]


def prefill_keys(cfg: ExperimentConfig) -> list[int]:
    if not cfg.prefill:
        return []
    rng = random.Random(f"prefill:{cfg.seed}")
    return rng.sample(range(cfg.key_range), cfg.key_range // 2)


class _World:
    """Fresh memory, P-V facade and structure for one execution."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.mem = Memory(line_words=cfg.line_words, adversary=cfg.evict_rate > 0)
        self.pv = PvMemory(self.mem, cfg.mode, mutant=cfg.mutant)
        self.ds = make_set(self.pv, cfg.ds, cfg.key_range)
        keys = prefill_keys(cfg)
        if keys:
            run([(0, self._client(0, [("insert", k) for k in keys]))], RoundRobin(), memory=self.mem)
        self.measure_from = len(self.mem.trace) + 1
        self.collisions_before = self.pv.collisions
        self.work = generate_ops(cfg)
        self.progress = [0] * cfg.procs

    def _client(self, pid, ops, slot=None):
        for name, key in ops:
            if slot is not None:
                self.progress[slot] += 1
            yield Inv(name, key)
            r = yield from self.ds.apply(pid, name, key)
            yield Resp(name, r)

    def workers(self):
        return [(i + 1, self._client(i + 1, ops, i)) for i, ops in enumerate(self.work)]

    def recovery(self, snap, mem):
        # counters are volatile metadata; survivors of the crash are stale
        self.pv.reset_counters()
        base = self.cfg.procs + 1
        progs = []
        for i, ops in enumerate(self.work):
            rest = ops[self.progress[i] :]
            self.work[i] = rest
            self.progress[i] = 0
            if rest:
                progs.append((base + i, self._client(base + i, rest, i)))
        return progs

    def run(self, crash_at=None):
        cfg = self.cfg
        adv = AdversaryPlan(crash_at=crash_at, evict_rate=cfg.evict_rate, evict_seed=cfg.seed)
        policy = parse_policy(cfg.policy, cfg.seed)
        res = run(
            self.workers(),
            policy,
            adv,
            self.mem,
            budget=cfg.budget,
            on_crash=self.recovery if crash_at is not None else None,
        )
        return res, adv, policy


# -- checks ------------------------------------------------------------------


def run_checks(trace: Trace, cfg: ExperimentConfig, recover_fn, snapshots=None) -> dict[str, dict]:
    out = {}
    crashed = any(ev.kind == "crash" for ev in trace)
    for name in cfg.checks:
        if name == "cond1":
            v = check_condition1(trace, cfg.line_words)
        elif name == "cond234":
            v = check_conditions234(trace, cfg.line_words)
        elif name == "counters":
            if not PvMode.parse(cfg.mode).is_flit:
                v = Verdict("skipped", message=f"mode {cfg.mode} has no flit-counters")
            else:
                v = check_counters(trace, cfg.procs, packed=cfg.mode.endswith(":packed"), line_words=cfg.line_words)
        elif name == "lin" and crashed:
            v = Verdict("skipped", message="trace contains a crash; use dlin")
        else:
            try:
                if name == "lin":
                    v = check_linearizable(trace, SetSpec, EXPERIMENT_LIN_OPS)
                else:
                    v = check_durable_linearizable(
                        trace,
                        SetSpec,
                        recover_fn,
                        line_words=cfg.line_words,
                        max_ops=EXPERIMENT_LIN_OPS,
                        snapshots=snapshots,
                    )
            except BoundError as exc:
                v = Verdict("skipped", message=str(exc))
        out[name] = v.to_dict()
    return out


def _merge(into: dict, verdicts: dict, label: str) -> None:
    """Keep the first violation seen for each check."""
    for name, v in verdicts.items():
        cur = into.get(name)
        if cur is None or (cur["result"] != "violation" and v["result"] == "violation"):
            if v["result"] == "violation" and label:
                v = dict(v, message=f"{label}: {v['message']}")
            into[name] = v


# -- accounting ----------------------------------------------------------------


def account(trace: Trace, measure_from: int) -> dict:
    """Flush and instruction counts over events with ``seq >= measure_from``."""
    window = trace.events[measure_from - 1 :]
    open_op: dict[int, str] = {}
    per = {name: {"count": 0, "pwb": 0, "pfence": 0, "load_pwbs": 0, "store_pwbs": 0, "instructions": 0} for name in OPS}
    tot = {"pwb_total": 0, "pfence_total": 0, "load_pwbs": 0, "store_pwbs": 0, "instructions": 0}
    for ev in window:
        k = ev.kind
        if k == "inv":
            open_op[ev.pid] = ev.op
            continue
        if k == "resp":
            open_op.pop(ev.pid, None)
            per[ev.op]["count"] += 1
            continue
        if k == "crash":
            open_op.clear()
            continue
        if k not in INSTR_KINDS:
            continue
        bucket = per.get(open_op.get(ev.pid))
        rows = (tot, bucket) if bucket is not None else (tot,)
        for row in rows:
            row["instructions"] += 1
            if k == "pwb":
                row["pwb_total" if row is tot else "pwb"] += 1
                if ev.op == "load":
                    row["load_pwbs"] += 1
                elif ev.op == "store":
                    row["store_pwbs"] += 1
            elif k == "pfence":
                row["pfence_total" if row is tot else "pfence"] += 1
    done = sum(p["count"] for p in per.values())
    updates = sum(per[n]["count"] for n in UPDATE_OPS)
    for p in per.values():
        c = p["count"]
        p["pwb_per_op"] = _ratio(p["pwb"], c)
        p["pfence_per_op"] = _ratio(p["pfence"], c)
        p["instructions_per_op"] = _ratio(p["instructions"], c)
    pending = sum(1 for o in operations(window) if o.pending)
    return {
        "ops_completed": done,
        "ops_pending": pending,
        **tot,
        "instructions_per_op": _ratio(tot["instructions"], done),
        "pwb_per_op": _ratio(tot["pwb_total"], done),
        "load_pwbs_per_update": _ratio(tot["load_pwbs"], updates),
        "per_op": per,
    }


def _ratio(a: int, b: int) -> float:
    return round(a / b, 6) if b else 0.0


# -- running -------------------------------------------------------------------


@dataclass
class Report:
    config: dict
    status: str
    runs: int
    crashes: int
    measure_from_seq: int
    counts: dict
    counter_collisions: int
    verdicts: dict
    trace: str | None = None
    manifest: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(v["result"] != "violation" for v in self.verdicts.values())

    def __getitem__(self, key):
        return self.to_dict()[key]

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "status": self.status,
            "runs": self.runs,
            "crashes": self.crashes,
            "measure_from_seq": self.measure_from_seq,
            **{k: v for k, v in self.counts.items() if k != "per_op"},
            "per_op": self.counts["per_op"],
            "counter_collisions": self.counter_collisions,
            "verdicts": self.verdicts,
            "ok": self.ok,
            "trace": self.trace,
            "manifest": self.manifest,
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"


def _paths(out: str | Path | None):
    if out is None:
        return None, None, None
    out = Path(out)
    stem = out.name[: -len(out.suffix)] if out.suffix else out.name
    return out, out.with_name(stem + ".trace.jsonl"), out.with_name(stem + ".manifest.json")


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None) -> Report:
    """Run one configured experiment; with ``out`` write report, trace and
    run manifest next to each other."""
    if cfg.policy == "exh":
        world, res_trace, verdicts, runs, status = _run_exhaustive(cfg)
        adv, policy = AdversaryPlan(), parse_policy("exh")
        crashes = 0
    else:
        world, res_trace, verdicts, runs, status, adv, policy, crashes = _run_sampled(cfg)

    counts = account(res_trace, world.measure_from)
    report_path, trace_path, manifest_path = _paths(out)
    report = Report(
        config=cfg.to_dict(),
        status=status,
        runs=runs,
        crashes=crashes,
        measure_from_seq=world.measure_from,
        counts=counts,
        counter_collisions=world.pv.collisions - world.collisions_before,
        verdicts=verdicts,
        trace=str(trace_path) if trace_path else None,
        manifest=str(manifest_path) if manifest_path else None,
    )
    if report_path is not None:
        report_path.parent.mkdir(parents=True, exist_ok=True)
        trace_path.write_text(res_trace.to_jsonl())
        m = manifest(
            policy,
            adv,
            cfg.procs,
            cfg.budget,
            ds=cfg.ds,
            mode=cfg.mode,
            key_range=cfg.key_range,
            line_words=cfg.line_words,
            mutant=cfg.mutant,
            experiment_seed=cfg.seed,
            prefill=cfg.prefill,
        )
        manifest_path.write_text(manifest_json(m))
        report_path.write_text(report.to_json())
    return report


def _run_sampled(cfg: ExperimentConfig):
    verdicts: dict = {}
    runs = 1
    if cfg.crash == "random":
        probe = _World(cfg)
        n = probe.run()[0].steps
        crash_at = random.Random(f"crash:{cfg.seed}").randrange(n + 1)
        world = _World(cfg)
        res, adv, policy = world.run(crash_at)
        _merge(verdicts, run_checks(res.trace, cfg, world.ds.recover), "")
        return world, res.trace, verdicts, runs, res.status, adv, policy, len(res.snapshots)

    world = _World(cfg)
    res, adv, policy = world.run()
    _merge(verdicts, run_checks(res.trace, cfg, world.ds.recover), "")
    crashes = 0
    if cfg.crash == "sweep":
        for k in crash_points(res.steps, cfg.sweep_points, cfg.seed):
            w = _World(cfg)
            r, _, _ = w.run(k)
            runs += 1
            crashes += len(r.snapshots)
            _merge(verdicts, run_checks(r.trace, cfg, w.ds.recover), f"crash after step {k}")
    return world, res.trace, verdicts, runs, res.status, adv, policy, crashes


def _run_exhaustive(cfg: ExperimentConfig):
    holder = {}

    def setup():
        w = _World(cfg)
        holder.setdefault("first", w)
        holder["last"] = w
        return w.mem, w.workers()

    verdicts: dict = {}
    runs = 0
    shown = None
    status = "done"
    try:
        for il in enumerate_interleavings(setup, cfg.budget, max_branches=cfg.exh_max_branches):
            runs += 1
            v = run_checks(il.trace, cfg, holder["last"].ds.recover)
            bad = any(x["result"] == "violation" for x in v.values())
            if shown is None or (bad and not _has_violation(verdicts)):
                shown = (holder["last"], il.trace)
            _merge(verdicts, v, f"schedule {list(il.choices)}")
    except BoundExceeded:
        status = "budget"
    if runs >= cfg.exh_max_branches:
        status = "truncated"
    world, trace = shown if shown else (holder["first"], holder["first"].mem.trace)
    return world, trace, verdicts, runs, status


def _has_violation(verdicts: dict) -> bool:
    return any(v["result"] == "violation" for v in verdicts.values())


# -- sweeps --------------------------------------------------------------------

CSV_FIELDS = (
    "ds",
    "mode",
    "procs",
    "ops",
    "update_pct",
    "key_range",
    "seed",
    "policy",
    "crash",
    "line_words",
    "status",
    "ops_completed",
    "pwb_total",
    "pfence_total",
    "load_pwbs",
    "store_pwbs",
    "instructions",
    "instructions_per_op",
    "pwb_per_op",
    "load_pwbs_per_update",
    "counter_collisions",
    "verdict",
    "errors",
)
_REPORT_COLUMNS = CSV_FIELDS[10:-2]


def load_configs(path: str | Path) -> list[dict]:
    text = Path(path).read_text()
    if not text.strip():
        return []
    data = json.loads(text)
    if isinstance(data, dict):
        data = data.get("configs", [])
    if not isinstance(data, list):
        raise ConfigError("config file must hold a list of configs")
    return data


def sweep(rows: list[dict]) -> str:
    """One CSV row per config, in input order.  Failures go to ``errors``."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for raw in rows:
        row = {k: raw.get(k, "") for k in CSV_FIELDS}
        try:
            cfg = ExperimentConfig.from_dict(raw)
            row.update({k: v for k, v in cfg.to_dict().items() if k in CSV_FIELDS})
            rep = run_experiment(cfg).to_dict()
            for k in _REPORT_COLUMNS:
                row[k] = rep[k]
            row["verdict"] = "pass" if rep["ok"] else "violation"
        except Exception as exc:  # recorded, sweep continues
            row["errors"] = f"{type(exc).__name__}: {exc}"
        w.writerow(row)
    return buf.getvalue()
