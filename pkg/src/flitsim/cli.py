"""Command line entry point: ``flitsim run|sweep|mutate|check``.

Exit status is 0 on success, 1 when a check reports a violation (or a
mutant escapes), and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checker import (
    SetSpec,
    Verdict,
    check_condition1,
    check_conditions234,
    check_counters,
    check_durable_linearizable,
    check_linearizable,
)
from .experiment import CHECKS, ConfigError, ExperimentConfig, load_configs, run_experiment, sweep
from .pmem import Memory
from .pvlib import MUTANTS, PvMemory, PvMode
from .smallmodel import mutation_campaign, verdict_of_campaign
from .structures import make_set
from .trace import Trace, TraceError

SPECS = {"set": SetSpec}


def _write(path: str, text: str) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text)


def cmd_run(args) -> int:
    cfg = ExperimentConfig(
        ds=args.ds,
        mode=args.mode,
        procs=args.procs,
        ops=args.ops,
        update_pct=args.updates,
        key_range=args.keys,
        seed=args.seed,
        policy=args.policy,
        crash=args.crash,
        line_words=args.line_words,
        checks=tuple(c for c in args.check.split(",") if c),
        evict_rate=args.evict_rate,
        mutant=args.mutant,
    )
    report = run_experiment(cfg, args.out)
    d = report.to_dict()
    print(
        f"{cfg.mode} {cfg.ds}: {d['ops_completed']} ops, pwb {d['pwb_total']} "
        f"(load {d['load_pwbs']}, store {d['store_pwbs']}), pfence {d['pfence_total']}, "
        f"{'ok' if report.ok else 'VIOLATION'}"
    )
    return 0 if report.ok else 1


def cmd_sweep(args) -> int:
    rows = load_configs(args.configs)
    text = sweep(rows)
    _write(args.out, text)
    print(f"{len(rows)} configs -> {args.out}")
    return 0


def cmd_mutate(args) -> int:
    summary = mutation_campaign(args.id, args.mode)
    out = {**verdict_of_campaign(summary).to_dict(), "summary": summary}
    _write(args.out, json.dumps(out, indent=2) + "\n")
    if args.id == "none":
        ok = not summary["caught"]
        print(f"control: {'passes' if ok else 'FAILS'}")
    else:
        ok = summary["caught"]
        print(f"{args.id}: {'caught by ' + ', '.join(summary['caught_by']) if ok else 'NOT caught'}")
    return 0 if ok else 1


def check_trace(trace: Trace, spec, manifest: dict | None = None) -> dict:
    """Run every applicable checker on a recorded trace.

    Without a manifest only the trace-local checks run (and ``lin`` if the
    trace is crash-free).  A manifest naming ``ds``/``mode`` enables the
    counter bound and durable linearizability, whose recovery needs the
    structure's layout, rebuilt here deterministically.
    """
    m = manifest or {}
    lw = int(m.get("line_words", 1))
    checks: dict[str, Verdict] = {
        "cond1": check_condition1(trace, lw),
        "cond234": check_conditions234(trace, lw),
    }
    mode = m.get("mode")
    if mode and PvMode.parse(mode).is_flit:
        checks["counters"] = check_counters(trace, int(m.get("processes", 1)), packed=mode.endswith(":packed"), line_words=lw)
    crashed = any(ev.kind == "crash" for ev in trace)
    n_ops = len(trace.history())
    if not crashed:
        checks["lin"] = check_linearizable(trace, spec, max_ops=max(n_ops, 1))
    elif mode and m.get("ds"):
        mem = Memory(line_words=lw)
        ds = make_set(PvMemory(mem, mode), m["ds"], m.get("key_range"))
        checks["dlin"] = check_durable_linearizable(trace, spec, ds.recover, line_words=lw, max_ops=max(n_ops, 1))
    first = next((v for v in checks.values() if not v.ok), Verdict(message="all checks pass"))
    return {**first.to_dict(), "checks": {k: v.to_dict() for k, v in checks.items()}}


def cmd_check(args) -> int:
    trace = Trace.from_jsonl(Path(args.trace).read_text())
    manifest = json.loads(Path(args.manifest).read_text()) if args.manifest else None
    out = check_trace(trace, SPECS[args.spec], manifest)
    _write(args.out, json.dumps(out, indent=2) + "\n")
    print(f"{out['result']}: {out['message']}")
    return 0 if out["result"] == "pass" else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flitsim", description="P-V persistence simulator and FliT checker")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("--ds", default="list", help="list | ht:<buckets>")
    r.add_argument("--mode", default="flit-adj", help="plain | flit-adj | flit-ht:<slots>[:packed] | lap")
    r.add_argument("--procs", type=int, default=2)
    r.add_argument("--ops", type=int, default=20, help="total operations over all processes")
    r.add_argument("--updates", type=int, default=50, help="update percentage")
    r.add_argument("--keys", type=int, default=16, help="key range")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--policy", choices=("rr", "rand", "exh"), default="rand")
    r.add_argument("--crash", choices=("none", "random", "sweep"), default="none")
    r.add_argument("--line-words", type=int, default=1)
    r.add_argument("--check", default="", help=f"comma list of {','.join(CHECKS)}")
    r.add_argument("--evict-rate", type=float, default=0.0)
    r.add_argument("--mutant", choices=MUTANTS, default="none")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run a list of configs into a CSV")
    s.add_argument("--configs", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    m = sub.add_parser("mutate", help="run the mutation campaign for one mutant")
    m.add_argument("--id", required=True, choices=MUTANTS)
    m.add_argument("--mode", default="flit-adj")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_mutate)

    c = sub.add_parser("check", help="check a recorded trace")
    c.add_argument("--trace", required=True)
    c.add_argument("--spec", choices=sorted(SPECS), default="set")
    c.add_argument("--manifest")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_check)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, TraceError, ValueError) as exc:
        print(f"flitsim: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
