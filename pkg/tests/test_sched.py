import json
from math import comb

import pytest

from flitsim.pmem import Memory
from flitsim.sched import (
    AdversaryPlan,
    BoundExceeded,
    Instr,
    Inv,
    RandomPolicy,
    ReplayError,
    Resp,
    RoundRobin,
    Scripted,
    count_interleavings,
    crash_points,
    enumerate_interleavings,
    manifest,
    manifest_json,
    parse_policy,
    replay,
    run,
)
from flitsim.trace import Trace, TraceError, operations


def straight(addr, n, base=0):
    def prog():
        for i in range(n):
            yield Instr("store", addr, (base + i,), pflag=False, shared=True)

    return prog()


def setup_for(*lengths):
    def setup():
        mem = Memory()
        mem.alloc(len(lengths) + 1)
        return mem, [straight(i + 1, n) for i, n in enumerate(lengths)]

    return setup


def test_solo_program_round_robin():
    mem = Memory()
    mem.alloc(2)
    res = run([straight(1, 3, 10)], RoundRobin(), memory=mem)
    assert res.status == "done" and res.steps == 3
    assert [(e.kind, e.value) for e in res.trace] == [("store", 10), ("store", 11), ("store", 12)]


def test_round_robin_alternates():
    mem = Memory()
    mem.alloc(3)
    res = run([straight(1, 2), straight(2, 2)], RoundRobin(), memory=mem)
    assert [e.pid for e in res.trace] == [0, 1, 0, 1]


def test_random_policy_is_deterministic():
    def once():
        mem = Memory()
        mem.alloc(3)
        return run([straight(1, 5), straight(2, 5)], RandomPolicy(42), memory=mem).trace.to_jsonl()

    assert once() == once()


@pytest.mark.parametrize("a,b", [(1, 1), (2, 2), (3, 2), (4, 3)])
def test_interleaving_count_is_binomial(a, b):
    assert count_interleavings(setup_for(a, b)) == comb(a + b, a)


def test_three_process_multinomial():
    assert count_interleavings(setup_for(2, 2, 1)) == 30  # 5!/(2!2!1!)


def test_one_process_one_interleaving():
    assert count_interleavings(setup_for(4)) == 1


def test_interleavings_are_distinct():
    seen = {tuple(e.pid for e in il.trace) for il in enumerate_interleavings(setup_for(2, 2))}
    assert len(seen) == 6


def test_crash_expansion_of_three_steps():
    crashed = list(enumerate_interleavings(setup_for(3), crash=True))
    assert len(crashed) == 4
    assert [len(c.choices) for c in crashed] == [0, 1, 2, 3]
    assert all(c.trace[-1].kind == "crash" for c in crashed)


def test_step_bound():
    with pytest.raises(BoundExceeded):
        list(enumerate_interleavings(setup_for(10, 10), max_steps=14))


def test_max_branches_limits_enumeration():
    assert sum(1 for _ in enumerate_interleavings(setup_for(3, 3), max_branches=5)) == 5


def test_inv_resp_markers():
    mem = Memory()
    mem.alloc(2)

    def prog():
        yield Inv("write", 4)
        yield Instr("store", 1, (4,), pflag=True, shared=True)
        yield Instr("pfence")
        yield Resp("write", None)
        yield Inv("noop", None)
        yield Resp("noop", 1)

    res = run([prog()], memory=mem)
    assert [e.kind for e in res.trace] == ["inv", "store", "pfence", "resp", "inv", "resp"]
    assert res.steps == 2
    ops = res.trace.history()
    assert [(o.name, o.ret) for o in ops] == [("write", None), ("noop", 1)]


def test_budget_reported_not_raised():
    mem = Memory()
    mem.alloc(2)

    def spin():
        while True:
            yield Instr("load", 1, pflag=False, shared=True)

    res = run([spin()], budget=50, memory=mem)
    assert res.status == "budget" and res.steps == 50


def test_crash_spawns_fresh_pids():
    mem = Memory()
    mem.alloc(3)
    seen = []

    def recovery(snap, m):
        seen.append(snap)
        return [straight(2, 1)]

    res = run([straight(1, 3), straight(2, 3)], RoundRobin(), AdversaryPlan(crash_at=2), mem, on_crash=recovery)
    kinds = [e.kind for e in res.trace]
    assert kinds.count("crash") == 1 and len(seen) == 1
    after = res.trace.events[kinds.index("crash") + 1 :]
    assert {e.pid for e in after} == {2}


def test_crash_without_hook_stops():
    mem = Memory()
    mem.alloc(2)
    res = run([straight(1, 5)], adversary=AdversaryPlan(crash_at=3), memory=mem)
    assert res.status == "crashed" and res.steps == 3


def test_scheduled_eviction():
    mem = Memory(adversary=True)
    mem.alloc(2)
    res = run([straight(1, 2, 5)], adversary=AdversaryPlan(evictions=((1, 1),)), memory=mem)
    assert [e.kind for e in res.trace] == ["store", "evict", "store"]
    assert mem.snapshot()[1] == 5


def test_scripted_policy():
    mem = Memory()
    mem.alloc(3)
    res = run([straight(1, 2), straight(2, 2)], Scripted((1, 1, 0, 0)), memory=mem)
    assert [e.pid for e in res.trace] == [1, 1, 0, 0]


def test_parse_policy():
    assert isinstance(parse_policy("rr"), RoundRobin)
    assert parse_policy("rand", 7) == RandomPolicy(7)
    with pytest.raises(ValueError):
        parse_policy("fifo")


def test_manifest_fields():
    m = manifest(RandomPolicy(3), AdversaryPlan(crash_at=5), 2, 100)
    assert {"policy", "seed", "adversary", "processes", "budget"} <= set(m)
    assert m["seed"] == 3
    assert json.loads(manifest_json(m)) == m


def test_crash_points_all_or_sampled():
    assert crash_points(3) == [0, 1, 2, 3]
    pts = crash_points(1000, k=64, seed=1)
    assert len(pts) == 64 and pts == sorted(set(pts)) and pts == crash_points(1000, k=64, seed=1)


# hand-simulated: store 7 to 1, pwb, store 8 to 1, pfence, cas 1: 8 -> 9, crash.
# the pwb captured 7, so the persistent image holds 7.
GOLDEN = """\
{"seq":1,"pid":0,"kind":"store","addr":1,"value":7,"pflag":true,"shared":true,"sid":1}
{"seq":2,"pid":0,"kind":"pwb","addr":1}
{"seq":3,"pid":0,"kind":"store","addr":1,"value":8,"pflag":true,"shared":true,"sid":3}
{"seq":4,"pid":0,"kind":"pfence"}
{"seq":5,"pid":1,"kind":"cas","addr":1,"value":9,"pflag":true,"shared":true,"sid":5}
{"seq":6,"pid":-1,"kind":"crash"}
"""


def test_replay_golden_trace():
    mem = replay(Trace.from_jsonl(GOLDEN))
    assert dict(mem.snapshot().values) == {1: 7}
    assert mem.load(0, 1) == 7


def test_replay_matches_run():
    def setup():
        mem = Memory()
        mem.alloc(3)
        return mem, [straight(1, 3), straight(2, 2)]

    mem, progs = setup()
    res = run(progs, RandomPolicy(5), memory=mem)
    again = replay(res.trace)
    assert again.volatile_snapshot() == mem.volatile_snapshot()
    assert again.snapshot() == mem.snapshot()


def test_tampered_cas_is_detected():
    lines = GOLDEN.splitlines()
    ev = json.loads(lines[4])
    del ev["sid"]  # claim the cas failed
    lines[4] = json.dumps(ev, separators=(",", ":"))
    with pytest.raises(ReplayError):
        replay(Trace.from_jsonl("\n".join(lines)))


def test_trace_rejects_gaps_and_unknown_kinds():
    with pytest.raises(TraceError):
        Trace.from_jsonl('{"seq":2,"pid":0,"kind":"pfence"}')
    with pytest.raises(TraceError):
        Trace.from_jsonl('{"seq":1,"pid":0,"kind":"flush"}')
    with pytest.raises(TraceError):
        Trace.from_jsonl("{not json")


def test_operations_pending_after_crash():
    t = Trace.from_jsonl(
        '{"seq":1,"pid":0,"kind":"inv","value":3,"op":"insert"}\n'
        '{"seq":2,"pid":-1,"kind":"crash"}\n'
        '{"seq":3,"pid":1,"kind":"inv","value":3,"op":"contains"}\n'
        '{"seq":4,"pid":1,"kind":"resp","value":0,"op":"contains"}\n'
    )
    ops = operations(t)
    assert ops[0].pending and not ops[1].pending and ops[1].ret == 0
