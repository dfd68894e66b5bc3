import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flitsim.checker import PersistTracker, check_condition1, check_conditions234, check_linearizable
from flitsim.pmem import FLAG_BIT, Memory
from flitsim.pvlib import (
    CounterMap,
    ModeError,
    OperationError,
    PrivacyViolation,
    PvMemory,
    PvMode,
    UnsupportedPrimitive,
    splitmix64,
)
from flitsim.sched import RandomPolicy, RoundRobin, Scripted, run
from flitsim.structures import DurableList, client

MODES = ["plain", "flit-adj", "flit-ht:64", "flit-ht:16:packed", "lap"]


def pv_for(mode, **kw):
    mem = Memory(**kw)
    return mem, PvMemory(mem, mode)


def solo(mem, gen):
    return run([gen], RoundRobin(), memory=mem)


def kinds(trace, pid=0):
    return [e.kind for e in trace if e.pid == pid and e.kind not in ("inv", "resp")]


def test_mode_grammar_round_trips():
    for text in MODES:
        assert str(PvMode.parse(text)) == text
    for bad in ["flit", "flit-ht", "flit-ht:x", "flit-ht:4:dense", "flit-ht:0", "lapx"]:
        with pytest.raises(ValueError):
            PvMode.parse(bad)


def test_shared_pstore_event_order():
    mem, pv = pv_for("flit-adj")
    x = pv.alloc(1)[0]
    solo(mem, pv.store(0, x, "write", (5,)))
    assert kinds(mem.trace) == ["pfence", "faa", "store", "pwb", "pfence", "faa"]
    faas = [e for e in mem.trace if e.kind == "faa"]
    assert [e.addr for e in faas] == [x + 1, x + 1] and all(e.op == "counter" for e in faas)
    assert mem.load(0, x + 1) == 0


def test_shared_vstore_has_no_counter_traffic():
    mem, pv = pv_for("flit-adj")
    x = pv.alloc(1)[0]
    solo(mem, pv.store(0, x, "write", (5,), pflag=False))
    assert kinds(mem.trace) == ["pfence", "store"]


def test_private_pstore():
    mem, pv = pv_for("flit-ht:8")
    x = pv.alloc(1)[0]
    solo(mem, pv.store(0, x, "write", (5,), shared=False))
    assert kinds(mem.trace) == ["store", "pwb", "pfence"]
    assert mem.snapshot()[x] == 5


def test_untagged_pload_issues_no_pwb():
    mem, pv = pv_for("flit-adj")
    x = pv.alloc(1)[0]
    solo(mem, pv.load(0, x))
    assert kinds(mem.trace) == ["load", "load"]  # data, then counter


def test_plain_pload_always_flushes():
    mem, pv = pv_for("plain")
    x = pv.alloc(1)[0]
    solo(mem, pv.load(0, x))
    assert kinds(mem.trace) == ["load", "pwb"]


def _writer_reader(mode, reader_after_writer_steps):
    mem, pv = pv_for(mode)
    x = pv.alloc(1)[0]
    got = {}

    def writer():
        pv.begin_op(0)
        yield from pv.store(0, x, "write", (9,))
        yield from pv.complete_op(0)

    def reader():
        pv.begin_op(1)
        got["v"] = yield from pv.load(1, x)
        yield from pv.complete_op(1)

    # writer runs k instructions, then the reader runs to completion
    k = reader_after_writer_steps
    choices = (0,) * k + (1,) * 4 + (0,) * 10
    run([writer(), reader()], Scripted(choices), memory=mem)
    return mem, x, got["v"]


def test_tagged_pload_flushes_and_completeop_persists():
    # pfence, faa(+1), store: the writer pauses holding the counter at 1
    mem, x, v = _writer_reader("flit-adj", 3)
    assert v == 9
    reader = [e for e in mem.trace if e.pid == 1]
    assert [e.kind for e in reader] == ["load", "load", "pwb", "pfence"]
    assert reader[1].value == 1 and reader[2].op == "load"
    # the reader's pfence persisted the writer's value before the writer's own
    fence = reader[3].seq
    t = PersistTracker()
    for e in mem.trace.events[:fence]:
        t.apply(e)
    assert t.snapshot()[x] == 9


def test_counter_mapping_examples():
    mem, pv = pv_for("flit-adj")
    f = pv.alloc(3)
    assert all(a % 2 == 0 for a in f)
    assert [pv.counter_of(a) for a in f] == [(a + 1, None) for a in f]

    mem, pv = pv_for("flit-ht:1")
    region = pv.counters.region
    assert len(region) == 1
    assert {pv.counter_of(a) for a in range(1, 200)} == {(region.start, None)}

    mem, pv = pv_for("flit-ht:16:packed")
    region = pv.counters.region
    assert len(region) == 2
    for a in range(1, 100):
        s = splitmix64(a) % 16
        assert pv.counter_of(a) == (region.start + s // 8, s % 8)


def test_splitmix64_reference_values():
    # first outputs of the splitmix64 generator seeded with 0
    assert splitmix64(0) == 0xE220A8397B1DCDAF
    assert splitmix64(0x9E3779B97F4A7C15) == 0x6E789E6AA1B965F4


def test_packed_lanes_do_not_interfere():
    assert CounterMap.read(CounterMap.delta(3, 1) + CounterMap.delta(2, 5), 3) == 1
    assert CounterMap.read(CounterMap.delta(3, 1) + CounterMap.delta(2, 5), 2) == 5
    assert CounterMap.read((1 << 64) - 1, None) == -1


def test_lap_requires_cas_for_pstores():
    mem, pv = pv_for("lap")
    x = pv.alloc(1)[0]
    with pytest.raises(UnsupportedPrimitive):
        solo(mem, pv.store(0, x, "write", (1,)))


def test_lap_flags_then_clears():
    mem, pv = pv_for("lap")
    x = pv.alloc(1)[0]
    box = {}

    def prog():
        box["r"] = yield from pv.store(0, x, "cas", (0, 6))

    solo(mem, prog())
    assert box["r"] == (True, 0)
    cas = [e for e in mem.trace if e.kind == "cas"]
    assert cas[0].value == 6 | FLAG_BIT and cas[1].value == 6 and cas[1].op == "flag"
    assert mem.load(0, x) == 6 and mem.snapshot()[x] == 6 | FLAG_BIT


def test_lap_load_flushes_flagged_value_and_masks_it():
    mem, pv = pv_for("lap")
    x = pv.alloc(1)[0]
    mem.store(0, x, 4 | FLAG_BIT)
    box = {}

    def prog():
        box["v"] = yield from pv.load(1, x)

    solo(mem, prog())
    assert box["v"] == 4
    assert [e.kind for e in mem.trace.events[1:]] == ["load", "pwb"]


def test_lap_rejects_top_bit_values():
    mem, pv = pv_for("lap")
    x = pv.alloc(1)[0]
    with pytest.raises(ModeError):
        solo(mem, pv.store(0, x, "cas", (0, FLAG_BIT)))
    with pytest.raises(ModeError):
        pv.require_flag_bit_free(True)


def test_operation_boundaries():
    mem, pv = pv_for("flit-adj")
    pv.begin_op(0)
    with pytest.raises(OperationError):
        pv.begin_op(0)
    solo(mem, pv.complete_op(0))
    assert kinds(mem.trace) == ["pfence"]
    with pytest.raises(OperationError):
        next(pv.complete_op(0))


def test_counter_of_needs_flit_mode():
    mem, pv = pv_for("plain")
    with pytest.raises(ModeError):
        pv.counter_of(1)


def test_debug_privacy_check():
    mem = Memory()
    pv = PvMemory(mem, "flit-adj", debug_private=True)
    x = pv.alloc(1)[0]
    run([pv.load(0, x)], memory=mem)
    with pytest.raises(PrivacyViolation):
        run([pv.store(1, x, "write", (1,), shared=False)], memory=mem)


def test_reset_counters_zeroes_stale_cells():
    mem, pv = pv_for("flit-ht:4")
    x = pv.alloc(1)[0]
    gen = pv.store(0, x, "write", (1,))
    # stop after the increment (pfence, faa), as a dead process would
    assert run([gen], budget=2, memory=mem).status == "budget"
    caddr, _ = pv.counter_of(x)
    assert mem.load(0, caddr) == 1
    pv.reset_counters()
    assert mem.load(0, caddr) == 0


def _random_list_run(mode, seed, procs=3, n=6, keys=6):
    mem = Memory()
    pv = PvMemory(mem, mode)
    ds = DurableList(pv, key_range=keys)
    rng = random.Random(seed)
    progs = [
        client(ds, p, [(rng.choice(["insert", "delete", "contains"]), rng.randrange(keys)) for _ in range(n)])
        for p in range(procs)
    ]
    return run(progs, RandomPolicy(seed), memory=mem), pv


@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("seed", range(5))
def test_every_mode_is_correct_without_crashes(mode, seed):
    res, _ = _random_list_run(mode, seed)
    assert check_condition1(res.trace).ok
    assert check_conditions234(res.trace).ok
    assert check_linearizable(res.trace, max_ops=18).ok


def test_modes_agree_on_sequential_results():
    ops = [("insert", 3), ("insert", 1), ("contains", 3), ("delete", 3), ("contains", 3), ("insert", 1)]
    results = set()
    for mode in MODES:
        mem = Memory()
        ds = DurableList(PvMemory(mem, mode))
        res = run([client(ds, 0, ops)], memory=mem)
        results.add(tuple(o.ret for o in res.trace.history()))
    assert results == {(1, 1, 1, 1, 0, 0)}


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["flit-adj", "flit-ht:4", "flit-ht:8:packed"]))
def test_skipped_flush_only_when_already_persisted(seed, mode):
    res, pv = _random_list_run(mode, seed, procs=3, n=4)
    packed = mode.endswith(":packed")
    t = PersistTracker()
    last_pstore = {}
    pending_load = {}
    for ev in res.trace:
        if ev.kind == "load" and ev.op is None and ev.pflag and ev.shared:
            pending_load[ev.pid] = ev.addr
        elif ev.kind == "load" and ev.op == "counter":
            addr = pending_load.pop(ev.pid)
            _, lane = pv.counter_of(addr)
            if CounterMap.read(ev.value, lane if packed else None) == 0 and addr in last_pstore:
                assert t.persisted(addr, last_pstore[addr]), f"seq {ev.seq}"
        if ev.sid is not None and ev.pflag:
            last_pstore[ev.addr] = ev.sid
        t.apply(ev)


@pytest.mark.parametrize("mode", ["flit-adj", "flit-ht:1", "flit-ht:4:packed"])
def test_counters_bounded_and_balanced(mode):
    for seed in range(10):
        res, pv = _random_list_run(mode, seed, procs=4)
        assert 0 <= pv.counter_min and pv.counter_max <= 4
        for caddr in pv.counters.addresses():
            assert res.memory.volatile.get(caddr, 0) == 0
