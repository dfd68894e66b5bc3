import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flitsim.pmem import FLAG_BIT, MASK64, CapacityError, Memory, MemoryFault, PersistentSnapshot
from flitsim.sched import replay
from flitsim.trace import Trace


@pytest.fixture
def mem():
    m = Memory()
    m.alloc(8)
    return m


def test_read_after_write_and_initial_value(mem):
    mem.store(0, 3, 7)
    assert mem.load(1, 3) == 7
    assert mem.load(0, 4) == 0


def test_unpersisted_store_lost_at_crash(mem):
    mem.store(0, 3, 7)
    mem.crash()
    assert mem.load(0, 3) == 0


def test_cas_semantics(mem):
    ok, obs, sid = mem.cas(0, 3, 0, 5)
    assert (ok, obs) == (True, 0) and sid is not None
    ok, obs, sid = mem.cas(0, 4, 1, 5)
    assert (ok, obs, sid) == (False, 0, None)
    assert mem.load(0, 4) == 0


def test_faa_counts_and_wraps(mem):
    assert mem.faa(0, 2, 1)[0] == 0
    assert mem.faa(0, 2, 1)[0] == 1
    mem.faa(0, 2, -3)
    assert mem.load(0, 2) == MASK64  # -1 as a word


def test_pwb_snapshots_at_flush_time(mem):
    mem.store(0, 1, 3)
    mem.pwb(0, 1)
    mem.store(0, 1, 4)
    mem.pfence(0)
    assert mem.snapshot()[1] == 3


def test_pwb_after_last_store(mem):
    mem.store(0, 1, 3)
    mem.store(0, 1, 4)
    mem.pwb(0, 1)
    mem.pfence(0)
    assert mem.snapshot()[1] == 4


def test_second_pwb_replaces_buffered_snapshot(mem):
    mem.store(0, 1, 3)
    mem.pwb(0, 1)
    mem.store(0, 1, 4)
    mem.pwb(0, 1)
    buf = mem.buffered_lines(0)
    assert len(buf) == 1
    assert buf[1][0][1] == 4


def test_pfence_is_per_process(mem):
    mem.pfence(0)
    assert mem.snapshot() == PersistentSnapshot({})
    mem.store(0, 1, 9)
    mem.pwb(0, 1)
    mem.pwb(1, 1)
    mem.pfence(0)
    assert mem.snapshot()[1] == 9
    assert mem.buffered_lines(0) == {}
    assert 1 in mem.buffered_lines(1)


def test_stale_snapshot_does_not_overwrite_newer_persisted_store(mem):
    mem.store(0, 1, 3)
    mem.pwb(0, 1)  # buffers 3
    mem.store(1, 1, 4)
    mem.pwb(1, 1)
    mem.pfence(1)  # 4 persisted
    mem.pfence(0)  # stale 3 must not win
    assert mem.snapshot()[1] == 4


def test_evict_persists_line():
    m = Memory(adversary=True)
    m.alloc(4)
    m.store(0, 1, 5)
    m.evict(m.line(1))
    m.store(0, 1, 6)
    m.crash()
    assert m.load(0, 1) == 5


def test_evict_untouched_line_and_disabled_adversary(mem):
    m = Memory(adversary=True)
    m.alloc(4)
    m.evict(2)
    assert m.snapshot() == PersistentSnapshot({})
    with pytest.raises(MemoryFault):
        mem.evict(1)


def test_crash_snapshots():
    m = Memory()
    m.alloc(4)
    assert m.crash() == PersistentSnapshot({})
    m.store(0, 1, 8)
    m.pwb(0, 1)
    m.pfence(0)
    m.store(0, 2, 9)
    assert m.snapshot()[1] == 8 and m.snapshot()[2] == 0
    assert m.load(0, 2) == 9  # snapshot keeps volatile state
    s1 = m.crash()
    s2 = m.crash()
    assert s1 == s2 and s1[1] == 8 and s1[2] == 0
    assert m.buffered_lines(0) == {}


def test_line_granularity():
    m = Memory(line_words=4)
    m.alloc(8)
    m.store(0, 4, 1)
    m.store(0, 5, 2)
    m.pwb(0, 6)  # same line as 4 and 5
    m.pfence(0)
    assert m.snapshot()[4] == 1 and m.snapshot()[5] == 2


def test_bounds():
    m = Memory(capacity=16)
    m.alloc(8)
    with pytest.raises(MemoryFault):
        m.load(0, 0)  # null
    with pytest.raises(MemoryFault):
        m.store(0, 9, 1)
    with pytest.raises(CapacityError):
        m.alloc(16)
    with pytest.raises(ValueError):
        Memory(line_words=0)


def test_flag_bit_is_top_bit():
    assert FLAG_BIT == 1 << 63


def test_trace_records_and_replays(mem):
    mem.store(0, 1, 3)
    mem.cas(1, 1, 3, 4)
    mem.pwb(1, 1)
    mem.pfence(1)
    mem.faa(0, 2, 5)
    mem.crash()
    text = mem.trace.to_jsonl()
    again = replay(Trace.from_jsonl(text))
    assert again.snapshot() == mem.snapshot()
    assert again.trace.to_jsonl() == text


ops = st.lists(
    st.tuples(
        st.sampled_from(["store", "pwb", "pfence", "crash", "faa", "cas"]),
        st.integers(0, 2),  # pid
        st.integers(1, 4),  # addr
        st.integers(0, 50),  # value
    ),
    max_size=60,
)


@settings(max_examples=200, deadline=None)
@given(ops, st.sampled_from([1, 2, 4]))
def test_persistence_invariants(script, line_words):
    m = Memory(line_words=line_words)
    m.alloc(5)
    last = {}
    for kind, pid, addr, value in script:
        if kind == "store":
            m.store(pid, addr, value)
        elif kind == "faa":
            m.faa(pid, addr, value)
        elif kind == "cas":
            m.cas(pid, addr, value % 3, value)
        elif kind == "pwb":
            m.pwb(pid, addr)
        elif kind == "pfence":
            m.pfence(pid)
            assert m.buffered_lines(pid) == {}
        else:
            a, b = m.crash(), m.crash()
            assert a == b
        for a in range(1, 5):
            v = m.persistent.get(a, 0)
            sid = m.persistent_sid.get(a, 0)
            # prefix property: a persisted value came from the write history
            assert sid == 0 and v == 0 or (sid, v, sid) in m.write_history[a]
            # monotone: never reverts to an older history entry
            assert sid >= last.get(a, 0)
            last[a] = sid
            hist = m.write_history.get(a)
            vol = m.volatile.get(a, 0)
            assert vol == m.persistent.get(a, 0) if kind == "crash" else True
            if hist and m.volatile_sid.get(a, 0) == hist[-1][0]:
                assert vol == hist[-1][1]
