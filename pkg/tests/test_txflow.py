import random

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from statebench.errors import HeightError, ProgramError, StaleHeight
from statebench.state import CompositeKey, UpdateBatch, Version, VersionedValue
from statebench.txflow import (
    Block,
    SimulationResult,
    TxFlag,
    commit_block,
    process_block,
    simulate,
    validate_block,
)

from oracles import OpsProgram, dump_state, random_program, sequential_oracle

K = CompositeKey(b"ns", b"k")
V, C = TxFlag.VALID, TxFlag.MVCC_CONFLICT


def seed(store, block, **values):
    b = UpdateBatch()
    for k, v in values.items():
        b.put(CompositeKey(b"ns", k), v, Version(block, 0))
    store.commit(b, Version(block, 0))


def test_simulate_read_absent_then_write(store):
    r = simulate(store.snapshot(), OpsProgram((("get", b"ns", b"k"), ("put", b"ns", b"k", b"v"))))
    assert r.read_set == {K: None}
    assert r.write_set == {K: b"v"}
    assert r.response == [None]


def test_simulate_reads_own_writes(store):
    r = simulate(store.snapshot(), OpsProgram((("put", b"ns", b"k", b"v"), ("get", b"ns", b"k"))))
    assert r.read_set == {}
    assert r.write_set == {K: b"v"}
    assert r.response == [b"v"]


def test_simulate_records_committed_version(store):
    b = UpdateBatch()
    b.put(K, b"v", Version(2, 1))
    store.commit(b, Version(2, 1))
    r = simulate(store.snapshot(), OpsProgram((("get", b"ns", b"k"),)))
    assert r.read_set == {K: Version(2, 1)}


def test_simulate_last_write_wins_and_delete(store):
    r = simulate(
        store.snapshot(),
        OpsProgram((("put", b"ns", b"k", b"1"), ("put", b"ns", b"k", b"2"), ("del", b"ns", b"j"), ("get", b"ns", b"j"))),
    )
    assert r.write_set == {K: b"2", CompositeKey(b"ns", b"j"): None}
    assert r.response == [None]


def test_simulate_does_not_modify_state(store):
    simulate(store.snapshot(), OpsProgram((("put", b"ns", b"k", b"v"),)))
    assert store.get(K) is None and store.savepoint() is None


def test_simulate_range_records_versions(store):
    seed(store, 1, a=b"1", b=b"2", c=b"3")
    prog = OpsProgram((("put", b"ns", b"b", b"mine"), ("put", b"ns", b"bb", b"new"), ("range", b"ns", b"a", b"c")))
    r = simulate(store.snapshot(), prog)
    assert r.response == [[(b"a", b"1"), (b"b", b"mine"), (b"bb", b"new")]]
    assert r.read_set == {CompositeKey(b"ns", b"a"): Version(1, 0)}


def test_simulate_wraps_program_errors(store):
    def boom(ctx):
        raise KeyError("nope")

    with pytest.raises(ProgramError):
        simulate(store.snapshot(), boom)


def test_validate_empty_block(store):
    res = validate_block(store, Block(1, []))
    assert res.flags == [] and len(res.batch) == 0


def test_validate_read_after_blind_write_conflicts(store):
    tx0 = SimulationResult(write_set={K: b"v"})
    tx1 = SimulationResult(read_set={K: None}, write_set={K: b"w"})
    res = validate_block(store, Block(1, [tx0, tx1]))
    assert res.flags == [V, C]
    assert res.batch.get(K) == VersionedValue(b"v", Version(1, 0))


def test_validate_two_blind_writes(store):
    tx0 = SimulationResult(write_set={K: b"first"})
    tx1 = SimulationResult(write_set={K: b"second"})
    res = validate_block(store, Block(4, [tx0, tx1]))
    assert res.flags == [V, V]
    assert res.batch.get(K) == VersionedValue(b"second", Version(4, 1))


def test_validate_stale_committed_version(store):
    seed(store, 1, k=b"v")
    stale = SimulationResult(read_set={K: Version(0, 3)}, write_set={K: b"x"})
    fresh = SimulationResult(read_set={K: Version(1, 0)})
    assert validate_block(store, Block(2, [stale, fresh])).flags == [C, V]


def test_invalid_tx_does_not_affect_later_reads(store):
    seed(store, 1, k=b"v")
    bad = SimulationResult(read_set={K: None}, write_set={K: b"x"})
    good = SimulationResult(read_set={K: Version(1, 0)}, write_set={K: b"y"})
    res = validate_block(store, Block(2, [bad, good]))
    assert res.flags == [C, V]
    assert res.batch.get(K) == VersionedValue(b"y", Version(2, 1))


def test_delete_then_absent_read_is_valid(store):
    seed(store, 1, k=b"v")
    deleter = SimulationResult(read_set={K: Version(1, 0)}, write_set={K: None})
    reader = SimulationResult(read_set={K: None})
    res = validate_block(store, Block(2, [deleter, reader]))
    assert res.flags == [V, V]
    assert K in res.batch and res.batch.get(K) is None


def test_validate_height_error(store):
    store.commit(UpdateBatch(), Version(3, 0))
    with pytest.raises(HeightError):
        validate_block(store, Block(3, []))


def test_commit_all_invalid_block(store):
    seed(store, 1, k=b"v")
    bad = SimulationResult(read_set={K: None}, write_set={K: b"x"})
    res = validate_block(store, Block(2, [bad, bad]))
    commit_block(store, res, 2)
    assert store.get(K) == VersionedValue(b"v", Version(1, 0))
    assert store.savepoint() == Version(2, 1)


def test_commit_stamps_block_and_tx(store):
    txs = [SimulationResult() for _ in range(3)] + [SimulationResult(write_set={K: b"v"})]
    res = validate_block(store, Block(7, txs))
    commit_block(store, res, 7)
    assert store.get(K) == VersionedValue(b"v", Version(7, 3))
    assert store.savepoint() == Version(7, 3)


def test_commit_rejects_mismatched_height(store):
    res = validate_block(store, Block(2, []))
    with pytest.raises(StaleHeight):
        commit_block(store, res, 3)
    commit_block(store, res, 2)
    with pytest.raises(StaleHeight):
        commit_block(store, res, 2)


def test_process_blind_writes_distinct_keys(store):
    p1 = OpsProgram((("put", b"ns", b"a", b"1"),))
    p2 = OpsProgram((("put", b"ns", b"b", b"2"),))
    res = process_block(store, [p1, p2], 1)
    assert res.flags == [V, V]
    assert store.get(CompositeKey(b"ns", b"a")).value == b"1"
    assert store.get(CompositeKey(b"ns", b"b")).version == Version(1, 1)


def increment(ctx):
    raw = ctx.get(b"ns", b"counter")
    ctx.put(b"ns", b"counter", b"%d" % (int(raw or b"0") + 1))


def test_process_lost_update_detected(store):
    res = process_block(store, [increment, increment], 1)
    assert res.flags == [V, C]
    assert store.get(CompositeKey(b"ns", b"counter")).value == b"1"
    res = process_block(store, [increment], 2)
    assert res.flags == [V]
    assert store.get(CompositeKey(b"ns", b"counter")).value == b"2"


def test_process_zero_programs(store):
    res = process_block(store, [], 1)
    assert res.flags == []
    assert store.savepoint() == Version(1, 0)


def test_process_block_height(store):
    process_block(store, [], 5)
    with pytest.raises(HeightError):
        process_block(store, [], 5)


def test_blocks_match_sequential_oracle(store):
    rng = random.Random(2024)
    expected = {}
    for block_num in range(1, 40):
        programs = [random_program(rng) for _ in range(rng.randint(0, 12))]
        view = store.snapshot()
        results = [simulate(view, p) for p in programs]
        accepted, expected = sequential_oracle(dump_state(store), block_num, results)
        res = validate_block(store, Block(block_num, results))
        assert [f is V for f in res.flags] == accepted
        commit_block(store, res, block_num)
        assert dump_state(store) == expected


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.integers(0, 2**32), st.integers(0, 15))
def test_blind_writes_always_valid(store, seed_, n):
    rng = random.Random(seed_)
    results = [SimulationResult(write_set={CompositeKey(b"ns", rng.choice([b"a", b"b"])): b"x"}) for _ in range(n)]
    block_num = (store.savepoint().block_num + 1) if store.savepoint() else 1
    assert validate_block(store, Block(block_num, results)).flags == [V] * n


@settings(max_examples=30, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.integers(0, 2**32))
def test_validation_is_deterministic(store, seed_):
    rng = random.Random(seed_)
    view = store.snapshot()
    results = [simulate(view, random_program(rng)) for _ in range(rng.randint(0, 15))]
    block_num = (store.savepoint().block_num + 1) if store.savepoint() else 1
    a = validate_block(store, Block(block_num, results))
    b = validate_block(store, Block(block_num, results))
    assert a.flags == b.flags and a.batch == b.batch
    commit_block(store, a, block_num)


def test_backends_agree_on_flags_and_state(make_provider):
    from conftest import BACKENDS

    stores = [make_provider(name).open("ledger", sync=False) for name in BACKENDS]
    rng = random.Random(99)
    for block_num in range(1, 30):
        programs = [random_program(rng) for _ in range(rng.randint(1, 10))]
        outcomes = [process_block(s, programs, block_num) for s in stores]
        assert all(o.flags == outcomes[0].flags for o in outcomes)
        states = [dump_state(s) for s in stores]
        assert all(st_ == states[0] for st_ in states)
