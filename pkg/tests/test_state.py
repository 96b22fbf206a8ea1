import random
import threading

import pytest
from hypothesis import given
from hypothesis import strategies as st

from statebench.errors import InvalidNamespace, MalformedValue, StaleHeight, StoreClosed
from statebench.state import (
    SAVEPOINT_KEY,
    CompositeKey,
    UpdateBatch,
    Version,
    VersionedValue,
    decode_data_key,
    decode_versioned_value,
    encode_data_key,
    encode_version,
    encode_versioned_value,
)

u64 = st.integers(min_value=0, max_value=2**64 - 1)
versions = st.builds(Version, u64, u64)
namespaces = st.binary(max_size=12).filter(lambda b: b"\x00" not in b)


def test_encode_version_zero():
    assert encode_version(Version(0, 0)) == bytes(16)


def test_encode_version_layout():
    assert encode_version(Version(1, 2)) == bytes.fromhex("00000000000000010000000000000002")


def test_version_rejects_out_of_range():
    with pytest.raises(ValueError):
        Version(-1, 0)
    with pytest.raises(ValueError):
        Version(0, 2**64)


def test_version_order_is_lexicographic():
    assert Version(1, 9) < Version(2, 0)
    assert Version(2, 0) < Version(2, 1)
    assert not Version(3, 3) < Version(3, 3)


def test_version_encoding_order_random_pairs():
    rng = random.Random(7)
    vs = [Version(rng.choice([0, 1, 2**32, 2**64 - 1, rng.getrandbits(64)]), rng.getrandbits(rng.choice([1, 8, 64])))
          for _ in range(10_000)]
    for a, b in zip(vs, vs[1:]):
        # tuple comparison is the oracle, independent of the dataclass ordering
        ta, tb = (a.block_num, a.tx_num), (b.block_num, b.tx_num)
        assert (ta < tb) == (encode_version(a) < encode_version(b))
        assert (ta == tb) == (encode_version(a) == encode_version(b))
    assert sorted(vs, key=encode_version) == sorted(vs, key=lambda v: (v.block_num, v.tx_num))


@given(versions, versions)
def test_version_order_property(a, b):
    assert (a < b) == (encode_version(a) < encode_version(b))


def test_versioned_value_empty():
    assert encode_versioned_value(VersionedValue(b"", Version(0, 0))) == bytes(16)
    assert decode_versioned_value(bytes(16)) == VersionedValue(b"", Version(0, 0))


def test_versioned_value_layout():
    raw = encode_versioned_value(VersionedValue(b"\xab", Version(1, 2)))
    assert raw == encode_version(Version(1, 2)) + b"\xab"
    assert len(raw) == 17


def test_decode_short_value_is_malformed():
    with pytest.raises(MalformedValue):
        decode_versioned_value(bytes(15))


@given(st.binary(max_size=300), versions)
def test_versioned_value_roundtrip(value, version):
    vv = VersionedValue(value, version)
    raw = encode_versioned_value(vv)
    assert len(raw) == 16 + len(value)
    assert decode_versioned_value(raw) == vv


def test_data_key_layout():
    assert encode_data_key(CompositeKey(b"", b"")) == bytes([0x64, 0x00])
    assert encode_data_key(CompositeKey(b"ns", b"k")) == bytes([0x64, ord("n"), ord("s"), 0x00, ord("k")])


def test_str_parts_are_utf8():
    assert CompositeKey("ns", "k") == CompositeKey(b"ns", b"k")


def test_namespace_with_separator_rejected():
    with pytest.raises(InvalidNamespace):
        CompositeKey(b"a\x00b", b"k")


def test_data_keys_never_collide_with_savepoint():
    assert not encode_data_key(CompositeKey(b"", b"savepoint")).startswith(b"s")
    assert SAVEPOINT_KEY[:1] == b"s"


@given(namespaces, st.binary(max_size=20))
def test_data_key_roundtrip(ns, key):
    ck = CompositeKey(ns, key)
    assert decode_data_key(encode_data_key(ck)) == ck


@given(namespaces, namespaces, st.binary(max_size=8), st.binary(max_size=8))
def test_namespace_isolation(n1, n2, k1, k2):
    if n1 != n2:
        assert encode_data_key(CompositeKey(n1, k1)) != encode_data_key(CompositeKey(n2, k2))


def test_update_batch_last_insert_wins():
    b = UpdateBatch()
    ck = CompositeKey(b"ns", b"a")
    b.put(ck, b"1", Version(1, 0))
    b.put(CompositeKey(b"ns", b"b"), b"2", Version(1, 0))
    b.delete(ck)
    assert len(b) == 2
    assert b.get(ck) is None and ck in b
    assert [c.key for c, _ in b] == [b"a", b"b"]


# -- store operations, on every backend ------------------------------------------


def test_fresh_store_is_empty(store):
    assert store.get(CompositeKey(b"ns", b"k")) is None
    assert store.savepoint() is None
    assert list(store.range(b"ns")) == []


def test_commit_then_get(store):
    b = UpdateBatch()
    b.put(CompositeKey(b"ns", b"k"), b"v", Version(1, 0))
    store.commit(b, Version(1, 0))
    assert store.get(CompositeKey(b"ns", b"k")) == VersionedValue(b"v", Version(1, 0))
    assert store.savepoint() == Version(1, 0)


def test_delete_makes_absent(store):
    ck = CompositeKey(b"ns", b"k")
    b = UpdateBatch()
    b.put(ck, b"v", Version(1, 0))
    store.commit(b, Version(1, 0))
    b = UpdateBatch()
    b.delete(ck)
    store.commit(b, Version(2, 0))
    assert store.get(ck) is None


def test_empty_value_is_not_absence(store):
    ck = CompositeKey(b"ns", b"k")
    b = UpdateBatch()
    b.put(ck, b"", Version(1, 0))
    store.commit(b, Version(1, 0))
    assert store.get(ck) == VersionedValue(b"", Version(1, 0))


def test_empty_batch_moves_savepoint(store):
    store.commit(UpdateBatch(), Version(1, 0))
    assert store.savepoint() == Version(1, 0)
    assert list(store.range(b"ns")) == []


def test_stale_height(store):
    store.commit(UpdateBatch(), Version(1, 0))
    with pytest.raises(StaleHeight):
        store.commit(UpdateBatch(), Version(1, 0))
    with pytest.raises(StaleHeight):
        store.commit(UpdateBatch(), Version(0, 5))
    store.commit(UpdateBatch(), Version(1, 1))
    assert store.savepoint() == Version(1, 1)


def test_range_examples(store):
    b = UpdateBatch()
    for k in (b"a", b"b", b"c"):
        b.put(CompositeKey(b"ns1", k), k * 2, Version(1, 0))
    b.put(CompositeKey(b"ns2", b"a"), b"other", Version(1, 0))
    b.put(CompositeKey(b"ns", b"z"), b"prefix-neighbour", Version(1, 0))
    store.commit(b, Version(1, 0))
    assert [k for k, _ in store.range(b"ns1", b"a", b"c")] == [b"a", b"b"]
    assert [(k, vv.value) for k, vv in store.range(b"ns2")] == [(b"a", b"other")]
    assert [k for k, _ in store.range(b"ns1", b"b")] == [b"b", b"c"]
    assert [k for k, _ in store.range(b"ns")] == [b"z"]


def test_range_matches_sort_filter_oracle(store):
    rng = random.Random(3)
    model = {}
    for block in range(1, 30):
        b = UpdateBatch()
        for _ in range(rng.randint(0, 8)):
            ck = CompositeKey(rng.choice([b"x", b"y"]), bytes(rng.choice(b"\x00\x01ab\xff") for _ in range(rng.randint(0, 3))))
            if rng.random() < 0.25:
                b.delete(ck)
                model.pop(ck, None)
            else:
                v = rng.randbytes(rng.randint(0, 40))
                b.put(ck, v, Version(block, 0))
                model[ck] = v
        store.commit(b, Version(block, 0))
    for _ in range(200):
        ns = rng.choice([b"x", b"y"])
        lo, hi = sorted(bytes(rng.choice(b"\x00\x01ab\xff") for _ in range(rng.randint(0, 2))) for _ in range(2))
        expect = sorted((ck.key, v) for ck, v in model.items() if ck.namespace == ns and lo <= ck.key < hi)
        assert [(k, vv.value) for k, vv in store.range(ns, lo, hi)] == expect


def test_snapshot_is_stable(store):
    ck = CompositeKey(b"ns", b"k")
    b = UpdateBatch()
    b.put(ck, b"old", Version(1, 0))
    store.commit(b, Version(1, 0))
    view = store.snapshot()
    b = UpdateBatch()
    b.put(ck, b"new", Version(2, 0))
    b.put(CompositeKey(b"ns", b"k2"), b"x", Version(2, 0))
    store.commit(b, Version(2, 0))
    assert view.get(ck).value == b"old"
    assert [k for k, _ in view.range(b"ns")] == [b"k"]
    assert store.get(ck).value == b"new"


def test_closed_store_raises(store):
    store.close()
    with pytest.raises(StoreClosed):
        store.get(CompositeKey(b"ns", b"k"))
    with pytest.raises(StoreClosed):
        store.savepoint()
    with pytest.raises(StoreClosed):
        store.commit(UpdateBatch(), Version(1, 0))


def test_savepoint_survives_reopen(make_provider, durable_backend):
    provider = make_provider(durable_backend)
    s = provider.open("ledger")
    s.commit(UpdateBatch(), Version(5, 0))
    s.close()
    s = provider.open("ledger")
    assert s.savepoint() == Version(5, 0)
    s.close()


def test_savepoints_strictly_increase(store):
    seen = []
    rng = random.Random(11)
    height = Version(0, 0)
    for _ in range(50):
        height = Version(height.block_num + rng.randint(0, 2), height.tx_num + 1) if rng.random() < 0.5 else Version(height.block_num + 1, 0)
        store.commit(UpdateBatch(), height)
        seen.append(store.savepoint())
    assert all(a < b for a, b in zip(seen, seen[1:]))


def test_reader_never_sees_torn_batch(store):
    keys = [CompositeKey(b"ns", b"k%03d" % i) for i in range(200)]
    stop = threading.Event()
    torn = []

    def reader():
        while not stop.is_set():
            view = store.snapshot()
            versions = {vv.version for _, vv in view.range(b"ns")}
            if len(versions) > 1:
                torn.append(versions)

    t = threading.Thread(target=reader)
    t.start()
    try:
        for block in range(1, 40):
            b = UpdateBatch()
            for ck in keys:
                b.put(ck, b"%d" % block, Version(block, 0))
            store.commit(b, Version(block, 0))
    finally:
        stop.set()
        t.join()
    assert torn == []
