import random

import pytest
from hypothesis import given, settings, strategies as st

from p2posn.crypto import make_provider
from p2posn.dds import Dds, DdsError, Pht, bucket_of, bucket_span, probe_bound
from p2posn.secure_items import PUBLIC, seal
from p2posn.storage import LocalDht, NotFound, StorageRejected, run_sync


def entry(prov, kp, text: bytes) -> bytes:
    """List entries are items signed by whoever writes them."""
    return seal(text, [PUBLIC], kp, kp.public_key, prov, lambda p: None).encode()


def setup(policy="owner", appenders=()):
    prov = make_provider("double", 0)
    dht = LocalDht(prov)
    owner = prov.new_keypair()
    d = Dds(dht.client(owner), owner, prov, s=4)
    run_sync(d.create("L", policy=policy, appenders=appenders))
    return prov, dht, owner, d


def test_bucket_layout():
    assert [bucket_of(i, 4) for i in range(9)] == [1, 1, 1, 1, 2, 2, 2, 2, 3]
    assert bucket_span(2, 4) == (4, 7)


def test_list_matches_python_list_model():
    rng = random.Random(5)
    prov, dht, owner, d = setup()
    model = {}
    next_idx = 0
    for _ in range(80):
        op = rng.random()
        if op < 0.6:
            e = entry(prov, owner, rng.randbytes(6))
            assert run_sync(d.append("L", e)) == next_idx
            model[next_idx] = e
            next_idx += 1
        elif op < 0.8 and model:
            idx = rng.choice(sorted(model))
            run_sync(d.remove("L", idx))
            del model[idx]
        elif model:
            idx = rng.choice(sorted(model))
            assert run_sync(d.get("L", idx, fresh=True)) == model[idx]
        assert run_sync(d.entries("L", fresh=True)) == sorted(model.items())
    assert run_sync(d.length("L")) == next_idx


def test_get_is_a_single_bucket_fetch():
    prov, dht, owner, d = setup()
    es = [entry(prov, owner, bytes([i])) for i in range(20)]
    for e in es:
        run_sync(d.append("L", e))
    before = dht.gets
    assert run_sync(d.get("L", 13, fresh=True)) == es[13]
    assert dht.gets - before == 1
    with pytest.raises(NotFound):
        run_sync(d.get("L", 99, fresh=True))


def test_drain_returns_and_clears():
    prov, dht, owner, d = setup()
    es = [entry(prov, owner, bytes([i])) for i in range(6)]
    for e in es:
        run_sync(d.append("L", e))
    assert run_sync(d.drain("L")) == es
    assert run_sync(d.entries("L", fresh=True)) == []
    x = entry(prov, owner, b"x")
    run_sync(d.append("L", x))
    assert run_sync(d.entries("L", fresh=True)) == [(6, x)]


def test_append_policy_and_foreign_entries():
    prov = make_provider("double", 0)
    dht = LocalDht(prov)
    owner, friend, stranger = (prov.new_keypair() for _ in range(3))
    d = Dds(dht.client(owner), owner, prov, s=4)
    run_sync(d.create("W", policy="append", appenders=[friend.public_key]))
    fd = Dds(dht.client(friend), friend, prov, s=4)
    sd = Dds(dht.client(stranger), stranger, prov, s=4)
    i = run_sync(fd.append("W", entry(prov, friend, b"hi")))
    with pytest.raises((StorageRejected, DdsError)):
        run_sync(sd.append("W", entry(prov, stranger, b"spam")))
    # the owner cannot rewrite the friend's entry, only punch a hole
    with pytest.raises((StorageRejected, DdsError)):
        run_sync(d.replace("W", i, entry(prov, owner, b"edited")))
    run_sync(d.remove("W", i))
    assert run_sync(d.entries("W", fresh=True)) == []
    # revoking the friend stops further appends
    run_sync(d.set_access("W", "append", []))
    with pytest.raises((StorageRejected, DdsError)):
        run_sync(fd.append("W", entry(prov, friend, b"again")))


def test_set_semantics():
    prov, dht, owner, d = setup()

    from p2posn.secure_items import SecureStorageItem

    def key_of(e):
        return SecureStorageItem.decode(e).ciphertext[-1:]
        yield  # pragma: no cover
    a = entry(prov, owner, b"a")
    member = run_sync(key_of(a))
    assert run_sync(d.set_add("L", member, a, key_of))
    assert not run_sync(d.set_add("L", member, a, key_of))
    assert run_sync(d.set_contains("L", member, key_of, fresh=True))
    assert run_sync(d.set_remove("L", member, key_of))
    assert not run_sync(d.set_contains("L", member, key_of, fresh=True))


def make_pht(D=16, M=4):
    prov = make_provider("double", 0)
    dht = LocalDht(prov)
    kp = prov.new_keypair()
    return dht, Pht(dht.client(kp), kp, prov, "idx", D=D, M=M)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, (1 << 16) - 1), unique=True, max_size=60),
       st.lists(st.tuples(st.integers(0, (1 << 16) - 1), st.integers(0, (1 << 16) - 1)), max_size=10))
def test_pht_range_matches_brute_force(keys, ranges):
    dht, pht = make_pht()
    for k in keys:
        run_sync(pht.insert(k, k.to_bytes(2, "big")))
    for lo, hi in ranges:
        lo, hi = min(lo, hi), max(lo, hi)
        got = sorted(k for k, _ in run_sync(pht.range(lo, hi, fresh=True)))
        assert got == sorted(k for k in keys if lo <= k <= hi)
    for k in keys[:10]:
        assert run_sync(pht.lookup(k)) == k.to_bytes(2, "big")
        assert pht.probes <= probe_bound(16)


def test_pht_delete():
    dht, pht = make_pht()
    for k in range(0, 200, 7):
        run_sync(pht.insert(k, b"v"))
    run_sync(pht.delete(14))
    with pytest.raises(NotFound):
        run_sync(pht.lookup(14))
    assert 14 not in [k for k, _ in run_sync(pht.range(0, 100, fresh=True))]
