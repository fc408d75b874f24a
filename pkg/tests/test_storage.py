import random

import pytest

from p2posn import ids
from p2posn.crypto import make_provider
from p2posn.harness.checks import build_storage, durability_run, holder_wipeout, holders
from p2posn.overlay import closest_nodes_oracle
from p2posn.storage import (Conflict, LocalDht, StorageRejected, check_write, make_object, run_sync,
                            successor)


@pytest.fixture
def prov():
    return make_provider("double", 0)


def test_versions_advance_by_one(prov):
    kp = prov.new_keypair()
    dht = LocalDht(prov)
    c = dht.client(kp)
    v1 = make_object(kp, prov, 5, "blob", b"a")
    run_sync(c.put(v1))
    v2 = successor(v1, kp, prov, b"b")
    run_sync(c.put(v2))
    with pytest.raises(Conflict):
        run_sync(c.put(successor(v1, kp, prov, b"stale")))
    assert run_sync(c.get(5, fresh=True)).payload == b"b"


def test_reinsert_is_idempotent_and_proofs_checked(prov):
    kp = prov.new_keypair()
    obj = make_object(kp, prov, 9, "blob", b"x")
    assert check_write(None, obj, prov) == "accept"
    assert check_write(obj, obj, prov) == "same"
    forged = make_object(kp, prov, 9, "blob", b"x").__class__(**{**obj.__dict__, "payload": b"y"})
    with pytest.raises(StorageRejected):
        check_write(None, forged, prov)


def test_only_owner_may_update_or_delete(prov):
    owner, other = prov.new_keypair(), prov.new_keypair()
    obj = make_object(owner, prov, 1, "blob", b"x")
    with pytest.raises(StorageRejected):
        check_write(obj, successor(obj, other, prov, b"evil"), prov)
    with pytest.raises(StorageRejected):
        check_write(obj, successor(obj, other, prov, b"", deleted=True), prov)
    dead = successor(obj, owner, prov, b"", deleted=True)
    assert check_write(obj, dead, prov) == "accept"
    with pytest.raises(StorageRejected):
        check_write(dead, successor(dead, other, prov, b"squat"), prov)


def test_random_writes_follow_the_rule_model(prov):
    """Random sequences of writes against a tiny independent model of the rules."""
    rng = random.Random(11)
    keys = [prov.new_keypair() for _ in range(3)]
    for _ in range(40):
        dht = LocalDht(prov)
        state = {}  # fid -> (owner pub, version, deleted)
        for _ in range(30):
            fid = rng.randrange(3)
            kp = rng.choice(keys)
            cur = dht.objects.get(fid)
            if cur is None or rng.random() < 0.2:
                version = rng.choice([1, 2]) if cur is None else rng.randint(1, cur.version + 2)
                obj = make_object(kp, prov, fid, "blob", rng.randbytes(4), version=version)
            else:
                obj = successor(cur, kp, prov, rng.randbytes(4), deleted=rng.random() < 0.2)
            m = state.get(fid)
            if m is None:
                expect = obj.version == 1 and not obj.deleted
            elif m[2]:
                expect = obj.version == m[1] + 1 and obj.writer == m[0] and not obj.deleted
            else:
                expect = obj.version == m[1] + 1 and obj.writer == m[0] and obj.owner == m[0]
            try:
                dht.apply(obj)
                ok = True
            except StorageRejected:
                ok = False
            assert ok == expect, (m, obj)
            if ok:
                state[fid] = (obj.owner, obj.version, obj.deleted)


def test_put_places_k_replicas_on_the_closest_nodes():
    sim, hosts, provider = build_storage(20, 4)
    h = hosts[2]
    nodes = [x.node for x in hosts]
    rng = random.Random(2)
    for _ in range(10):
        obj = make_object(h.storage.kp, provider, rng.getrandbits(160), "blob", b"data")
        receipts = sim.run_process(h.storage.put(obj))
        assert len(receipts) == 4
        want = sorted(closest_nodes_oracle(nodes, obj.file_id, 4))
        assert sorted(x.node.node_id for x in holders(hosts, obj.file_id)) == want


@pytest.mark.parametrize("seed", range(3))
def test_no_loss_with_up_to_three_crashes_per_round(seed):
    rep = durability_run(seed)
    assert rep.acked == 40
    assert rep.ok, (rep.lost, rep.unreadable)


def test_losing_every_holder_is_detected():
    assert holder_wipeout(0) == (True, True)
