import pytest

from p2posn.crypto import make_provider
from p2posn.harness.checks import integrity_fuzz
from p2posn.secure_items import (PUBLIC, AccessDenied, CycleError, IntegrityError, Keyring, NotOwner,
                                 SecureStorageItem, add_member, create_group, group_key_location,
                                 open_item, remove_member, seal, seal_group_key, tombstone,
                                 validate_replacement)


@pytest.fixture
def world():
    prov = make_provider("double", 1)
    keys = {name: prov.new_keypair() for name in ("alice", "bob", "carol")}
    pids = {name: i + 1 for i, name in enumerate(keys)}
    pubs = {pids[n]: kp.public_key for n, kp in keys.items()}
    rings = {}
    for n, kp in keys.items():
        r = Keyring()
        r.add(pids[n], kp)
        rings[n] = r
    return prov, keys, pids, pubs, rings


def test_seal_open_for_listed_readers_only(world):
    prov, keys, pids, pubs, rings = world
    item = seal(b"hello", [pids["bob"]], keys["alice"], pids["alice"], prov, pubs.get)
    item = SecureStorageItem.decode(item.encode())
    assert open_item(item, rings["alice"], prov) == b"hello"
    assert open_item(item, rings["bob"], prov) == b"hello"
    with pytest.raises(AccessDenied):
        open_item(item, rings["carol"], prov)


def test_public_items_open_for_anyone(world):
    prov, keys, pids, pubs, rings = world
    item = seal(b"news", [PUBLIC], keys["alice"], pids["alice"], prov, pubs.get)
    assert open_item(item, Keyring(), prov) == b"news"


def test_tampering_and_replacement_rules(world):
    prov, keys, pids, pubs, rings = world
    item = seal(b"x", [], keys["alice"], pids["alice"], prov, pubs.get)
    bad = SecureStorageItem(item.owner_pub, item.wrapped_keys, item.ciphertext + b"!", False, item.signature)
    with pytest.raises(IntegrityError):
        open_item(bad, rings["alice"], prov)
    forged = seal(b"y", [], keys["bob"], pids["bob"], prov, pubs.get)
    assert not validate_replacement(item, forged, prov)
    assert validate_replacement(item, seal(b"z", [], keys["alice"], pids["alice"], prov, pubs.get), prov)
    with pytest.raises(NotOwner):
        tombstone(item, keys["bob"], prov)
    dead = tombstone(item, keys["alice"], prov)
    assert open_item(dead, rings["alice"], prov) is None


def test_group_readers_and_forward_only_revocation(world):
    prov, keys, pids, pubs, rings = world
    gid = 100
    g = create_group(gid, pids["alice"], prov, [pids["bob"], pids["carol"]])
    pubs = {**pubs, gid: g.public_key}
    store = {gid: seal_group_key(g, keys["alice"], prov, pubs.get)}
    old = seal(b"before", [gid], keys["alice"], pids["alice"], prov, pubs.get)
    assert open_item(old, rings["carol"].copy(), prov, store) == b"before"
    remove_member(g, pids["carol"], prov)
    pubs[gid] = g.public_key
    store[gid] = seal_group_key(g, keys["alice"], prov, pubs.get)
    new = seal(b"after", [gid], keys["alice"], pids["alice"], prov, pubs.get)
    assert open_item(new, rings["bob"].copy(), prov, store) == b"after"
    with pytest.raises(AccessDenied):
        open_item(new, rings["carol"].copy(), prov, store)
    # bob still reads what was sealed before the rotation
    assert open_item(old, rings["bob"].copy(), prov, store) == b"before"


def test_nested_groups_and_cycles(world):
    prov, keys, pids, pubs, rings = world
    inner = create_group(200, pids["alice"], prov, [pids["bob"]])
    outer = create_group(201, pids["alice"], prov)
    members = {200: inner.members, 201: outer.members}
    add_member(outer, 200, lambda g: members.get(g, ()))
    with pytest.raises(CycleError):
        add_member(inner, 201, lambda g: members.get(g, ()))
    pubs = {**pubs, 200: inner.public_key, 201: outer.public_key}
    store = {g.group_id: seal_group_key(g, keys["alice"], prov, pubs.get) for g in (inner, outer)}
    item = seal(b"deep", [201], keys["alice"], pids["alice"], prov, pubs.get)
    assert open_item(item, rings["bob"].copy(), prov, store) == b"deep"
    assert group_key_location(200) != group_key_location(201)


def test_integrity_fuzz_has_no_silent_corruption():
    rep = integrity_fuzz(300, seed=3, provider_name="double")
    assert rep.mutations == 300 and rep.silent == 0
