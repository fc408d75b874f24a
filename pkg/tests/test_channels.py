import dataclasses

import pytest

from conftest import build_peers
from p2posn.channels import IntegrityError, open_envelope, seal_envelope


@pytest.fixture(scope="module")
def net():
    return build_peers(10, seed=2, friends_ring=False)


def test_envelope_only_for_recipients(net):
    sim, peers = net
    a, b, c = (p.hub for p in peers[:3])
    env = seal_envelope(a, "chat", [b.kp.public_key], b"hi")
    assert open_envelope(b, env) == b"hi"
    with pytest.raises(IntegrityError):
        open_envelope(c, env)
    forged = dataclasses.replace(env, body=env.body[:-1] + bytes([env.body[-1] ^ 1]))
    with pytest.raises(IntegrityError):
        open_envelope(b, forged)


def test_multi_recipient_delivery_by_routing(net):
    sim, peers = net
    got = {}
    for p in peers[1:5]:
        p.hub.open("room", lambda sender, payload, p=p: got.setdefault(p.node_id, []).append((sender, payload)))
    targets = [p.node_id for p in peers[1:5]] + [peers[6].node_id]  # the last one is not listening
    acked = sim.run_process(peers[0].hub.send("room", targets, b"hello all"))
    assert sorted(acked) == sorted(p.node_id for p in peers[1:5])
    for p in peers[1:5]:
        assert got[p.node_id] == [(peers[0].node_id, b"hello all")]


def test_topic_publish_reaches_all_subscribers(net):
    sim, peers = net
    seen = {}
    subs = peers[2:9]
    for p in subs:
        sim.run_process(p.hub.subscribe("news", lambda payload, p=p: seen.setdefault(p.node_id, []).append(payload)))
    sim.run_process(peers[0].hub.publish("news", b"extra"))
    sim.run(until=sim.now + 5000)
    assert all(seen.get(p.node_id) == [b"extra"] for p in subs)
    peers[1].hub.unsubscribe("news")


def test_topic_tree_survives_a_crash(net):
    sim, peers = net
    seen = {}
    subs = peers[1:9]
    for p in subs:
        sim.run_process(p.hub.subscribe("alerts", lambda payload, p=p: seen.setdefault(p.node_id, []).append(payload)))
    victim = subs[3]
    victim.crash()
    sim.run(until=sim.now + 6 * 30_000)
    sim.run_process(peers[0].hub.publish("alerts", b"after crash"))
    sim.run(until=sim.now + 5000)
    for p in subs:
        if p is not victim:
            assert seen.get(p.node_id) == [b"after crash"], p
