import random

from p2posn import ids
from p2posn.config import Config
from p2posn.harness.checks import build_overlay, routing_check
from p2posn.overlay import closest_nodes_oracle


def test_two_node_ring_takes_one_hop():
    sim, nodes = build_overlay(2, 0, settle_s=30)
    a, b = nodes
    key = next(k for k in (ids.hash160(str(i)) for i in range(100))
               if closest_nodes_oracle(nodes, k, 1)[0] == b.node_id)
    desc, hops = sim.run_process(a.lookup(key))
    assert desc.node_id == b.node_id and hops == 1
    desc, hops = sim.run_process(b.lookup(key))
    assert desc.node_id == b.node_id and hops == 0


def test_lookup_agrees_with_oracle_small():
    rep = routing_check(16, 64, range(2))
    assert rep.agreement == 1.0
    assert rep.max_hops <= rep.hop_bound


def test_replica_targets_are_k_closest():
    sim, nodes = build_overlay(20, 3)
    rng = random.Random(0)
    for _ in range(30):
        key = rng.getrandbits(160)
        want = closest_nodes_oracle(nodes, key, 4)
        owner = next(n for n in nodes if n.node_id == want[0])
        assert sorted(d.node_id for d in owner.replica_targets(key, 4)) == sorted(want)


def test_crashed_node_is_dropped_from_leaf_sets():
    sim, nodes = build_overlay(12, 1)
    victim = nodes[5]
    victim.crash()
    sim.run(until=sim.now + 5 * int(Config().maintenance_s * 1000))
    for n in nodes:
        if n is not victim:
            assert victim.node_id not in n.leaf_ids()


def test_routing_table_capacity_is_pooled():
    cfg = Config(bucket_cap=2)
    sim, nodes = build_overlay(24, 2, cfg)
    n = nodes[0]
    assert sum(len(n.row_contacts(r)) for r in range(160)) <= cfg.table_capacity
