import random

from p2posn import ids
from p2posn.harness.checks import monitoring_check
from p2posn.monitoring import coordinated_level, parent_of, tree_oracle


def test_tree_is_rooted_and_acyclic():
    rng = random.Random(4)
    for n in (1, 2, 5, 17, 64):
        pool = [rng.getrandbits(160) for _ in range(n)]
        parents = tree_oracle(pool)
        roots = [x for x, p in parents.items() if p is None]
        assert len(roots) == 1
        for x in pool:
            seen = set()
            while parents[x] is not None:
                assert x not in seen
                seen.add(x)
                x = parents[x]


def test_parent_coordinates_a_coarser_level():
    rng = random.Random(9)
    pool = sorted(rng.getrandbits(160) for _ in range(30))

    def resp(key):
        return ids.window_closest(pool, key, 1)[0]
    for x in pool:
        p = parent_of(x, resp)
        if p is not None:
            assert coordinated_level(p, resp) < coordinated_level(x, resp)


def test_aggregate_is_exact_and_recovers_from_churn():
    rep = monitoring_check(16, seed=1)
    assert rep.count == 16 and rep.exact
    assert rep.stddev_err <= 1e-9
    assert rep.churn_ticks is not None and rep.churn_ticks <= 4
