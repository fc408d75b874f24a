import math
import random
import statistics
from fractions import Fraction

from hypothesis import given, strategies as st

from p2posn.metrics import MetricStat, Recorder, merge_maps

vals = st.lists(st.one_of(st.integers(-1000, 1000), st.floats(-1e3, 1e3, allow_nan=False)),
                min_size=1, max_size=20)


@given(vals, vals, vals)
def test_merge_is_associative_and_commutative(a, b, c):
    x, y, z = (MetricStat.of("m", v) for v in (a, b, c))
    assert x.merge(y).merge(z) == x.merge(y.merge(z))
    assert x.merge(y) == y.merge(x)


@given(vals, vals)
def test_merge_equals_stat_of_concatenation(a, b):
    m = MetricStat.of("m", a).merge(MetricStat.of("m", b))
    whole = MetricStat.of("m", a + b)
    assert m.count == whole.count
    assert m.exact_sum == whole.exact_sum == sum(Fraction(v) for v in a + b)
    assert (m.min, m.max) == (whole.min, whole.max)


@given(vals)
def test_stddev_matches_two_pass(values):
    s = MetricStat.of("m", values)
    assert math.isclose(s.stddev, statistics.pstdev(values), rel_tol=1e-9, abs_tol=1e-9)
    assert math.isclose(s.mean, statistics.fmean(values), rel_tol=1e-9, abs_tol=1e-9)


def test_empty_merge_identity_and_mismatch():
    s = MetricStat.of("m", [1, 2])
    assert s.merge(MetricStat("m")) == s
    assert MetricStat("m").merge(s) == s
    try:
        s.merge(MetricStat.of("other", [1]))
    except ValueError:
        pass
    else:
        raise AssertionError("merging different metrics must fail")


def test_ratio_is_exact():
    r = MetricStat.ratio("rate", 7, 3)
    assert r.exact_sum == Fraction(7, 3)
    assert MetricStat.ratio("rate", 1, 3).merge(MetricStat.ratio("rate", 2, 3)).exact_sum == 1


def test_merge_maps_union():
    a = {"x": MetricStat.of("x", [1])}
    b = {"x": MetricStat.of("x", [3]), "y": MetricStat.of("y", [2])}
    m = merge_maps(a, b)
    assert m["x"].count == 2 and m["y"].count == 1


def test_recorder_drain_rates_and_gauges():
    rec = Recorder()
    for v in (10, 20):
        rec.sample("lat", v, "ms")
    rec.count("msgs", 5)
    rec.gauge("stored", lambda: 4)
    out = rec.drain(10.0)
    assert out["lat"].count == 2 and out["lat"].mean == 15
    assert out["msgs"].mean == 0.5
    assert out["stored"].mean == 4
    again = rec.drain(10.0)
    assert "lat" not in again or again["lat"].count == 0


def test_random_tree_merge_orders_agree():
    rng = random.Random(1)
    parts = [MetricStat.of("m", [rng.uniform(-5, 5) for _ in range(rng.randint(1, 5))]) for _ in range(30)]
    ref = parts[0]
    for p in parts[1:]:
        ref = ref.merge(p)
    for _ in range(10):
        pool = parts[:]
        while len(pool) > 1:
            i, j = rng.sample(range(len(pool)), 2)
            merged = pool[i].merge(pool[j])
            pool = [p for k, p in enumerate(pool) if k not in (i, j)] + [merged]
        assert pool[0] == ref
