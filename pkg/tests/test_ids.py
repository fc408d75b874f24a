import random

from hypothesis import given, settings, strategies as st

from p2posn import ids

id_st = st.integers(min_value=0, max_value=ids.MASK)


def test_hash160_is_sha1_width():
    h = ids.hash160("alice")
    assert 0 <= h < ids.RING
    assert h == ids.hash160(b"alice")
    assert h != ids.hash160("bob")


@given(id_st)
def test_bytes_round_trip(x):
    assert len(ids.to_bytes(x)) == 20
    assert ids.from_bytes(ids.to_bytes(x)) == x


@given(id_st, id_st)
def test_ring_distance_symmetric_and_bounded(a, b):
    d = ids.ring_distance(a, b)
    assert d == ids.ring_distance(b, a)
    assert 0 <= d <= ids.HALF
    assert (d == 0) == (a == b)


@settings(max_examples=200)
@given(st.lists(id_st, min_size=1, max_size=40, unique=True), id_st, st.integers(1, 8))
def test_window_closest_matches_brute_force(pool, key, n):
    assert ids.window_closest(sorted(pool), key, n) == ids.brute_closest(pool, key, n)


@settings(max_examples=200)
@given(st.lists(id_st, min_size=2, max_size=40, unique=True), id_st, st.integers(1, 8))
def test_window_closest_with_extra_id(pool, key, n):
    own, rest = pool[0], pool[1:]
    assert ids.window_closest(sorted(rest), key, n, (own,)) == ids.brute_closest(pool, key, n)


def test_closest_set_is_contiguous_on_ring():
    rng = random.Random(3)
    for _ in range(50):
        pool = sorted(rng.getrandbits(160) for _ in range(30))
        key = rng.getrandbits(160)
        best = set(ids.brute_closest(pool, key, 5))
        pos = sorted(pool.index(x) for x in best)
        # five consecutive positions, possibly wrapping
        gaps = [(pos[(i + 1) % 5] - pos[i]) % len(pool) for i in range(5)]
        assert sorted(gaps)[:4] == [1, 1, 1, 1]


@given(id_st, st.integers(0, 159))
def test_interval_contains_node_and_halves(node, level):
    lo, hi = ids.interval_of(node, level)
    assert lo <= node < hi
    assert hi - lo == 1 << (160 - level)
    assert lo <= ids.midpoint(lo, hi) < hi


def test_common_prefix():
    assert ids.common_prefix(0, 0) == 160
    assert ids.common_prefix(0, 1 << 159) == 0
    assert ids.common_prefix(0, 1) == 159
