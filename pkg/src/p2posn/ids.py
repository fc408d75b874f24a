"""160-bit identifier space helpers.

Responsibility between a node and a key is ordered by longest common
prefix first and numeric ring distance second.
"""
from __future__ import annotations

import bisect
import hashlib
from typing import Iterable, Sequence

ID_BITS = 160
RING = 1 << ID_BITS
MASK = RING - 1


def hash160(data: bytes | str) -> int:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return int.from_bytes(hashlib.sha1(data).digest(), "big")


def name_id(name: str) -> int:
    """Reproducible id for a named object, e.g. ``"Alice__Albums"``."""
    return hash160(name)


def to_bytes(value: int) -> bytes:
    return value.to_bytes(20, "big")


def from_bytes(data: bytes) -> int:
    return int.from_bytes(data, "big")


def short(value: int) -> str:
    return f"{value:040x}"[:8]


def common_prefix(a: int, b: int) -> int:
    return ID_BITS - (a ^ b).bit_length()


def ring_distance(a: int, b: int) -> int:
    d = (a - b) & MASK
    return min(d, RING - d)


HALF = RING >> 1


def closeness(node_id: int, key: int) -> tuple[int, int, int]:
    """Sort key: smaller means more responsible for ``key``.

    Ordered by longest common prefix (the xor's bit length is
    ``ID_BITS - common_prefix``), then ring distance, then id.
    """
    d = (node_id - key) & MASK
    return ((node_id ^ key).bit_length(), d if d <= HALF else RING - d, node_id)


def brute_closest(ids: Iterable[int], key: int, n: int) -> list[int]:
    return sorted(ids, key=lambda i: closeness(i, key))[:n]


def window_closest(sorted_ids: Sequence[int], key: int, n: int, extra: Iterable[int] = ()) -> list[int]:
    """Same result as :func:`brute_closest` over ``sorted_ids`` plus ``extra``.

    The n most responsible ids always form a contiguous circular window
    around the key's insertion point, so only n ids on each side of it
    (and the few ``extra`` ids) are examined.
    """
    size = len(sorted_ids)
    if size <= 2 * n + 1:
        cand = list(sorted_ids)
    else:
        pos = bisect.bisect_left(sorted_ids, key)
        cand = [sorted_ids[(pos + off) % size] for off in range(-n, n)]
    cand.extend(extra)

    def rank(i):  # closeness() inlined; this is the hottest sort in the overlay
        d = (i - key) & MASK
        return ((i ^ key).bit_length(), d if d <= HALF else RING - d, i)
    cand.sort(key=rank)
    return cand[:n]


def interval_of(node_id: int, level: int) -> tuple[int, int]:
    """Bounds ``[lo, hi)`` of the level-``level`` bisection interval holding ``node_id``."""
    width = 1 << (ID_BITS - level)
    lo = (node_id >> (ID_BITS - level) << (ID_BITS - level)) if level else 0
    return lo, lo + width


def midpoint(lo: int, hi: int) -> int:
    return (lo + hi) // 2


def random_id_in_row(node_id: int, row: int, bits: int) -> int:
    """An id sharing exactly ``row`` leading bits with ``node_id``; ``bits`` fills the tail."""
    shift = ID_BITS - 1 - row
    flipped = node_id ^ (1 << shift)
    return (flipped >> shift << shift) | (bits & ((1 << shift) - 1))
