"""Exact mergeable statistics and the per-node sample recorder."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction


@dataclass(frozen=True)
class MetricStat:
    """count/sum/min/max plus sum of squares, kept exact.

    Values are integers over a common denominator ``den``: the real sum is
    ``total / den`` and the real sum of squares ``sumsq / den**2``.  Exact
    arithmetic makes merging associative and commutative bit for bit, so
    the tree shape never changes the global result.
    """
    name: str
    count: int = 0
    total: int = 0
    sumsq: int = 0
    min: float | None = None
    max: float | None = None
    unit: str = ""
    den: int = 1

    @classmethod
    def of(cls, name: str, values, unit: str = "") -> "MetricStat":
        vals = [v if isinstance(v, int) else Fraction(v) for v in values]
        if not vals:
            return cls(name, unit=unit)
        den = math.lcm(*(1 if isinstance(v, int) else v.denominator for v in vals))
        nums = [v * den if isinstance(v, int) else v.numerator * (den // v.denominator) for v in vals]
        return cls(name, len(nums), sum(nums), sum(x * x for x in nums),
                   float(min(vals)), float(max(vals)), unit, den)

    @classmethod
    def ratio(cls, name: str, num: int, den: int, unit: str = "") -> "MetricStat":
        """A single observation ``num / den`` (e.g. a count over a period)."""
        return cls(name, 1, num, num * num, num / den, num / den, unit, den)

    def _scaled(self, den: int) -> tuple[int, int]:
        f = den // self.den
        return self.total * f, self.sumsq * f * f

    def merge(self, other: "MetricStat") -> "MetricStat":
        if other.name != self.name:
            raise ValueError(f"cannot merge {self.name} with {other.name}")
        if self.unit != other.unit:
            raise ValueError(f"unit mismatch for {self.name}: {self.unit!r} vs {other.unit!r}")
        if not other.count:
            return self
        if not self.count:
            return other
        if self.den == other.den:
            den, (t1, q1), (t2, q2) = self.den, (self.total, self.sumsq), (other.total, other.sumsq)
        else:
            den = math.lcm(self.den, other.den)
            (t1, q1), (t2, q2) = self._scaled(den), other._scaled(den)
        return MetricStat(self.name, self.count + other.count, t1 + t2, q1 + q2,
                          min(self.min, other.min), max(self.max, other.max), self.unit, den)

    @property
    def exact_sum(self) -> Fraction:
        return Fraction(self.total, self.den)

    @property
    def sum(self) -> float:
        return self.total / self.den

    @property
    def mean(self) -> float:
        return self.total / (self.den * self.count) if self.count else 0.0

    @property
    def stddev(self) -> float:
        """Population standard deviation from the exact moments."""
        if not self.count:
            return 0.0
        num = self.sumsq * self.count - self.total * self.total
        if num <= 0:
            return 0.0
        # integer sqrt carried to >= 64 bits, then one correctly rounded division;
        # float(sqrt(num)) would overflow when the denominator is huge
        shift = max(0, 64 - num.bit_length() // 2)
        return math.isqrt(num << (2 * shift)) / ((self.den * self.count) << shift)

    def row(self) -> tuple:
        if not self.count:
            return (0, 0.0, 0.0, 0.0, 0.0, 0.0)
        return (self.count, self.sum, self.min, self.max, self.mean, self.stddev)

    def wire_size(self) -> int:
        return 48 + len(self.name)


def merge_maps(a: dict[str, MetricStat], b: dict[str, MetricStat]) -> dict[str, MetricStat]:
    out = dict(a)
    for name, stat in b.items():
        cur = out.get(name)
        out[name] = stat if cur is None else cur.merge(stat)
    return out


class Recorder:
    """Per-node accumulator read out once per monitoring period.

    ``gauge`` metrics are set to a current value (e.g. stored objects),
    ``sample`` metrics collect individual observations (e.g. hop counts)
    and ``count`` metrics are event counters reported as a rate.
    """

    def __init__(self):
        self.samples: dict[str, list] = {}
        self.counters: dict[str, int] = {}
        self.totals: dict[str, int] = {}
        self.gauges: dict[str, object] = {}
        self.units: dict[str, str] = {}

    def sample(self, name: str, value, unit: str = ""):
        self.samples.setdefault(name, []).append(value)
        if unit:
            self.units[name] = unit

    def count(self, name: str, n: int = 1):
        self.counters[name] = self.counters.get(name, 0) + n
        self.totals[name] = self.totals.get(name, 0) + n

    def gauge(self, name: str, fn, unit: str = ""):
        self.gauges[name] = fn
        if unit:
            self.units[name] = unit

    def total(self, name: str) -> int:
        return self.totals.get(name, 0)

    def drain(self, period_s: float) -> dict[str, MetricStat]:
        """Stats for the elapsed period; samples and counters reset."""
        out: dict[str, MetricStat] = {}
        for name in sorted(self.samples):
            out[name] = MetricStat.of(name, self.samples[name], self.units.get(name, ""))
        period = Fraction(period_s).limit_denominator()
        for name in sorted(self.counters):
            out[name] = MetricStat.ratio(name, self.counters[name] * period.denominator, period.numerator,
                                         self.units.get(name, "1/s"))
        for name in sorted(self.gauges):
            out[name] = MetricStat.of(name, [self.gauges[name]()], self.units.get(name, ""))
        self.samples = {}
        self.counters = dict.fromkeys(self.counters, 0)
        return out
