"""Workload plans and churn schedules.

Plan files are line based::

    warmup 600          # seconds before the first step
    gap 60              # pause between steps
    friends ring        # ring | none
    MESSAGING_SEND_MESSAGE 8 2   # action, actions per node, minutes

Churn files list events as ``<time_s> <crash|leave|join> <count>``;
times are relative to the end of the warm-up.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from ..social import ACTIONS


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class Step:
    action: str
    count: int
    minutes: float


@dataclass(frozen=True)
class Plan:
    steps: tuple[Step, ...]
    warmup_s: float = 600.0
    gap_s: float = 60.0
    friends: str = "ring"

    @property
    def actions_per_node(self) -> int:
        return sum(s.count for s in self.steps)

    @property
    def duration_s(self) -> float:
        """Warm-up, all steps and the gaps between them."""
        return (self.warmup_s + sum(s.minutes * 60 for s in self.steps)
                + self.gap_s * max(len(self.steps) - 1, 0))


def _number(tok: str, lineno: int) -> float:
    try:
        return float(tok)
    except ValueError:
        raise PlanError(f"line {lineno}: {tok!r} is not a number") from None


def parse_plan(text: str, **defaults) -> Plan:
    steps = []
    opts = {"warmup_s": 600.0, "gap_s": 60.0, "friends": "ring", **defaults}
    for lineno, raw in enumerate(text.splitlines(), 1):
        toks = raw.split("#", 1)[0].split()
        if not toks:
            continue
        head = toks[0]
        if head in ("warmup", "gap"):
            if len(toks) != 2:
                raise PlanError(f"line {lineno}: {head} takes one value")
            opts[f"{head}_s"] = _number(toks[1], lineno)
        elif head == "friends":
            if len(toks) != 2 or toks[1] not in ("ring", "none"):
                raise PlanError(f"line {lineno}: friends must be 'ring' or 'none'")
            opts["friends"] = toks[1]
        elif head in ACTIONS:
            if len(toks) != 3:
                raise PlanError(f"line {lineno}: expected ACTION COUNT MINUTES")
            count, minutes = _number(toks[1], lineno), _number(toks[2], lineno)
            if count != int(count) or count < 0 or minutes <= 0:
                raise PlanError(f"line {lineno}: bad count or duration")
            steps.append(Step(head, int(count), minutes))
        else:
            raise PlanError(f"line {lineno}: unknown action or directive {head!r}")
    if not steps:
        raise PlanError("plan has no steps")
    return Plan(tuple(steps), **opts)


def load_plan(path, **defaults) -> Plan:
    with open(path) as fh:
        return parse_plan(fh.read(), **defaults)


@dataclass(frozen=True)
class ChurnEvent:
    time_s: float
    kind: str  # crash | leave | join
    count: int


@dataclass(frozen=True)
class Churn:
    events: tuple[ChurnEvent, ...] = field(default=())


def parse_churn(text: str) -> Churn:
    events = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        toks = raw.split("#", 1)[0].split()
        if not toks:
            continue
        if len(toks) != 3 or toks[1] not in ("crash", "leave", "join"):
            raise PlanError(f"line {lineno}: expected TIME crash|leave|join COUNT")
        t, n = _number(toks[0], lineno), _number(toks[2], lineno)
        if t < 0 or n != int(n) or n < 1:
            raise PlanError(f"line {lineno}: bad time or count")
        events.append(ChurnEvent(t, toks[1], int(n)))
    return Churn(tuple(sorted(events, key=lambda e: e.time_s)))


def load_churn(path) -> Churn:
    with open(path) as fh:
        return parse_churn(fh.read())
