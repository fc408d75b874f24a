"""Tree-based monitoring over the identifier space.

The id space is bisected recursively; the *coordinator* of an interval is
the node responsible for its midpoint.  A node reports to the coordinator
of the parent interval of the coarsest interval it coordinates itself, so
the coordinator of the whole space is the root.  Every period each node
merges its own sample with its children's latest reports and sends the
result to its parent; the acknowledgement carries the global view the
parent last received, which is how the view travels back down.

Ticks are aligned to period boundaries and staggered by level: a node
whose coarsest coordinated level is ``l`` ticks ``LEVEL_SLOTS - 1 - l``
slots into the period, so children (deeper levels) report before their
parents and one period carries a sample all the way to the root.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from . import ids
from .metrics import MetricStat, merge_maps
from .overlay import LookupFailed
from .sim import Descriptor, NodeOffline, RpcTimeout

SENSOR_ERRORS = "GLOBAL_MONITOR_SENSOR_ERRORS"
LEVEL_SLOTS = 32  # tick slots per period; levels beyond the last share it


@dataclass(frozen=True)
class MetricReport:
    reporter: int
    epoch: int
    stats: dict = field(hash=False)
    nodes: int = 1  # reporters aggregated into this report

    def wire_size(self) -> int:
        return 32 + sum(s.wire_size() for s in self.stats.values())


@dataclass(frozen=True)
class GlobalView:
    epoch: int
    stats: dict = field(hash=False)
    root: int
    time_ms: int
    nodes: int

    def wire_size(self) -> int:
        return 40 + sum(s.wire_size() for s in self.stats.values())


def coordinated_level(node_id: int, responsible: Callable[[int], int]) -> int:
    """Coarsest bisection level whose interval midpoint ``node_id`` is responsible for."""
    for level in range(ids.ID_BITS + 1):
        lo, hi = ids.interval_of(node_id, level) if level < ids.ID_BITS else (node_id, node_id + 1)
        if responsible(ids.midpoint(lo, hi)) == node_id:
            return level
    return ids.ID_BITS  # pragma: no cover - the last level always matches


def parent_of(node_id: int, responsible: Callable[[int], int]) -> int | None:
    """Parent in the monitoring tree given a responsibility oracle; None for the root."""
    level = coordinated_level(node_id, responsible)
    if level == 0:
        return None
    lo, hi = ids.interval_of(node_id, level - 1)
    parent = responsible(ids.midpoint(lo, hi))
    return None if parent == node_id else parent


def tree_oracle(node_ids) -> dict[int, int | None]:
    """Parent map computed from the full membership (for checks)."""
    pool = sorted(node_ids)

    def resp(key):
        return ids.window_closest(pool, key, 1)[0]
    return {n: parent_of(n, resp) for n in pool}


class Monitor:
    """Monitoring agent of one node."""

    def __init__(self, node, period_s: float | None = None):
        self.node = node
        self.sim = node.sim
        self.period_s = period_s or node.cfg.monitor_s
        self.period_ms = int(self.period_s * 1000)
        self.sensors: dict[str, Callable[[], float]] = {}
        self.children: dict[int, tuple[MetricReport, int]] = {}
        self.parent: Descriptor | None = None
        self.is_root = False
        self.view: GlobalView | None = None
        self.epoch = 0
        self.callbacks: list[Callable[[GlobalView], None]] = []
        self.last_report: MetricReport | None = None
        self.parent_ver = -1
        node.handlers.update(mon_report=self._h_report, mon_drop=self._h_drop)

    def add_sensor(self, name: str, fn: Callable[[], float]):
        self.sensors[name] = fn

    def on_view(self, fn: Callable[[GlobalView], None]):
        self.callbacks.append(fn)

    def start(self):
        self.node.spawn(self._loop())

    def _local_level(self) -> int:
        node = self.node
        return coordinated_level(node.node_id, lambda key: node.closest_local(key, 1)[0].node_id)

    def next_tick_delay(self) -> int:
        """Delay until this node's slot in the next period."""
        slot = self.period_ms // LEVEL_SLOTS
        offset = slot * (LEVEL_SLOTS - 1 - min(self._local_level(), LEVEL_SLOTS - 1))
        now = self.sim.now
        due = now - now % self.period_ms + offset
        if due <= now:
            due += self.period_ms
        return due - now

    def _loop(self):
        while True:
            yield self.sim.sleep(self.next_tick_delay())
            yield from self.tick()

    def local_stats(self) -> dict[str, MetricStat]:
        stats = self.node.metrics.drain(self.period_s)
        for name in sorted(self.sensors):
            try:
                value = self.sensors[name]()
            except Exception:  # noqa: BLE001 - a broken sensor must not stop the tick
                self.node.metrics.count(SENSOR_ERRORS)
                continue
            stats[name] = MetricStat.of(name, [value])
        return stats

    def _fresh_children(self):
        limit = self.sim.now - self.period_ms * 3 // 2
        for cid in [c for c, (_, t) in self.children.items() if t < limit]:
            del self.children[cid]
        return [self.children[c][0] for c in sorted(self.children)]

    def aggregate(self, local: dict[str, MetricStat]) -> MetricReport:
        stats = dict(local)
        nodes = 1
        for rep in self._fresh_children():
            stats = merge_maps(stats, rep.stats)
            nodes += rep.nodes
        return MetricReport(self.node.node_id, self.epoch, dict(sorted(stats.items())), nodes)

    def _find_parent(self):
        """Recompute the parent from the local routing view, confirmed by one lookup."""
        node = self.node

        def local(key):
            return node.closest_local(key, 1)[0].node_id
        level = coordinated_level(node.node_id, local)
        if level == 0:
            return None
        lo, hi = ids.interval_of(node.node_id, level - 1)
        try:
            desc, _ = yield from node.lookup(ids.midpoint(lo, hi), record=False)
        except LookupFailed:
            return None
        return None if desc.node_id == node.node_id else desc

    def _reparent(self):
        """Recompute the parent; tell a still-live old parent to forget our report."""
        old = self.parent
        self.parent = yield from self._find_parent()
        self.parent_ver = self.node.routing_version
        if old is not None and (self.parent is None or old.node_id != self.parent.node_id):
            self.node.rpc(old, "mon_drop")  # otherwise our subtree is counted twice until expiry

    def tick(self):
        node = self.node
        report = self.aggregate(self.local_stats())
        self.last_report = report
        if self.parent is None or self.parent_ver != node.routing_version:
            yield from self._reparent()
        for attempt in range(2):
            if self.parent is None:
                self.is_root = True
                self.epoch += 1
                self._set_view(GlobalView(self.epoch, report.stats, node.node_id, self.sim.now, report.nodes))
                return
            self.is_root = False
            try:
                view = yield node.rpc(self.parent, "mon_report", report)
            except (RpcTimeout, NodeOffline):
                if not node.online:
                    return
                self.parent = None
                if attempt == 0:
                    yield from self._reparent()
                continue
            if view is not None:
                self.epoch = max(self.epoch, view.epoch)
                self._set_view(view)
            return

    def _set_view(self, view: GlobalView):
        if self.view is not None and view.epoch <= self.view.epoch and view.root == self.view.root:
            return
        self.view = view
        for fn in self.callbacks:
            fn(view)

    def _h_drop(self, src):
        self.children.pop(src.node_id, None)

    def _h_report(self, src, report: MetricReport):
        self.children[src.node_id] = (report, self.sim.now)
        return self.view
