"""Run a workload plan over a simulated network of peers."""
from __future__ import annotations

import random
import time
from collections import Counter
from dataclasses import dataclass, field

from ..config import Config
from ..crypto import make_provider
from ..monitoring import GlobalView
from ..peer import Peer
from ..sim import Network, Simulator
from .plan import Churn, Plan

OUTCOMES = ("ok", "skipped", "failed", "killed")


@dataclass
class MetricLog:
    """Global views as produced by the monitoring root, in time order."""
    views: list[GlobalView] = field(default_factory=list)
    _seen: set = field(default_factory=set)

    def add(self, view: GlobalView):
        key = (view.root, view.epoch)
        if key not in self._seen:
            self._seen.add(key)
            self.views.append(view)

    def names(self) -> list[str]:
        return sorted({n for v in self.views for n in v.stats})

    def series(self, name: str) -> list[tuple[float, object]]:
        return [(v.time_ms / 1000, v.stats[name]) for v in self.views if name in v.stats]


@dataclass
class RunResult:
    n: int
    seed: int
    plan: Plan
    log: MetricLog
    outcomes: dict[str, Counter]
    failures: list[tuple[float, str, str, str]]
    wall_s: float
    sim_s: float
    online: int
    # (stored objects, replicas) per online peer at the end of the run
    loads: list[tuple[int, int]] = field(default_factory=list)

    def total(self, outcome: str) -> int:
        return sum(c[outcome] for c in self.outcomes.values())

    @property
    def scheduled(self) -> int:
        return sum(sum(c.values()) for c in self.outcomes.values())

    @property
    def success_rate(self) -> float:
        return self.total("ok") / self.scheduled if self.scheduled else 1.0

    def imbalance(self) -> tuple[float, float]:
        """max/mean of stored objects and of replicas over the online peers."""
        return _max_over_mean([s for s, _ in self.loads]), _max_over_mean([r for _, r in self.loads])

    def monitored_imbalance(self, stored: str, replicas: str) -> tuple[float, float] | None:
        """The same ratios as seen by the last global monitoring view."""
        if not self.log.views:
            return None
        v = self.log.views[-1]
        if stored not in v.stats or replicas not in v.stats:
            return None
        a, b = v.stats[stored], v.stats[replicas]
        return (a.max / a.mean if a.mean else float("inf"), b.max / b.mean if b.mean else float("inf"))


def _max_over_mean(xs) -> float:
    if not xs:
        return float("nan")
    mean = sum(xs) / len(xs)
    return max(xs) / mean if mean else float("inf")


class Experiment:
    """One seeded run: N peers, a plan and an optional churn schedule."""

    def __init__(self, n: int, plan: Plan, seed: int = 0, cfg: Config | None = None,
                 churn: Churn | None = None):
        if n < 2:
            raise ValueError("need at least two peers")
        self.n = n
        self.plan = plan
        self.seed = seed
        self.cfg = cfg or Config()
        self.churn = churn or Churn()
        self.sim = Simulator(seed)
        self.net = Network(self.sim, (self.cfg.latency_min, self.cfg.latency_max), self.cfg.loss)
        self.provider = make_provider(self.cfg.provider, seed)
        self.rng = random.Random(f"harness:{seed}")
        self.peers: list[Peer] = []
        self.log = MetricLog()
        self.outcomes = {s.action: Counter() for s in plan.steps}
        self.failures: list[tuple[float, str, str, str]] = []

    # -- setup --------------------------------------------------------
    def new_peer(self) -> Peer:
        i = len(self.peers)
        p = Peer(self.sim, self.net, self.cfg, self.provider, f"user{i:04d}", f"secret-{self.seed}-{i}",
                 self.seed)
        p.monitor.on_view(lambda v, p=p: self.log.add(v) if v.root == p.node_id else None)
        self.peers.append(p)
        return p

    def online(self) -> list[Peer]:
        return [p for p in self.peers if p.online]

    def _bootstrap(self, joiner: Peer):
        live = [p for p in self.online() if p is not joiner]
        return live[0].node.desc if live else None

    def _join(self, p: Peer, befriend: int = 0):
        yield from p.join(self._bootstrap(p))
        yield from p.user.register()
        p.node.spawn(p.user.background())
        others = [q for q in self.online() if q is not p and q.user.registered]
        for q in self.rng.sample(others, min(befriend, len(others))):
            yield from p.user.friend_request(q.user.user_id)

    def _befriend_ring(self):
        ring = [p for p in self.peers if p.online and p.user.registered]
        for i, p in enumerate(ring):
            q = ring[(i + 1) % len(ring)]
            if q is not p:
                p.node.spawn(p.user.friend_request(q.user.user_id))

    def setup(self):
        """Schedule the joins, registrations and friendships of the warm-up."""
        warm_ms = int(self.plan.warmup_s * 1000)
        spacing = max(1, int(warm_ms * 0.4) // self.n)
        for i in range(self.n):
            p = self.new_peer()
            self.sim.schedule(i * spacing, self._spawn_join, p)
        if self.plan.friends == "ring":
            self.sim.schedule(int(warm_ms * 0.6), self._befriend_ring)

    def _spawn_join(self, p: Peer, befriend: int = 0):
        self.sim.spawn(self._join(p, befriend))

    # -- workload -----------------------------------------------------
    def _act(self, p: Peer, action: str):
        proc = p.node.spawn(p.user.perform(action))
        t = self.sim.now

        def done(fut, p=p, action=action):
            outcome = "killed" if fut.error is not None else fut.value
            self.outcomes[action][outcome] += 1
            if outcome != "ok":
                detail = p.user.failures[-1][1] if outcome != "killed" and p.user.failures else outcome
                self.failures.append((t / 1000, p.user.username, action, detail))
        proc.add_callback(done)

    def _start_step(self, action: str, count: int, span_ms: int):
        for p in self.online():
            for t in sorted(self.rng.randrange(span_ms) for _ in range(count)):
                self.sim.schedule(t, self._act, p, action)

    def _churn_event(self, kind: str, count: int):
        if kind == "join":
            for _ in range(count):
                self._spawn_join(self.new_peer(), befriend=2)
            return
        live = self.online()
        for p in self.rng.sample(live, min(count, len(live) - 1)):
            if kind == "crash":
                p.crash()
            else:
                self.sim.spawn(p.leave())

    def schedule_plan(self):
        t = int(self.plan.warmup_s * 1000)
        for step in self.plan.steps:
            span = int(step.minutes * 60_000)
            self.sim.schedule(t, self._start_step, step.action, step.count, span)
            t += span + int(self.plan.gap_s * 1000)
        for ev in self.churn.events:
            self.sim.schedule(int((self.plan.warmup_s + ev.time_s) * 1000), self._churn_event, ev.kind, ev.count)

    def run(self, tail_s: float = 60.0) -> RunResult:
        t0 = time.perf_counter()
        self.setup()
        self.schedule_plan()
        end = int((self.plan.duration_s + tail_s) * 1000)
        self.sim.run(until=end)
        return RunResult(self.n, self.seed, self.plan, self.log, self.outcomes, self.failures,
                         time.perf_counter() - t0, self.sim.now / 1000, len(self.online()), self.loads())

    def loads(self) -> list[tuple[int, int]]:
        out = []
        for p in self.online():
            roles = p.storage.n_role
            out.append((len(p.storage.store), roles["R"] + roles["D"]))
        return out


def run_plan(n: int, plan: Plan, seed: int = 0, cfg: Config | None = None, churn: Churn | None = None,
             tail_s: float = 60.0) -> RunResult:
    return Experiment(n, plan, seed, cfg, churn).run(tail_s)
