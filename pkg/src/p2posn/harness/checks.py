"""Invariant checks against independent oracles.

Each check builds its own seeded scenario and returns a small report
dataclass; ``ok`` says whether the invariant held.  The CLI ``oracle``
command and the acceptance tests both use these.
"""
from __future__ import annotations

import math
import random
import statistics
import time
from dataclasses import dataclass, field
from fractions import Fraction

from .. import ids
from ..config import Config
from ..crypto import make_provider
from ..dds import Pht, probe_bound
from ..monitoring import Monitor, tree_oracle
from ..overlay import OverlayNode, closest_nodes_oracle
from ..sim import Network, Simulator
from ..storage import LocalDht, NotFound, StorageError, StorageService, make_object, run_sync


# ----------------------------------------------------------------------
# overlay

def build_overlay(n: int, seed: int, cfg: Config | None = None, settle_s: float = 600.0,
                  node_factory=None):
    """Sequentially joined, maintained overlay of ``n`` nodes."""
    cfg = cfg or Config()
    sim = Simulator(seed)
    net = Network(sim, (cfg.latency_min, cfg.latency_max), cfg.loss)
    nodes = []
    for i in range(n):
        node = OverlayNode(sim, net, ids.hash160(f"node:{seed}:{i}"), cfg)
        sim.run_process(node.join(nodes[0].desc if nodes else None))
        node.start_maintenance()
        if node_factory is not None:
            node_factory(node)
        nodes.append(node)
    sim.run(until=sim.now + int(settle_s * 1000))
    return sim, nodes


@dataclass
class RoutingReport:
    n: int
    lookups: int = 0
    agree: int = 0
    hops: list = field(default_factory=list)
    wall_s: float = 0.0

    @property
    def agreement(self) -> float:
        return self.agree / self.lookups if self.lookups else 1.0

    @property
    def mean_hops(self) -> float:
        return sum(self.hops) / len(self.hops) if self.hops else 0.0

    @property
    def max_hops(self) -> int:
        return max(self.hops, default=0)

    @property
    def hop_bound(self) -> int:
        return math.ceil(math.log2(self.n)) + 2

    @property
    def ok(self) -> bool:
        return self.agree == self.lookups and self.max_hops <= self.hop_bound


def routing_check(n: int = 64, keys: int = 256, seeds=range(10), cfg: Config | None = None,
                  settle_maint_rounds: int = 4) -> RoutingReport:
    """Lookups of random keys from random nodes against the brute-force closest node.

    The overlay settles for ``settle_maint_rounds`` maintenance periods after
    the last join, so every node has run at least that many rounds minus one.
    """
    cfg = cfg or Config()
    t0 = time.perf_counter()
    rep = RoutingReport(n)
    for seed in seeds:
        sim, nodes = build_overlay(n, seed, cfg, settle_s=settle_maint_rounds * cfg.maintenance_s)
        rng = random.Random(f"routing:{seed}")
        for _ in range(keys):
            key = rng.getrandbits(ids.ID_BITS)
            origin = rng.choice(nodes)
            desc, hops = sim.run_process(origin.lookup(key))
            rep.lookups += 1
            rep.agree += desc.node_id == closest_nodes_oracle(nodes, key, 1)[0]
            rep.hops.append(hops)
    rep.wall_s = time.perf_counter() - t0
    return rep


# ----------------------------------------------------------------------
# replication

@dataclass
class Host:
    node: OverlayNode
    storage: StorageService


def build_storage(n: int, seed: int, cfg: Config | None = None, settle_s: float = 120.0):
    cfg = cfg or Config()
    provider = make_provider("double", seed)
    hosts = []

    def attach(node):
        kp = provider.new_keypair()
        st = StorageService(node, kp, provider)
        st.start()
        hosts.append(Host(node, st))
    # the storage key pair and the node id are independent here; only the
    # overlay position matters for placement
    sim, _ = build_overlay(n, seed, cfg, settle_s, node_factory=attach)
    return sim, hosts, provider


def holders(hosts, fid: int, version: int = 1) -> list[Host]:
    """Live hosts holding ``fid`` at ``version`` or newer, directly or via a diversion pointer."""
    out = []
    for h in hosts:
        if not h.node.online:
            continue
        obj = h.storage.held(fid)
        if obj is not None and obj.version >= version:
            out.append(h)
    return out


def lost_objects(hosts, acked: dict[int, int]) -> list[int]:
    """Acknowledged object ids no live host holds any more (structural loss detector)."""
    return sorted(fid for fid, ver in acked.items() if not holders(hosts, fid, ver))


@dataclass
class DurabilityReport:
    seed: int
    acked: int = 0
    crashed: int = 0
    lost: list = field(default_factory=list)  # no live holder
    unreadable: list = field(default_factory=list)  # client get failed

    @property
    def ok(self) -> bool:
        return not self.lost and not self.unreadable


def durability_run(seed: int, n: int = 24, objects: int = 40, rounds: int = 5, max_crash: int = 3,
                   cfg: Config | None = None) -> DurabilityReport:
    """Store objects, then crash up to ``max_crash`` nodes before each maintenance round."""
    cfg = cfg or Config()
    sim, hosts, provider = build_storage(n, seed, cfg)
    rng = random.Random(f"durability:{seed}")
    rep = DurabilityReport(seed)
    acked: dict[int, int] = {}
    for j in range(objects):
        h = rng.choice(hosts)
        obj = make_object(h.storage.kp, provider, rng.getrandbits(ids.ID_BITS), "blob", rng.randbytes(64))
        try:
            sim.run_process(h.storage.put(obj))
        except StorageError:
            continue
        acked[obj.file_id] = obj.version
    rep.acked = len(acked)
    period = int(cfg.maintenance_s * 1000)
    for _ in range(rounds):
        live = [h for h in hosts if h.node.online]
        victims = rng.sample(live, min(rng.randint(0, max_crash), len(live) - 1))
        for h in victims:
            h.node.crash()
        rep.crashed += len(victims)
        sim.run(until=sim.now + period + 2 * cfg.rpc_timeout_ms)
    rep.lost = lost_objects(hosts, acked)
    reader = next(h for h in hosts if h.node.online)
    for fid in sorted(acked):
        try:
            got = sim.run_process(reader.storage.get(fid, fresh=True))
        except StorageError:
            got = None
        if got is None:
            rep.unreadable.append(fid)
    return rep


def holder_wipeout(seed: int, n: int = 16, cfg: Config | None = None) -> tuple[bool, bool]:
    """Crash every holder of one object at once.

    Returns ``(detected, unreadable)``: whether the loss detector flags the
    object and whether a client get fails to find it.
    """
    cfg = cfg or Config()
    sim, hosts, provider = build_storage(n, seed, cfg)
    h = hosts[0]
    obj = make_object(h.storage.kp, provider, ids.hash160(f"victim:{seed}"), "blob", b"payload")
    sim.run_process(h.storage.put(obj))
    survivors = [x for x in hosts if x.storage.held(obj.file_id) is None]
    for x in hosts:
        if x.storage.held(obj.file_id) is not None or x.storage.pointers.get(obj.file_id):
            x.node.crash()
    sim.run(until=sim.now + int(cfg.maintenance_s * 1000) * 2)
    detected = obj.file_id in lost_objects(hosts, {obj.file_id: obj.version})
    try:
        got = sim.run_process(survivors[0].storage.get(obj.file_id, fresh=True))
    except StorageError:
        got = None
    return detected, got is None


# ----------------------------------------------------------------------
# prefix hash tree

@dataclass
class PhtReport:
    seeds: int = 0
    ranges: int = 0
    mismatches: int = 0
    lookups: int = 0
    max_probes: int = 0
    max_gets: int = 0  # DHT reads per lookup, counted at the store
    bound: int = 0

    @property
    def ok(self) -> bool:
        return self.mismatches == 0 and max(self.max_probes, self.max_gets) <= self.bound


def pht_check(seeds=range(100), keys: int = 200, ranges: int = 50, D: int = 32, M: int = 4) -> PhtReport:
    provider = make_provider("double", 0)
    kp = provider.new_keypair()
    rep = PhtReport(bound=probe_bound(D))
    for seed in seeds:
        rng = random.Random(f"pht:{seed}")
        dht = LocalDht(provider)
        pht = Pht(dht.client(kp), kp, provider, f"idx{seed}", D=D, M=M)
        ref: dict[int, bytes] = {}
        for _ in range(keys):
            # mix uniform keys with clustered ones so some leaves split deep
            k = rng.getrandbits(D) if rng.random() < 0.7 else (rng.getrandbits(6) << (D - 6)) | rng.getrandbits(3)
            v = rng.randbytes(4)
            ref[k] = v
            run_sync(pht.insert(k, v))
        for _ in range(ranges):
            a, b = rng.getrandbits(D), rng.getrandbits(D)
            lo, hi = min(a, b), max(a, b)
            got = run_sync(pht.range(lo, hi))
            want = sorted((k, v) for k, v in ref.items() if lo <= k <= hi)
            rep.mismatches += got != want
            rep.ranges += 1
        for k in sorted(ref):
            before = dht.gets
            try:
                v = run_sync(pht.lookup(k))
            except NotFound:
                v = None
            rep.mismatches += v != ref[k]
            rep.lookups += 1
            rep.max_probes = max(rep.max_probes, pht.probes)
            rep.max_gets = max(rep.max_gets, dht.gets - before)
        rep.seeds += 1
    return rep


# ----------------------------------------------------------------------
# monitoring

SENSOR = "TEST_CONSTANT_SENSOR"


@dataclass
class MonitoringReport:
    n: int
    depth: int = 0
    ticks: int = 0
    count: int = 0
    exact: bool = False
    stddev_err: float = math.inf
    churn_ticks: int | None = None  # ticks to re-converge after churn, None = never

    @property
    def ok(self) -> bool:
        return self.count == self.n and self.exact and self.stddev_err <= 1e-9 and (
            self.churn_ticks is not None and self.churn_ticks <= 4)


def _tree_depth(parents: dict) -> int:
    depth = 0
    for n in parents:
        d, cur = 0, n
        while parents[cur] is not None:
            cur = parents[cur]
            d += 1
        depth = max(depth, d)
    return depth


def _root_view(monitors):
    roots = [m for m in monitors if m.node.online and m.is_root and m.view is not None]
    return max(roots, key=lambda m: m.view.time_ms).view if roots else None


def _matches(view, values) -> tuple[bool, float]:
    if view is None or SENSOR not in view.stats:
        return False, math.inf
    st = view.stats[SENSOR]
    exact = (st.count == len(values) and st.exact_sum == sum(values, Fraction(0))
             and st.min == float(min(values)) and st.max == float(max(values)))
    two_pass = statistics.pstdev([float(v) for v in values])
    return exact, abs(st.stddev - two_pass)


def monitoring_check(n: int = 64, seed: int = 0, churn: float = 0.1, cfg: Config | None = None,
                     max_churn_ticks: int = 8) -> MonitoringReport:
    """Constant per-node sensors; compare the root's view with direct aggregation."""
    cfg = cfg or Config()
    monitors: list[Monitor] = []
    values: dict[int, Fraction] = {}
    rng = random.Random(f"monitoring:{seed}")

    def attach(node):
        m = Monitor(node)
        v = Fraction(rng.randrange(1, 10_000), 8)
        values[node.node_id] = v
        m.add_sensor(SENSOR, lambda v=v: v)
        monitors.append(m)
    sim, nodes = build_overlay(n, seed, cfg, settle_s=60, node_factory=attach)
    rep = MonitoringReport(n)
    parents = tree_oracle([x.node_id for x in nodes])
    rep.depth = _tree_depth(parents)
    period = monitors[0].period_ms
    for m in monitors:
        m.start()
    rep.ticks = 2 * max(rep.depth, 1)
    sim.run(until=sim.now + rep.ticks * period)
    view = _root_view(monitors)
    rep.count = view.stats[SENSOR].count if view and SENSOR in view.stats else 0
    rep.exact, rep.stddev_err = _matches(view, list(values.values()))
    # churn: crash a fraction of the nodes and join as many new ones
    k = max(1, round(churn * n))
    for m in rng.sample([m for m in monitors if m.node.online], k):
        m.node.crash()
    def join(node, boot):
        yield from node.join(boot)
        node.start_maintenance()  # processes started before joining would die with the old epoch
        monitors_by_id[node.node_id].start()

    monitors_by_id = {}
    for i in range(k):
        node = OverlayNode(sim, nodes[0].net, ids.hash160(f"node:{seed}:new{i}"), cfg)
        boot = next(x for x in nodes if x.online)
        nodes.append(node)
        attach(node)
        monitors_by_id[node.node_id] = monitors[-1]
        sim.spawn(join(node, boot.desc))
    for tick in range(1, max_churn_ticks + 1):
        sim.run(until=sim.now + period)
        live = [values[m.node.node_id] for m in monitors if m.node.online]
        exact, err = _matches(_root_view(monitors), live)
        if exact and err <= 1e-9:
            rep.churn_ticks = tick
            break
    return rep


# ----------------------------------------------------------------------
# crypto envelope

@dataclass
class OverheadReport:
    sizes: list
    asym: list  # public-key encryption overhead per payload size
    sig: list  # signature length per payload size
    sym: list
    item: list  # sealed single-reader item size minus payload

    @property
    def ok(self) -> bool:
        return all(len(set(x)) == 1 for x in (self.asym, self.sig, self.sym, self.item))


def crypto_overhead(sizes=range(600, 2201, 100), provider_name: str = "ecc", seed: int = 0) -> OverheadReport:
    from ..secure_items import seal

    p = make_provider(provider_name, seed)
    owner, reader = p.new_keypair(), p.new_keypair()
    rng = random.Random(seed)
    rep = OverheadReport(list(sizes), [], [], [], [])
    for size in rep.sizes:
        msg = rng.randbytes(size)
        rep.asym.append(len(p.encrypt(reader.public_key, msg)) - size)
        rep.sig.append(len(p.sign(owner, msg)))
        rep.sym.append(len(p.sym_encrypt(p.new_sym_key(), msg)) - size)
        item = seal(msg, [2], owner, 1, p, {2: reader.public_key}.get)
        rep.item.append(len(item.encode()) - size)
    return rep


# ----------------------------------------------------------------------
# access control and item integrity

ROLES = ("owner", "friend1", "friend2", "stranger")
FRIENDS_OF_OWNER = {"owner", "friend1", "friend2"}


def expected_access(op: str, actor: str, reader: str | None = None, target: str | None = None) -> bool:
    """The access rules, stated independently of the code under test."""
    if op == "seal":  # actor seals for target, reader tries to open
        return reader in (actor, target)
    if op in ("open_private", "update", "tombstone"):
        return actor == "owner"
    if op in ("open_friends", "wall_append", "wall_read"):
        return actor in FRIENDS_OF_OWNER
    raise ValueError(op)


@dataclass
class AccessReport:
    cells: dict = field(default_factory=dict)  # (op, actor, reader, target) -> (expected, observed)

    @property
    def deviations(self) -> list:
        return [k for k, (e, o) in self.cells.items() if e != o]

    @property
    def ok(self) -> bool:
        return bool(self.cells) and not self.deviations


def _call(sim, peer, gen, limit_ms: int = 300_000):
    proc = peer.node.spawn(gen)
    sim.run(until=sim.now + limit_ms, stop=lambda: proc.done)
    if not proc.done:
        return False, None
    return proc.error is None, (proc.value if proc.error is None else proc.error)


def access_matrix(seed: int = 0, n: int = 8, cfg: Config | None = None) -> AccessReport:
    """Four principals (owner, two friends of the owner, a stranger) on a live network."""
    from ..secure_items import SecureStorageItem, _signed
    from ..storage import successor
    from .plan import Plan
    from .runner import Experiment

    exp = Experiment(n, Plan((), warmup_s=300, gap_s=0, friends="none"), seed, cfg)
    exp.setup()
    sim = exp.sim
    sim.run(until=300_000)
    peers = dict(zip(ROLES, exp.peers))
    owner = peers["owner"].user
    for role in ("friend1", "friend2"):
        _call(sim, peers[role], peers[role].user.friend_request(owner.user_id))
    poll_ms = int(exp.cfg.notify_poll_s * 1000)
    sim.run(until=sim.now + 4 * poll_ms)
    missing = {peers[r].user.user_id for r in ("friend1", "friend2")} - set(owner.friends)
    if missing:
        raise RuntimeError("friendship setup did not complete")

    rep = AccessReport()

    def record(op, actor, observed, reader=None, target=None):
        rep.cells[(op, actor, reader, target)] = (expected_access(op, actor, reader, target), observed)

    def reads(role, fid, want: bytes) -> bool:
        ok, got = _call(sim, peers[role], peers[role].user.read_item(fid, fresh=True))
        return ok and got == want

    def current(fid):
        _, obj = _call(sim, peers["owner"], peers["owner"].storage.get(fid, fresh=True))
        return obj

    # seal: every actor seals for every target, every principal tries to open
    for actor in ROLES:
        for target in ROLES:
            a = peers[actor].user
            fid = ids.hash160(f"acl-seal:{seed}:{actor}:{target}")
            payload = f"{actor}->{target}".encode()
            readers = [peers[target].user.user_id]
            _call(sim, peers[actor], a._ensure(readers))
            ok, _ = _call(sim, peers[actor], a.put_item(fid, payload, readers))
            if not ok:
                raise RuntimeError("seal setup failed")
            for reader in ROLES:
                record("seal", actor, reads(reader, fid, payload), reader, target)

    # open: an owner-only item and an item for the owner's friends
    fid_private = ids.hash160(f"acl-private:{seed}")
    fid_friends = ids.hash160(f"acl-friends:{seed}")
    _call(sim, peers["owner"], owner.put_item(fid_private, b"private", [owner.user_id]))
    _call(sim, peers["owner"], owner.put_item(fid_friends, b"for friends", owner._friend_readers()))
    for actor in ROLES:
        record("open_private", actor, reads(actor, fid_private, b"private"))
        record("open_friends", actor, reads(actor, fid_friends, b"for friends"))

    # update and tombstone: each actor attacks its own fresh owner item
    for actor in ROLES:
        p = peers[actor]
        fid = ids.hash160(f"acl-update:{seed}:{actor}")
        _call(sim, peers["owner"], owner.put_item(fid, b"v1", owner._friend_readers()))
        new = f"rewritten by {actor}".encode()

        def attempt_update(p=p, fid=fid, new=new):
            old = yield from p.storage.require(fid, fresh=True)
            yield from p.storage.put(successor(old, p.kp, p.provider, p.user.seal(new, owner._friend_readers())))
        _call(sim, p, attempt_update())
        record("update", actor, reads("owner", fid, new))

        fid = ids.hash160(f"acl-tomb:{seed}:{actor}")
        _call(sim, peers["owner"], owner.put_item(fid, b"v1", owner._friend_readers()))

        def attempt_tombstone(p=p, fid=fid):
            old = yield from p.storage.require(fid, fresh=True)
            # a forged tombstone: well formed, but signed by the actor
            item = _signed(p.kp, (), b"", True, p.provider)
            yield from p.storage.put(successor(old, p.kp, p.provider, item.encode()))
        _call(sim, p, attempt_tombstone())
        obj = current(fid)
        record("tombstone", actor, obj is not None and SecureStorageItem.decode(obj.payload).tombstone)

    # wall: append to the owner's wall, then read the owner's own post
    ok, posted = _call(sim, peers["owner"], owner.wall_post(owner.user_id, b"owner post"))
    if not ok:
        raise RuntimeError("owner could not post on its own wall")
    owner_eid = posted[2]
    for actor in ROLES:
        p = peers[actor]
        ok, res = _call(sim, p, p.user.wall_post(owner.user_id, f"post by {actor}".encode()))
        _, wall = _call(sim, peers["owner"], owner.wall_entries(owner.user_id, fresh=True))
        on_wall = ok and any(e[1] == res[2] and e[2] == p.kp.public_key for e in wall or ())
        record("wall_append", actor, on_wall)
        ok, seen = _call(sim, p, p.user.wall_entries(owner.user_id, fresh=True))
        record("wall_read", actor, ok and any(e[1] == owner_eid for e in seen))
    return rep


@dataclass
class FuzzReport:
    mutations: int = 0
    rejected: int = 0
    intact: int = 0  # accepted and the payload is the original one
    silent: int = 0  # accepted with a different payload

    @property
    def ok(self) -> bool:
        return self.mutations > 0 and self.silent == 0


def _mutate(data: bytes, rng: random.Random, pool: list[bytes]) -> bytes:
    buf = bytearray(data)
    op = rng.randrange(6)
    if op == 0:  # flip one bit
        i = rng.randrange(len(buf))
        buf[i] ^= 1 << rng.randrange(8)
    elif op == 1:  # overwrite a run of bytes
        i = rng.randrange(len(buf))
        for j in range(i, min(len(buf), i + rng.randint(1, 16))):
            buf[j] = rng.randrange(256)
    elif op == 2:
        del buf[rng.randrange(len(buf)):]
    elif op == 3:
        buf += rng.randbytes(rng.randint(1, 8))
    elif op == 4:  # splice a region of another valid item
        other = rng.choice(pool)
        i, j = sorted(rng.sample(range(min(len(buf), len(other))), 2))
        buf[i:j] = other[i:j]
    else:  # drop a byte
        del buf[rng.randrange(len(buf))]
    return bytes(buf)


def integrity_fuzz(mutations: int = 1000, seed: int = 0, provider_name: str = "ecc") -> FuzzReport:
    """Mutate sealed items and check every accepted read yields the original payload."""
    from ..secure_items import (AccessDenied, IntegrityError, Keyring, SecureStorageItem, open_item,
                                seal)

    p = make_provider(provider_name, seed)
    rng = random.Random(f"fuzz:{seed}")
    owner, reader = p.new_keypair(), p.new_keypair()
    pubs = {1: owner.public_key, 2: reader.public_key}
    keyring = Keyring()
    keyring.add(2, reader)
    originals = []
    for i in range(8):
        payload = rng.randbytes(rng.randint(16, 400))
        originals.append((payload, seal(payload, [2], owner, 1, p, pubs.get).encode()))
    pool = [enc for _, enc in originals]
    rep = FuzzReport()
    while rep.mutations < mutations:
        payload, enc = rng.choice(originals)
        bad = _mutate(enc, rng, pool)
        if bad == enc:
            continue
        rep.mutations += 1
        try:
            item = SecureStorageItem.decode(bad)
            got = open_item(item, keyring, p)
        except (IntegrityError, AccessDenied, ValueError):
            rep.rejected += 1
            continue
        if got == payload:
            rep.intact += 1
        else:
            rep.silent += 1
    return rep
