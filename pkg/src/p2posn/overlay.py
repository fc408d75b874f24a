"""Prefix-routing ring overlay with bucketed rows, leaf sets and parallel
iterative lookups.

Rows use one-bit digits: row ``i`` holds strong contacts sharing exactly
``i`` leading bits with the local id.  Weak nodes only ever enter leaf sets,
so they are never used as intermediate hops.
"""
from __future__ import annotations

import bisect
from types import GeneratorType
from collections import OrderedDict

from . import ids
from .config import Config
from .ids import ID_BITS, closeness
from .metrics import Recorder
from .sim import Descriptor, Endpoint, Future, Network, NodeOffline, RpcTimeout, Simulator

HOPCOUNT = "GLOBAL_STORAGEDISPATCHER_MESSAGE_HOPCOUNT"
REDUNDANT = "GLOBAL_NETWORK_PASTRY_REDUNDANT_REPLIES"


class LookupFailed(Exception):
    pass


class RoutingError(Exception):
    pass


class JoinFailed(Exception):
    pass


class OverlayNode(Endpoint):
    SUSPECT_MS = 60_000
    system_methods = frozenset(("ping", "find", "leafset", "hello", "bye"))

    def __init__(self, sim: Simulator, net: Network, node_id: int, cfg: Config | None = None,
                 weak: bool = False):
        super().__init__(sim, net, node_id, weak)
        self.cfg = cfg or Config()
        self.default_timeout = self.cfg.rpc_timeout_ms
        self.weak = weak
        self.half = self.cfg.leaf_size // 2
        self.rows: dict[int, OrderedDict] = {}
        self.row_entries = 0
        self._known_ver = 0
        self._leaf_ver = -1
        self._leaf_cache = None
        self._cl_cache: dict = {}
        self._cl_version = -1
        self.known: dict[int, Descriptor] = {}
        self.sorted_all: list[int] = []
        self.sorted_strong: list[int] = []
        self.suspect: dict[int, int] = {}
        self._evicting: set[int] = set()
        self.listeners: list = []
        self._notify_pending = False
        self.routing_version = 0
        self.metrics = Recorder()
        self.load_fn = lambda: 0
        self.neighbor_load: dict[int, int] = {}
        self.maint_rounds = 0
        self.handlers.update(ping=self._h_ping, find=self._h_find, leafset=self._h_leafset,
                             hello=self._h_hello, bye=self._h_bye)

    def __repr__(self):
        return f"<node {ids.short(self.node_id)}{' weak' if self.weak else ''}>"

    # ------------------------------------------------------------------
    # routing state
    def row_of(self, other: int) -> int:
        return ID_BITS - (self.node_id ^ other).bit_length()  # common prefix length

    @property
    def succ(self) -> list[Descriptor]:
        return self._leaf()[0]

    @property
    def pred(self) -> list[Descriptor]:
        return self._leaf()[1]

    def leaf_set(self) -> list[Descriptor]:
        return self._leaf()[2]

    def leaf_ids(self) -> frozenset:
        return self._leaf()[3]

    def _leaf(self):
        """Leaf set = the ``half`` nearest known ids on each side of the ring."""
        if self._leaf_ver == self._known_ver:
            return self._leaf_cache
        ring = self.sorted_all
        n = len(ring)
        pos = bisect.bisect_right(ring, self.node_id)
        m = min(self.half, n)
        succ = [self.known[ring[(pos + j) % n]] for j in range(m)]
        pred = [self.known[ring[(pos - 1 - j) % n]] for j in range(m)]
        both = {}
        for d in pred + succ:
            both.setdefault(d.node_id, d)
        self._leaf_cache = (succ, pred, list(both.values()), frozenset(both))
        self._leaf_ver = self._known_ver
        return self._leaf_cache

    def row_contacts(self, row: int) -> list[Descriptor]:
        return list(self.rows.get(row, {}).values())

    def _in_rows(self, nid: int) -> bool:
        b = self.rows.get(self.row_of(nid))
        return b is not None and nid in b

    def _index(self, d: Descriptor):
        self.known[d.node_id] = d
        bisect.insort(self.sorted_all, d.node_id)
        if not d.weak:
            bisect.insort(self.sorted_strong, d.node_id)
        self._known_ver += 1

    def _unindex(self, nid: int):
        d = self.known.pop(nid, None)
        if d is None:
            return
        del self.sorted_all[bisect.bisect_left(self.sorted_all, nid)]
        if not d.weak:
            del self.sorted_strong[bisect.bisect_left(self.sorted_strong, nid)]
        self._known_ver += 1

    def add_contact(self, d: Descriptor, verified: bool = True):
        nid = d.node_id
        if nid in self.known:  # the common case: refresh recency only
            if verified:
                if self.suspect:
                    self.suspect.pop(nid, None)
                if not d.weak:
                    bucket = self.rows.get(self.row_of(nid))
                    if bucket is not None and nid in bucket:
                        bucket.move_to_end(nid)
            return
        if nid == self.node_id:
            return
        if verified:
            self.suspect.pop(nid, None)
        elif nid in self.suspect:
            if self.suspect[nid] > self.sim.now:
                return
            del self.suspect[nid]
        in_rows = False
        if not d.weak:
            row = self.row_of(nid)
            bucket = self.rows.get(row)
            if bucket is None:
                bucket = self.rows[row] = OrderedDict()
            if len(bucket) < self.cfg.bucket_cap or self.row_entries < self.cfg.table_capacity:
                bucket[nid] = d
                self.row_entries += 1
                in_rows = True
            elif verified and row not in self._evicting:
                self._evicting.add(row)
                self.spawn(self._evict(row, d))
        old_leaf = self.leaf_ids()
        self._index(d)
        new_leaf = self.leaf_ids()
        if nid not in new_leaf:
            if not in_rows:
                self._unindex(nid)
            return
        for gone in old_leaf - new_leaf:
            if not self._in_rows(gone):
                self._unindex(gone)
        self._changed()

    def _evict(self, row: int, newcomer: Descriptor):
        bucket = self.rows[row]
        incumbent = next(iter(bucket.values()))
        try:
            yield self.rpc(incumbent, "ping")
            bucket.move_to_end(incumbent.node_id)
        except (RpcTimeout, NodeOffline):
            self.remove_contact(incumbent.node_id)
            if len(bucket) < self.cfg.bucket_cap and newcomer.node_id not in self.known:
                bucket[newcomer.node_id] = newcomer
                self.row_entries += 1
                self._index(newcomer)
                self._changed()
        finally:
            self._evicting.discard(row)

    def remove_contact(self, nid: int):
        if nid == self.node_id:
            return
        self.suspect[nid] = self.sim.now + self.SUSPECT_MS
        bucket = self.rows.get(self.row_of(nid))
        if bucket is not None and bucket.pop(nid, None) is not None:
            self.row_entries -= 1
        was_leaf = nid in self.leaf_ids()
        self._unindex(nid)
        self.neighbor_load.pop(nid, None)
        if was_leaf:
            self._changed()

    def _changed(self):
        self.routing_version += 1
        if self.listeners and not self._notify_pending:
            self._notify_pending = True
            self.sim.call_soon(self._notify)

    def _notify(self):
        self._notify_pending = False
        if self.online:
            for fn in self.listeners:
                fn()

    def on_contact(self, desc):
        self.add_contact(desc, verified=True)

    def on_timeout(self, dest):
        self.remove_contact(dest.node_id)

    # ------------------------------------------------------------------
    # local views
    def closest_local(self, key: int, n: int, include_weak: bool = False) -> list[Descriptor]:
        """The ``n`` most responsible known nodes for ``key``, self included."""
        ck = (key, n, include_weak)
        if self._cl_version != self._known_ver:  # any contact added or dropped
            self._cl_cache.clear()
            self._cl_version = self._known_ver
        hit = self._cl_cache.get(ck)
        if hit is not None:
            return list(hit)
        out = self._closest_local(key, n, include_weak)
        if len(self._cl_cache) > 4096:
            self._cl_cache.clear()
        self._cl_cache[ck] = tuple(out)
        return out

    def _closest_local(self, key: int, n: int, include_weak: bool) -> list[Descriptor]:
        pool = self.sorted_all if include_weak else self.sorted_strong
        extra = (self.node_id,) if include_weak or not self.weak else ()
        out = []
        for i in ids.window_closest(pool, key, n, extra):
            out.append(self.desc if i == self.node_id else self.known[i])
        return out

    def is_responsible(self, key: int, include_weak: bool = False) -> bool:
        if self.weak and not include_weak:
            return False
        best = self.closest_local(key, 1, include_weak)
        return bool(best) and best[0].node_id == self.node_id

    def replica_targets(self, key: int, k: int) -> list[Descriptor]:
        return self.closest_local(key, k, include_weak=False)

    # ------------------------------------------------------------------
    # handlers
    def _h_ping(self, src):
        return self.load_fn()

    def _h_find(self, src, key, include_weak):
        return (self.closest_local(key, self.cfg.lookup_width, include_weak),
                self.is_responsible(key, include_weak))

    def _h_leafset(self, src):
        return self.leaf_set()

    def _h_hello(self, src):
        return self.leaf_set()

    def _h_bye(self, src):
        self.remove_contact(src.node_id)
        self.suspect.pop(src.node_id, None)

    # ------------------------------------------------------------------
    # lookup and routing
    def lookup(self, key: int, include_weak: bool = False, record: bool = True,
               exclude_self: bool = False):
        """Iterative parallel lookup; returns ``(descriptor, hops)``.

        Each round queries up to ``alpha`` of the closest unqueried
        candidates.  The lookup ends once the best candidate has answered
        and claims responsibility.  Hops is the round in which that node was
        first contacted (0 when the origin itself is responsible).
        """
        lk = _Lookup(self, key, include_weak, exclude_self)
        while True:
            order = lk.ordered()
            if not order:
                raise LookupFailed(key)
            if lk.settled(order):
                break
            batch = []
            for i in order:
                if i not in lk.status:
                    if lk.cands[i].weak and i != order[0]:
                        continue
                    batch.append(lk.cands[i])
                    if len(batch) == self.cfg.alpha:
                        break
            if not batch:
                if not lk.any_pending():
                    break
                yield lk.wait(None)
                continue
            lk.rnd += 1
            rnd = lk.rnd
            lk.pending[rnd] = len(batch)
            for d in batch:
                lk.status[d.node_id] = 1
                lk.first_round[d.node_id] = rnd
                f = self.rpc(d, "find", key, include_weak)
                f.add_callback(lambda fut, nid=d.node_id, r=rnd: lk.on_reply(fut, nid, r))
            yield lk.wait(rnd)
        lk.done = True
        best = lk.ordered()[0]
        hops = lk.first_round.get(best, lk.rnd)
        if record:
            self.metrics.sample(HOPCOUNT, hops)
        return lk.cands[best], hops

    def call_local(self, method: str, *args):
        out = self.handlers[method](self.desc, *args)
        if type(out) is GeneratorType:
            out = yield from out
        return out

    def route(self, key: int, method: str, *args, include_weak: bool = False,
              timeout: int | None = None, retries: int = 3):
        """Deliver a request to the node responsible for ``key``.

        Returns ``(descriptor, reply)``.  Unreachable destinations trigger a
        fresh lookup, up to ``retries`` times.
        """
        last = None
        for _ in range(retries + 1):
            try:
                dest, _hops = yield from self.lookup(key, include_weak)
            except LookupFailed as exc:
                last = exc
                continue
            if dest.node_id == self.node_id:
                reply = yield from self.call_local(method, *args)
                return dest, reply
            try:
                reply = yield self.rpc(dest, method, *args, timeout=timeout)
                return dest, reply
            except (RpcTimeout, NodeOffline) as exc:
                last = exc
                if not self.online:
                    break
        raise RoutingError(f"could not route to {ids.short(key)}: {last!r}")

    # ------------------------------------------------------------------
    # membership
    def join(self, bootstrap: Descriptor | None):
        self.go_online()
        if bootstrap is None:
            return True
        try:
            yield self.rpc(bootstrap, "ping")
        except (RpcTimeout, NodeOffline) as exc:
            self.go_offline()
            raise JoinFailed("bootstrap unreachable") from exc
        yield from self.lookup(self.node_id, include_weak=True, record=False, exclude_self=True)
        sets = yield [self.rpc(d, "leafset") for d in self.leaf_set()]
        for res in sets:
            if isinstance(res, list):
                for d in res:
                    self.add_contact(d, verified=False)
        yield from self.refresh_rows()
        yield [self.rpc(d, "hello") for d in list(self.known.values())]
        return True

    def max_row(self) -> int:
        if not self.known:
            return 0
        return min(159, max(self.row_of(i) for i in self.known) + 1)

    def refresh_rows(self):
        for row in range(self.max_row() + 1):
            target = ids.random_id_in_row(self.node_id, row, self.sim.rng.getrandbits(160))
            try:
                yield from self.lookup(target, record=False)
            except LookupFailed:
                pass

    def leave(self):
        """Graceful departure: tell the leaf set, then go offline."""
        for d in self.leaf_set():
            self.rpc(d, "bye")
        self.go_offline()

    def crash(self):
        self.go_offline()

    def go_offline(self):
        super().go_offline()
        self._evicting.clear()

    def start_maintenance(self):
        self.spawn(self._maintenance_loop())

    def _maintenance_loop(self):
        period = int(self.cfg.maintenance_s * 1000)
        yield self.sim.sleep(self.sim.rng.randint(0, period))
        while True:
            yield from self.maintain_once()
            yield self.sim.sleep(period)

    def maintain_once(self):
        self.maint_rounds += 1
        leaf = self.leaf_set()
        loads = yield [self.rpc(d, "ping") for d in leaf]
        lost = False
        for d, res in zip(leaf, loads):
            if isinstance(res, Exception):
                lost = True
            else:
                self.neighbor_load[d.node_id] = res
        if lost or len(self.succ) < self.half or len(self.pred) < self.half:
            asks = [s[-1] for s in (self.succ, self.pred) if s]
            sets = yield [self.rpc(d, "leafset") for d in asks]
            for res in sets:
                if isinstance(res, list):
                    for d in res:
                        self.add_contact(d, verified=False)
        row = self.sim.rng.randint(0, self.max_row())
        target = ids.random_id_in_row(self.node_id, row, self.sim.rng.getrandbits(160))
        try:
            yield from self.lookup(target, record=False)
        except LookupFailed:
            pass


class _Lookup:
    __slots__ = ("node", "key", "include_weak", "cands", "status", "claims", "first_round",
                 "rnd", "pending", "waiter", "wait_round", "done", "rank")

    def __init__(self, node: OverlayNode, key: int, include_weak: bool, exclude_self: bool):
        self.node = node
        self.key = key
        self.include_weak = include_weak
        self.cands: dict[int, Descriptor] = {}
        self.status: dict[int, int] = {}  # 1 pending, 2 answered, 3 failed
        self.claims: dict[int, bool] = {}
        self.first_round: dict[int, int] = {}
        self.rnd = 0
        self.pending: dict[int, int] = {}
        self.waiter: Future | None = None
        self.wait_round = None
        self.done = False
        me = node.node_id
        for d in node.closest_local(key, node.cfg.lookup_width, include_weak):
            self.cands[d.node_id] = d
        if exclude_self:
            self.cands.pop(me, None)
        self.rank = {i: closeness(i, key) for i in self.cands}
        self.rank[me] = closeness(me, key)
        if exclude_self:
            self.status[me] = 3
        elif not node.weak or include_weak:
            self.cands[me] = node.desc
            self.status[me] = 2
            self.claims[me] = node.is_responsible(key, include_weak)
            self.first_round[me] = 0

    def ordered(self):
        st = self.status
        return sorted((i for i in self.cands if st.get(i) != 3), key=self.rank.__getitem__)

    def settled(self, order):
        best = order[0]
        return self.status.get(best) == 2 and bool(self.claims.get(best))

    def any_pending(self):
        return any(n > 0 for n in self.pending.values())

    def wait(self, rnd):
        self.waiter = Future()
        self.wait_round = rnd
        return self.waiter

    def on_reply(self, fut, nid, rnd):
        node = self.node
        if self.done:
            node.metrics.count(REDUNDANT)
            return
        self.pending[rnd] -= 1
        if fut.error is not None:
            self.status[nid] = 3
        else:
            self.status[nid] = 2
            found, claim = fut.value
            self.claims[nid] = claim
            me = node.node_id
            for d in found:
                if d.node_id not in self.cands and (self.include_weak or not d.weak):
                    self.cands[d.node_id] = d
                    self.rank[d.node_id] = closeness(d.node_id, self.key)
                if d.node_id != me:
                    node.add_contact(d, verified=False)
        w = self.waiter
        if w is not None and not w.done:
            if self.wait_round is None or self.pending[self.wait_round] == 0:
                w.set_result(None)
            else:
                order = self.ordered()
                if not order or self.settled(order):
                    w.set_result(None)


def closest_nodes_oracle(nodes, key: int, k: int) -> list[int]:
    """Brute-force top-``k`` strong node ids among live ``nodes``."""
    return ids.brute_closest([n.node_id for n in nodes if n.online and not n.weak], key, k)
