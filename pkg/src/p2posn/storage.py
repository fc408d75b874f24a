"""Replicated DHT storage.

Every object carries an owner public key, a version counter and a proof:
the writer's signature over the object's metadata and content hash.  The
write rules live in :func:`check_write` and are shared by the in-memory
:class:`LocalDht` and the simulated :class:`StorageService`:

* the first write of an id is free and fixes its owner,
* later writes must bump the version by exactly one (compare-and-swap),
* the owner may always write; for ``item`` objects the new payload must be
  a secure item signed by the same owner,
* non-owners may write only to ``append`` objects (if listed as appenders
  and the kind-specific extension check passes) or ``open`` objects,
* overwriting a ``mapping`` object requires a challenge-response proving
  possession of the private key of the current owner,
* deletes are owner-only and leave a deleted marker behind.
"""
from __future__ import annotations

import math
import struct
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable

from . import ids
from .crypto import CryptoProvider, DecryptionError, KeyPair
from .secure_items import IntegrityError, SecureStorageItem, validate_replacement
from .sim import Descriptor, Future, NodeOffline, RpcTimeout

ANY = "*"

STORETIME = "GLOBAL_STORAGEDISPATCHER_STORETIME"
RETRIEVETIME = "GLOBAL_STORAGEDISPATCHER_RETRIEVETIME"
DDS_RATE = "GLOBAL_STORAGEDISPATCHER_STORAGE_RETRIEVED_DDS_DATA_RATE"
LOCAL_OBJECTS = "GLOBAL_STORAGEDISPATCHER_NUM_STORED_LOCAL_OBJECTS"
INSTORAGE = "GLOBAL_STORAGEDISPATCHER_NUMINSTORAGE_ELEMENTS"
REPLICATIONS = "GLOBAL_STORAGEDISPATCHER_NUM_STORED_REPLICATIONS"
CACHE_HITS = "GLOBAL_STORAGEDISPATCHER_CACHE_HITS"
REDIRECTS = "GLOBAL_STORAGEDISPATCHER_REDIRECTED_REQUESTS"
DIVERSIONS = "GLOBAL_STORAGEDISPATCHER_REPLICA_DIVERSIONS"

DDS_KINDS = ("dds-root", "dds-bucket", "pht-node")


class StorageError(Exception):
    pass


class StorageRejected(StorageError):
    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(reason)


class Conflict(StorageRejected):
    """Version check failed: someone else wrote first."""


class StorageFull(StorageRejected):
    pass


class NotFound(StorageError):
    pass


@dataclass(frozen=True)
class StoredObject:
    file_id: int
    kind: str
    payload: bytes
    owner: int
    version: int = 1
    policy: str = "owner"  # owner | append | open
    appenders: tuple | str = ()
    writer: int = 0
    proof: bytes = field(default=b"", repr=False)
    deleted: bool = False
    content_hash: int = field(default=0, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "content_hash", ids.hash160(self.payload))

    def statement(self) -> bytes:
        app = b"*" if self.appenders == ANY else b"".join(ids.to_bytes(a) for a in self.appenders)
        return b"".join((
            b"obj1", ids.to_bytes(self.file_id), self.kind.encode(), b"\x00",
            struct.pack(">Q", self.version), ids.to_bytes(self.content_hash),
            self.policy.encode(), b"\x00", app, b"\x00", ids.to_bytes(self.owner),
            b"\x01" if self.deleted else b"\x00"))

    def digest(self) -> tuple[int, int, int, int]:
        # the writer matters: two appenders can produce byte-identical payloads
        return (self.file_id, self.version, self.content_hash, self.writer)

    def wire_size(self) -> int:
        n = 0 if self.appenders == ANY else 20 * len(self.appenders)
        return len(self.payload) + len(self.proof) + 80 + n


def make_object(kp: KeyPair, provider: CryptoProvider, file_id: int, kind: str, payload: bytes, *,
                owner: int | None = None, version: int = 1, policy: str = "owner",
                appenders: tuple | str = (), deleted: bool = False) -> StoredObject:
    if appenders != ANY:
        appenders = tuple(sorted(set(appenders)))
    obj = StoredObject(file_id, kind, payload, kp.public_key if owner is None else owner, version,
                       policy, appenders, kp.public_key, b"", deleted)
    return replace(obj, proof=provider.sign(kp, obj.statement()))


def successor(old: StoredObject, kp: KeyPair, provider: CryptoProvider, payload: bytes, *,
              deleted: bool = False, **changes) -> StoredObject:
    """The next version of ``old`` written by ``kp``."""
    fields_ = dict(owner=old.owner, policy=old.policy, appenders=old.appenders)
    fields_.update(changes)
    return make_object(kp, provider, old.file_id, old.kind, payload, version=old.version + 1,
                       deleted=deleted, **fields_)


def proof_ok(obj: StoredObject, provider: CryptoProvider) -> bool:
    return provider.verify(obj.writer, obj.statement(), obj.proof)


# kind -> fn(old, new, provider, by_owner) -> bool; extra rules for updates
EXTENSIONS: dict[str, Callable[[StoredObject, StoredObject, CryptoProvider, bool], bool]] = {}
# kind -> fn(new, provider) -> bool; lets a non-owner create an object of that kind
CREATE_CHECKS: dict[str, Callable[[StoredObject, CryptoProvider], bool]] = {}


def _item_ok(obj: StoredObject, old: StoredObject | None, provider) -> bool:
    try:
        new_item = SecureStorageItem.decode(obj.payload)
    except IntegrityError:
        return False
    if new_item.owner_pub != obj.owner:
        return False
    if old is None or old.deleted:
        from .secure_items import verify
        return verify(new_item, provider)
    try:
        old_item = SecureStorageItem.decode(old.payload)
    except IntegrityError:
        return False
    return validate_replacement(old_item, new_item, provider)


def check_write(old: StoredObject | None, new: StoredObject, provider: CryptoProvider) -> str:
    """Decide a write against the currently stored object.

    Returns ``"accept"``, ``"same"`` (idempotent re-insert) or
    ``"challenge"`` (accept only after the writer proves it holds the
    current owner's private key).  Raises :class:`StorageRejected`.
    """
    if not proof_ok(new, provider):
        raise StorageRejected("bad proof")
    if old is not None and old.digest() == new.digest() and old.deleted == new.deleted:
        return "same"
    if old is None or (old.deleted and new.version == old.version + 1 and new.writer == old.owner):
        if old is None and new.version != 1:
            raise Conflict(f"no object, expected version 1 got {new.version}")
        if new.deleted:
            raise StorageRejected("delete of missing object")
        if new.writer != new.owner:
            check = CREATE_CHECKS.get(new.kind)
            if old is None and check is not None and check(new, provider):
                return "accept"
            raise StorageRejected("first write must be signed by the owner")
        if new.kind == "item" and not _item_ok(new, None, provider):
            raise StorageRejected("payload is not a valid item of the owner")
        return "accept"
    if old.deleted:
        raise StorageRejected("object deleted")
    if new.version != old.version + 1:
        raise Conflict(f"expected version {old.version + 1} got {new.version}")
    if new.kind != old.kind:
        raise StorageRejected("kind change")
    if new.kind == "mapping":
        return "challenge"
    if new.owner != old.owner:
        raise StorageRejected("owner change")
    check = EXTENSIONS.get(new.kind)
    if new.writer == old.owner:
        if new.kind == "item" and not new.deleted and not _item_ok(new, old, provider):
            raise StorageRejected("replacement item not signed by owner")
        if check is not None and not new.deleted and not check(old, new, provider, True):
            raise StorageRejected("owner update breaks the entry rules")
        return "accept"
    if new.deleted:
        raise StorageRejected("only the owner may delete")
    if (new.policy, new.appenders) != (old.policy, old.appenders):
        raise StorageRejected("only the owner may change access rules")
    if old.policy == "open":
        return "accept"
    if old.policy == "append" and (old.appenders == ANY or new.writer in old.appenders):
        if check is not None and check(old, new, provider, False):
            return "accept"
        raise StorageRejected("append check failed")
    raise StorageRejected("writer is not the owner")


def check_repair(old: StoredObject | None, new: StoredObject, provider: CryptoProvider) -> bool:
    """Acceptance of a replica copy pushed during repair (versions may jump)."""
    if old is not None and new.version <= old.version:
        return False
    if not proof_ok(new, provider):
        return False
    if old is None:
        return True
    if new.kind == "mapping":
        return True
    if new.owner != old.owner:
        return False
    if new.writer == new.owner or new.policy == "open":
        return True
    return new.policy == "append" and (new.appenders == ANY or new.writer in new.appenders)


def run_sync(gen):
    """Drive a storage generator that must complete without waiting."""
    try:
        y = next(gen)
    except StopIteration as stop:
        return stop.value
    raise RuntimeError(f"generator blocked on {y!r}")


class LocalDht:
    """Single-process store with the same write rules and client API."""

    def __init__(self, provider: CryptoProvider, challenge_keys: Callable[[int], list[KeyPair]] | None = None):
        self.provider = provider
        self.objects: dict[int, StoredObject] = {}
        self.gets = 0
        self.puts = 0
        # claimant pub -> keys it holds; stands in for the network challenge
        self.challenge_keys = challenge_keys or (lambda pub: [])

    def client(self, kp: KeyPair) -> "LocalClient":
        return LocalClient(self, kp)

    def apply(self, obj: StoredObject):
        old = self.objects.get(obj.file_id)
        verdict = check_write(old, obj, self.provider)
        if verdict == "challenge":
            nonce = ids.to_bytes(ids.hash160(b"nonce" + obj.proof))
            ct = self.provider.encrypt(old.owner, nonce)
            answer = None
            for kp in self.challenge_keys(obj.writer):
                try:
                    answer = self.provider.decrypt(kp, ct)
                    break
                except DecryptionError:
                    continue
            if answer != nonce:
                raise StorageRejected("challenge failed")
        if verdict != "same":
            self.objects[obj.file_id] = obj
        return verdict


class LocalClient:
    def __init__(self, dht: LocalDht, kp: KeyPair):
        self.dht = dht
        self.kp = kp
        self.provider = dht.provider

    def get(self, file_id: int, fresh: bool = False):
        self.dht.gets += 1
        obj = self.dht.objects.get(file_id)
        if obj is not None and obj.kind == "redirect":
            obj = self.dht.objects.get(ids.from_bytes(obj.payload))
        if obj is None or obj.deleted:
            return None
        return obj
        yield  # pragma: no cover - makes this a generator

    def put(self, obj: StoredObject):
        self.dht.puts += 1
        self.dht.apply(obj)
        return [self.kp.public_key]
        yield  # pragma: no cover


@dataclass
class Receipt:
    node_id: int
    file_id: int
    version: int
    signature: bytes

    def wire_size(self):
        return 60 + len(self.signature)


def receipt_statement(node_id: int, obj: StoredObject) -> bytes:
    return b"rcpt" + ids.to_bytes(node_id) + ids.to_bytes(obj.file_id) + struct.pack(">Q", obj.version)


def salted_id(file_id: int, salt: int) -> int:
    return ids.hash160(ids.to_bytes(file_id) + struct.pack(">I", salt))


class StorageService:
    """Storage layer of one simulated node."""

    MAX_SALTS = 3

    def __init__(self, node, kp: KeyPair, provider: CryptoProvider):
        self.node = node
        self.sim = node.sim
        self.cfg = node.cfg
        self.kp = kp
        self.provider = provider
        self.k = self.cfg.k
        self.ttl_ms = int(self.cfg.cache_ttl_s * 1000)
        self.store: dict[int, StoredObject] = {}
        self.role: dict[int, str] = {}  # P primary, R replica, D diverted-in
        self.diverted_for: dict[int, int] = {}
        self.pointers: dict[int, tuple[Descriptor, StoredObject]] = {}
        self.guards: dict[int, tuple[Descriptor, StoredObject]] = {}
        self.cache: dict[int, tuple[StoredObject, int]] = {}
        self.receivers: dict[int, list[Descriptor]] = {}
        self.rr: dict[int, int] = {}
        self.req_times: dict[int, deque] = {}
        self.served_direct = 0
        self.locks: dict[int, Future] = {}
        self.targets: dict[int, tuple] = {}
        self.targets_ver = -1
        self.unsettled_until = 0
        self.syncing = False
        self.n_role = {"P": 0, "R": 0, "D": 0}
        self.challenge_keys: list[KeyPair] = [kp]
        self.challenges_issued = 0
        m = node.metrics
        m.gauge(LOCAL_OBJECTS, lambda: len(self.store))
        m.gauge(INSTORAGE, lambda: self.n_role["P"])
        m.gauge(REPLICATIONS, lambda: self.n_role["R"] + self.n_role["D"])
        node.handlers.update(
            st_put=self._h_put, st_replica=self._h_replica, st_get=self._h_get,
            st_cached=self._h_cached, st_sync=self._h_sync, st_fetch=self._h_fetch,
            st_repair=self._h_repair, st_challenge=self._h_challenge, st_divert=self._h_divert,
            st_guard=self._h_guard, st_drop=self._h_drop)
        node.listeners.append(self._on_routing_change)
        node.load_fn = self.load

    # ------------------------------------------------------------------
    # local state
    def load(self) -> int:
        return len(self.store)

    def _set(self, obj: StoredObject, role: str):
        fid = obj.file_id
        prev = self.role.get(fid)
        if prev is not None:
            self.n_role[prev] -= 1
        self.store[fid] = obj
        self.role[fid] = role
        self.n_role[role] += 1

    def _drop(self, fid: int):
        self.store.pop(fid, None)
        prev = self.role.pop(fid, None)
        if prev is not None:
            self.n_role[prev] -= 1
        self.diverted_for.pop(fid, None)

    def held(self, fid: int) -> StoredObject | None:
        """Object or pointer metadata for ``fid`` as known here."""
        obj = self.store.get(fid)
        if obj is not None:
            return obj
        p = self.pointers.get(fid)
        return p[1] if p else None

    def replica_targets(self, fid: int) -> list[Descriptor]:
        return self.node.replica_targets(fid, self.k)

    def _role_for(self, fid: int) -> str:
        t = self.replica_targets(fid)
        if self.targets_ver == self.node.routing_version:
            self.targets[fid] = tuple(d.node_id for d in t)
        return "P" if t and t[0].node_id == self.node.node_id else "R"

    def overloaded(self) -> bool:
        load = len(self.store)
        q = self.cfg.quota
        if q and load >= q:
            return True
        if load < self.cfg.divert_min:
            return False
        loads = list(self.node.neighbor_load.values())
        if not loads:
            return False
        mean = (sum(loads) + load) / (len(loads) + 1)
        return load > self.cfg.divert_factor * mean

    def _hard_full(self) -> bool:
        return bool(self.cfg.quota) and len(self.store) >= self.cfg.quota

    # ------------------------------------------------------------------
    # client API
    def get(self, file_id: int, fresh: bool = False, follow: bool = True, _depth: int = 0):
        """Fetch an object; returns None if absent or deleted.

        Redirect records left by file diversion are followed unless
        ``follow`` is false.
        """
        node = self.node
        now = self.sim.now
        if not fresh:
            hit = self.cache.get(file_id)
            if hit is not None and now - hit[1] < self.ttl_ms:
                node.metrics.count(CACHE_HITS)
                obj = hit[0]
                if follow and obj.kind == "redirect" and _depth < 2:
                    return (yield from self.get(ids.from_bytes(obj.payload), fresh, True, _depth + 1))
                return obj
        _, reply = yield from node.route(file_id, "st_get", file_id, not fresh)
        obj = None
        if reply[0] == "redirect":
            _, via, expected = reply
            try:
                cand = yield node.rpc(via, "st_cached", file_id)
            except (RpcTimeout, NodeOffline):
                cand = None
            if cand is not None and cand.content_hash == expected:
                obj = cand
                node.metrics.count(REDIRECTS)
            else:
                _, reply = yield from node.route(file_id, "st_get", file_id, False)
        if obj is None and reply[0] == "obj":
            obj = reply[1]
        node.metrics.sample(RETRIEVETIME, self.sim.now - now, "ms")
        if obj is None:
            self.cache.pop(file_id, None)
            return None
        if obj.file_id != file_id or not proof_ok(obj, self.provider):
            raise IntegrityError("storage returned an unauthenticated object")
        if obj.kind in DDS_KINDS:
            node.metrics.count(DDS_RATE, obj.wire_size())
        if obj.deleted:
            self.cache.pop(file_id, None)
            return None
        self.cache[file_id] = (obj, self.sim.now)
        if follow and obj.kind == "redirect" and _depth < 2:
            return (yield from self.get(ids.from_bytes(obj.payload), fresh, True, _depth + 1))
        return obj

    def require(self, file_id: int, fresh: bool = False):
        obj = yield from self.get(file_id, fresh)
        if obj is None:
            raise NotFound(ids.short(file_id))
        return obj

    def put(self, obj: StoredObject):
        """Store ``obj`` at its responsible node; returns the store receipts."""
        t0 = self.sim.now
        _, reply = yield from self.node.route(obj.file_id, "st_put", obj, timeout=4 * self.cfg.rpc_timeout_ms)
        self.node.metrics.sample(STORETIME, self.sim.now - t0, "ms")
        if obj.deleted:
            self.cache.pop(obj.file_id, None)
        else:
            self.cache[obj.file_id] = (obj, self.sim.now)
        return reply

    def insert(self, obj: StoredObject):
        """Insert with file diversion: on a full neighbourhood retry under salted ids."""
        try:
            return (yield from self.put(obj))
        except StorageFull:
            pass
        for salt in range(1, self.MAX_SALTS + 1):
            moved = replace(obj, file_id=salted_id(obj.file_id, salt))
            moved = make_object(self.kp, self.provider, moved.file_id, obj.kind, obj.payload,
                                owner=obj.owner, policy=obj.policy, appenders=obj.appenders)
            try:
                receipts = yield from self.put(moved)
            except StorageFull:
                continue
            pointer = make_object(self.kp, self.provider, obj.file_id, "redirect",
                                  ids.to_bytes(moved.file_id), owner=obj.owner)
            yield from self.put(pointer)
            return receipts
        raise StorageFull("file diversion exhausted")

    def delete(self, file_id: int):
        old = yield from self.require(file_id, fresh=True)
        marker = successor(old, self.kp, self.provider, b"", deleted=True)
        receipts = yield from self.put(marker)
        if old.file_id != file_id:  # diverted file: drop the redirect too
            red = yield from self.get(file_id, fresh=True, follow=False)
            if red is not None:
                yield from self.put(successor(red, self.kp, self.provider, b"", deleted=True))
        return receipts

    # ------------------------------------------------------------------
    # root side
    def _lock(self, fid):
        while fid in self.locks:
            yield self.locks[fid]
        self.locks[fid] = Future()

    def _unlock(self, fid):
        f = self.locks.pop(fid, None)
        if f is not None:
            f.set_result(None)

    def _current(self, fid: int):
        """Latest known object for ``fid``, following pointers and pulling
        from the other replica holders when this node is not yet synced."""
        obj = self.store.get(fid)
        if obj is not None:
            return obj
        for table in (self.pointers, self.guards):
            p = table.get(fid)
            if p is not None:
                try:
                    got = yield self.node.rpc(p[0], "st_fetch", [fid])
                    if got and got[0] is not None:
                        return got[0]
                except (RpcTimeout, NodeOffline):
                    table.pop(fid, None)
        if self.sim.now >= self.unsettled_until:
            return None
        best = None
        others = [t for t in self.replica_targets(fid) if t.node_id != self.node.node_id]
        replies = yield [self.node.rpc(t, "st_fetch", [fid]) for t in others]
        for r in replies:
            if isinstance(r, list) and r and r[0] is not None:
                if best is None or r[0].version > best.version:
                    best = r[0]
        if best is not None:
            yield from self._store_local(best, self._role_for(fid))
        return best

    def _h_get(self, src, fid, allow_redirect):
        obj = yield from self._current(fid)
        if obj is None:
            return ("none",)
        if allow_redirect and not obj.deleted:
            via = self._redirect_target(fid, src)
            if via is not None:
                return ("redirect", via, obj.content_hash)
        if src.node_id != self.node.node_id and not obj.deleted:
            lst = self.receivers.setdefault(fid, [])
            if all(d.node_id != src.node_id for d in lst):
                lst.append(src)
                if len(lst) > 16:
                    lst.pop(0)
        self.served_direct += 1
        return ("obj", obj)

    def _redirect_target(self, fid, src):
        now = self.sim.now
        q = self.req_times.get(fid)
        if q is None:
            q = self.req_times[fid] = deque()
        q.append(now)
        while q and q[0] <= now - 1000:
            q.popleft()
        if len(q) <= self.cfg.balance_rate:
            return None
        cands = [d for d in self.receivers.get(fid, ()) if d.node_id != src.node_id]
        if not cands:
            return None
        i = self.rr.get(fid, 0)
        self.rr[fid] = i + 1
        return cands[i % len(cands)]

    def _h_cached(self, src, fid):
        hit = self.cache.get(fid)
        if hit is None or self.sim.now - hit[1] >= self.ttl_ms:
            return None
        return hit[0]

    def _challenge(self, claimant: Descriptor, owner_pub: int):
        nonce = ids.to_bytes(self.sim.rng.getrandbits(160))
        self.challenges_issued += 1
        ct = self.provider.encrypt(owner_pub, nonce)
        try:
            if claimant.node_id == self.node.node_id:
                answer = self._h_challenge(claimant, ct)
            else:
                answer = yield self.node.rpc(claimant, "st_challenge", ct)
        except (RpcTimeout, NodeOffline):
            return False
        return answer == nonce

    def _h_challenge(self, src, ct):
        for kp in self.challenge_keys:
            try:
                return self.provider.decrypt(kp, ct)
            except DecryptionError:
                continue
        return None

    def _receipt(self, obj) -> Receipt:
        return Receipt(self.node.node_id, obj.file_id, obj.version,
                       self.provider.sign(self.kp, receipt_statement(self.node.node_id, obj)))

    def _h_put(self, src, obj: StoredObject):
        fid = obj.file_id
        yield from self._lock(fid)
        try:
            old = yield from self._current(fid)
            verdict = check_write(old, obj, self.provider)
            if verdict == "same":
                return [self._receipt(obj)]
            if verdict == "challenge":
                ok = yield from self._challenge(src, old.owner)
                if not ok:
                    raise StorageRejected("challenge failed")
            yield from self._store_local(obj, self._role_for(fid), new=old is None)
            self.receivers.pop(fid, None)
            self.req_times.pop(fid, None)
            receipts = [self._receipt(obj)]
            tried = {self.node.node_id}
            targets = [t for t in self.replica_targets(fid) if t.node_id not in tried]
            want = len(targets)
            spare = [d for d in self.node.closest_local(fid, self.k + 3) if d.node_id not in tried
                     and all(d.node_id != t.node_id for t in targets)]
            while targets:
                tried.update(t.node_id for t in targets)
                results = yield [self.node.rpc(t, "st_replica", obj, src) for t in targets]
                failed = 0
                for r in results:
                    if isinstance(r, Receipt):
                        receipts.append(r)
                    else:
                        failed += 1
                        if isinstance(r, StorageRejected) and not isinstance(r, StorageFull):
                            failed -= 1
                targets = spare[:failed]
                spare = spare[failed:]
            if (obj.version > 1 or obj.deleted) and len(receipts) < math.ceil((want + 1) / 2):
                raise StorageRejected("no majority of replicas accepted")
            return receipts
        finally:
            self._unlock(fid)

    def _h_replica(self, src, obj: StoredObject, claimant: Descriptor):
        fid = obj.file_id
        p = self.pointers.get(fid)
        if p is not None:
            try:
                r = yield self.node.rpc(p[0], "st_divert", obj, self.node.desc)
                self.pointers[fid] = (p[0], obj)
                return r if isinstance(r, Receipt) else self._receipt(obj)
            except (RpcTimeout, NodeOffline):
                self.pointers.pop(fid, None)
        old = self.store.get(fid)
        if old is not None and obj.version <= old.version:
            if old.digest() == obj.digest():
                return self._receipt(obj)
            raise Conflict("replica holds a newer version")
        if old is None and obj.version > 1 or old is not None and obj.version > old.version + 1:
            if not check_repair(old, obj, self.provider):
                raise StorageRejected("repair check failed")
        else:
            verdict = check_write(old, obj, self.provider)
            if verdict == "challenge":
                ok = yield from self._challenge(claimant, old.owner)
                if not ok:
                    raise StorageRejected("challenge failed")
        yield from self._store_local(obj, self._role_for(fid), new=old is None)
        return self._receipt(obj)

    def _store_local(self, obj: StoredObject, role: str, new: bool = True):
        """Store here, or divert the copy to a leaf neighbour if overloaded."""
        fid = obj.file_id
        if new and obj.kind != "redirect" and self.overloaded():
            ok = yield from self._divert(obj)
            if ok:
                return
            if self._hard_full():
                raise StorageFull("node full and no neighbour can take the replica")
        self._set(obj, role)

    def _divert(self, obj: StoredObject):
        fid = obj.file_id
        exclude = {d.node_id for d in self.node.closest_local(fid, self.k + 1)}
        cands = [d for d in self.node.leaf_set() if not d.weak and d.node_id not in exclude]
        cands.sort(key=lambda d: (self.node.neighbor_load.get(d.node_id, 0), d.node_id))
        mine = len(self.store)
        for d in cands[:3]:
            if self.node.neighbor_load.get(d.node_id, 0) >= mine:
                break
            try:
                r = yield self.node.rpc(d, "st_divert", obj, self.node.desc)
            except (RpcTimeout, NodeOffline, StorageRejected):
                continue
            if not isinstance(r, Receipt):
                continue
            self.node.neighbor_load[d.node_id] = self.node.neighbor_load.get(d.node_id, 0) + 1
            self.pointers[fid] = (d, obj)
            self.node.metrics.count(DIVERSIONS)
            guard = self.node.closest_local(fid, self.k + 1)
            if len(guard) > self.k and guard[self.k].node_id != self.node.node_id:
                self.node.rpc(guard[self.k], "st_guard", fid, d, obj)
            return True
        return False

    def _h_divert(self, src, obj: StoredObject, holder: Descriptor):
        old = self.store.get(obj.file_id)
        if old is not None and old.version >= obj.version:
            return self._receipt(old)
        if old is None and self._hard_full():
            raise StorageFull("delegate full")
        if not proof_ok(obj, self.provider):
            raise StorageRejected("bad proof")
        self._set(obj, "D")
        self.diverted_for[obj.file_id] = holder.node_id
        return self._receipt(obj)

    def _h_guard(self, src, fid, delegate: Descriptor, meta: StoredObject):
        self.guards[fid] = (delegate, meta)

    def _h_drop(self, src, fid):
        if self.role.get(fid) == "D" and self.diverted_for.get(fid) == src.node_id:
            self._drop(fid)

    # ------------------------------------------------------------------
    # repair
    def _on_routing_change(self):
        self.unsettled_until = self.sim.now + int(2 * self.cfg.maintenance_s * 1000)
        if not self.syncing:
            self.node.spawn(self.sync(full=False))

    def start(self):
        self.node.spawn(self._sync_loop())

    def _sync_loop(self):
        period = int(self.cfg.maintenance_s * 1000)
        yield self.sim.sleep(self.sim.rng.randint(0, period))
        rounds = 0
        while True:
            rounds += 1
            yield from self.sync(full=rounds % self.cfg.sync_every == 0)
            self._expire_cache()
            yield self.sim.sleep(period)

    def _expire_cache(self):
        now = self.sim.now
        dead = [f for f, (_, t) in self.cache.items() if now - t >= self.ttl_ms]
        for f in dead:
            del self.cache[f]

    def sync(self, full: bool = False, leaving: bool = False):
        """Push digests to replica targets, repair what they lack, hand off
        objects this node is no longer responsible for."""
        if self.syncing:
            return
        self.syncing = True
        try:
            yield from self._sync(full, leaving)
        finally:
            self.syncing = False

    def _sync(self, full, leaving):
        me = self.node.node_id
        ver = self.node.routing_version
        changed_view = ver != self.targets_ver
        per_target: dict[int, tuple[Descriptor, list]] = {}
        handoff = []
        if full or leaving or changed_view:
            fids = sorted(set(self.store) | set(self.pointers) | set(self.guards))
        else:
            # nothing moved: only new objects and pending guards can need work
            targets = self.targets
            fids = sorted({f for f in self.store if f not in targets}
                          | {f for f in self.pointers if f not in targets} | set(self.guards))
        for fid in fids:
            if self.role.get(fid) == "D":
                continue
            if changed_view or leaving or fid not in self.targets:
                if leaving:
                    t = [d for d in self.node.closest_local(fid, self.k + 1) if d.node_id != me][: self.k]
                else:
                    t = self.replica_targets(fid)
                tids = tuple(d.node_id for d in t)
                moved = self.targets.get(fid) != tids
                self.targets[fid] = tids
                tdesc = t
            else:
                moved = False
                tids = self.targets[fid]
                tdesc = None
            if fid in self.guards and fid not in self.store and fid not in self.pointers:
                if me in tids:
                    self.pointers[fid] = self.guards.pop(fid)
                else:
                    continue
            if not (full or moved or leaving):
                continue
            if tdesc is None:
                tdesc = self.replica_targets(fid)
            meta = self.held(fid)
            for d in tdesc:
                if d.node_id == me:
                    continue
                per_target.setdefault(d.node_id, (d, []))[1].append(meta.digest())
            if me not in tids:
                handoff.append(fid)
            elif fid in self.store:
                role = "P" if tids and tids[0] == me else "R"
                if self.role.get(fid) != role:
                    self._set(self.store[fid], role)
        self.targets_ver = ver
        confirmed: dict[int, int] = {}
        order = sorted(per_target)
        replies = yield [self.node.rpc(per_target[t][0], "st_sync", per_target[t][1]) for t in order]
        pushes = []
        for tid, reply in zip(order, replies):
            if isinstance(reply, Exception):
                continue
            need, newer = reply
            for digest in per_target[tid][1]:
                if digest[0] not in need:
                    confirmed[digest[0]] = confirmed.get(digest[0], 0) + 1
            if need:
                pushes.append((tid, need))
            if newer and not leaving:
                got = yield self._rpc_safe(per_target[tid][0], "st_fetch", newer)
                for obj in got or ():
                    if obj is not None and check_repair(self.held(obj.file_id), obj, self.provider):
                        if obj.file_id in self.store:
                            self._set(obj, self.role[obj.file_id])
                        elif obj.file_id in self.pointers:
                            d, _ = self.pointers[obj.file_id]
                            self.node.rpc(d, "st_divert", obj, self.node.desc)
                            self.pointers[obj.file_id] = (d, obj)
        for tid, need in pushes:
            objs = []
            for fid in need:
                obj = self.store.get(fid)
                if obj is None and fid in self.pointers:
                    got = yield self._rpc_safe(self.pointers[fid][0], "st_fetch", [fid])
                    obj = got[0] if got else None
                if obj is not None:
                    objs.append(obj)
            if objs:
                res = yield self._rpc_safe(per_target[tid][0], "st_repair", objs)
                if isinstance(res, list):
                    for fid in res:
                        confirmed[fid] = confirmed.get(fid, 0) + 1
        for fid in handoff:
            if confirmed.get(fid, 0) >= 1:
                if fid in self.pointers:
                    d, _ = self.pointers.pop(fid)
                    self.node.rpc(d, "st_drop", fid)
                self.guards.pop(fid, None)
                self._drop(fid)
                self.targets.pop(fid, None)

    def _rpc_safe(self, dest, method, *args) -> Future:
        out = Future()

        def done(f):
            out.set_result(None if f.error is not None else f.value)
        self.node.rpc(dest, method, *args).add_callback(done)
        return out

    def _h_sync(self, src, digests):
        need, newer = [], []
        for fid, version, *_ in digests:
            mine = self.held(fid)
            if mine is None or mine.version < version:
                need.append(fid)
            elif mine.version > version:
                newer.append(fid)
        return (need, newer)

    def _h_fetch(self, src, fids):
        out = []
        for fid in fids:
            obj = self.store.get(fid)
            if obj is None and fid in self.pointers:
                try:
                    got = yield self.node.rpc(self.pointers[fid][0], "st_fetch", [fid])
                    obj = got[0] if got else None
                except (RpcTimeout, NodeOffline):
                    obj = None
            out.append(obj)
        return out

    def _h_repair(self, src, objs):
        ok = []
        for obj in objs:
            fid = obj.file_id
            if fid in self.pointers:
                d, meta = self.pointers[fid]
                if obj.version > meta.version:
                    self.node.rpc(d, "st_divert", obj, self.node.desc)
                    self.pointers[fid] = (d, obj)
                ok.append(fid)
                continue
            old = self.store.get(fid)
            if old is not None and old.digest() == obj.digest():
                ok.append(fid)
                continue
            if check_repair(old, obj, self.provider):
                try:
                    yield from self._store_local(obj, self._role_for(fid), new=old is None)
                except StorageFull:
                    continue
                self.targets.pop(fid, None)
                ok.append(fid)
        return ok

    def leave(self):
        """Hand every object to the nodes that take over, then depart."""
        yield from self.sync(full=True, leaving=True)
        self.node.leave()
