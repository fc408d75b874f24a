"""Distributed lists, sets and prefix hash trees on top of the DHT.

A list named ``name`` has a root object at ``hash(name)`` holding its
bucket size, the index of the first live entry and its length.  Entry
``n`` lives in bucket ``m = n // s + 1`` stored at ``hash(f"{name}_{m}")``,
so any single entry is one bucket fetch away.  Entries are encoded secure
items (or ``b""`` for a hole).

Who may change what is enforced by the storage nodes through the kind
checks registered at the bottom of this module:

* a writer other than the owner may only append entries it signed,
  replace its own entries, or fill holes,
* the owner may additionally punch holes (remove entries) but cannot
  rewrite an entry signed by someone else,
* buckets may be created by appenders when they carry the owner's signed
  access grant for the structure.

Prefix hash tree nodes live at ``hash(f"{name}#{label}")`` where ``label``
is the node's bit-string prefix.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Callable

from . import ids
from .crypto import CryptoProvider, KeyPair
from .secure_items import (IntegrityError, SecureStorageItem, decode_list, encode_list,
                           validate_replacement, verify)
from .storage import (ANY, CREATE_CHECKS, EXTENSIONS, Conflict, NotFound, StorageError,
                      StorageRejected, StoredObject, make_object, successor)

HOLE = b""
MAX_RETRIES = 12


class DdsError(StorageError):
    pass


class RangeError(DdsError, ValueError):
    """Range query with A > B."""


def root_id(name: str) -> int:
    return ids.name_id(name)


def bucket_id(name: str, m: int) -> int:
    return ids.name_id(f"{name}_{m}")


def bucket_of(index: int, s: int) -> int:
    return index // s + 1


def bucket_span(m: int, s: int) -> tuple[int, int]:
    """Inclusive index interval held by bucket ``m``."""
    return s * (m - 1), s * m - 1


def _u64(v: int) -> bytes:
    return struct.pack(">Q", v)


def _r64(b: bytes) -> int:
    if len(b) != 8:
        raise IntegrityError("bad integer field")
    return struct.unpack(">Q", b)[0]


def grant_statement(name: str, kind: str, s: int, policy: str, appenders) -> bytes:
    app = b"*" if appenders == ANY else b"".join(ids.to_bytes(a) for a in appenders)
    return b"".join((b"grant", name.encode(), b"\x00", kind.encode(), b"\x00", _u64(s),
                     policy.encode(), b"\x00", app))


# ----------------------------------------------------------------------
# payload codecs

@dataclass(frozen=True)
class RootInfo:
    name: str
    kind: str  # list | set
    s: int
    start: int
    length: int
    grant: bytes

    def encode(self) -> bytes:
        return encode_list([b"root", self.name.encode(), self.kind.encode(), _u64(self.s),
                            _u64(self.start), _u64(self.length), self.grant])

    @classmethod
    def decode(cls, data: bytes) -> "RootInfo":
        f = decode_list(data)
        if len(f) != 7 or f[0] != b"root":
            raise IntegrityError("not a root record")
        return cls(f[1].decode(), f[2].decode(), _r64(f[3]), _r64(f[4]), _r64(f[5]), f[6])


@dataclass(frozen=True)
class BucketInfo:
    name: str
    kind: str
    m: int
    s: int
    grant: bytes
    entries: tuple[bytes, ...]

    def encode(self) -> bytes:
        return encode_list([b"bkt", self.name.encode(), self.kind.encode(), _u64(self.m),
                            _u64(self.s), self.grant, *self.entries])

    @classmethod
    def decode(cls, data: bytes) -> "BucketInfo":
        f = decode_list(data)
        if len(f) < 6 or f[0] != b"bkt":
            raise IntegrityError("not a bucket record")
        return cls(f[1].decode(), f[2].decode(), _r64(f[3]), _r64(f[4]), f[5], tuple(f[6:]))

    def header(self):
        return (self.name, self.kind, self.m, self.s, self.grant)


@dataclass(frozen=True)
class PhtNode:
    name: str
    label: str
    leaf: bool
    items: tuple[tuple[int, bytes], ...] = ()

    def encode(self) -> bytes:
        return encode_list([b"pht", self.name.encode(), self.label.encode(),
                            b"L" if self.leaf else b"I"] + [_u64(k) + v for k, v in self.items])

    @classmethod
    def decode(cls, data: bytes) -> "PhtNode":
        f = decode_list(data)
        if len(f) < 4 or f[0] != b"pht" or f[3] not in (b"L", b"I"):
            raise IntegrityError("not a trie node")
        items = []
        for raw in f[4:]:
            if len(raw) < 8:
                raise IntegrityError("bad trie entry")
            items.append((_r64(raw[:8]), raw[8:]))
        return cls(f[1].decode(), f[2].decode(), f[3] == b"L", tuple(items))


# ----------------------------------------------------------------------
# storage-side rules

def _entry_author(entry: bytes, provider) -> int | None:
    """Signer of a well-formed, correctly signed entry item."""
    try:
        item = SecureStorageItem.decode(entry)
    except IntegrityError:
        return None
    return item.owner_pub if verify(item, provider) else None


def _entries_ok(old_entries, new_entries, writer: int, by_owner: bool, provider) -> bool:
    if len(new_entries) < len(old_entries):
        return False
    for i, new in enumerate(new_entries):
        old = old_entries[i] if i < len(old_entries) else HOLE
        if new == old:
            continue
        if new == HOLE:
            if not by_owner:
                return False
            continue
        if _entry_author(new, provider) != writer:
            return False
        if old != HOLE:
            old_author = _entry_author(old, provider)
            if old_author != writer:
                return False
            if not validate_replacement(SecureStorageItem.decode(old), SecureStorageItem.decode(new), provider):
                return False
    return True


def _bucket_update_ok(old: StoredObject, new: StoredObject, provider, by_owner: bool) -> bool:
    try:
        a, b = BucketInfo.decode(old.payload), BucketInfo.decode(new.payload)
    except IntegrityError:
        return False
    if len(b.entries) > b.s or (a.name, a.kind, a.m, a.s) != (b.name, b.kind, b.m, b.s):
        return False
    if not by_owner and a.grant != b.grant:
        return False
    if by_owner and a.grant != b.grant and not provider.verify(
            new.owner, grant_statement(b.name, b.kind, b.s, new.policy, new.appenders), b.grant):
        return False
    return _entries_ok(a.entries, b.entries, new.writer, by_owner, provider)


def _bucket_create_ok(new: StoredObject, provider) -> bool:
    if new.policy != "append" or (new.appenders != ANY and new.writer not in new.appenders):
        return False
    try:
        b = BucketInfo.decode(new.payload)
    except IntegrityError:
        return False
    if new.file_id != bucket_id(b.name, b.m) or len(b.entries) > b.s:
        return False
    if not provider.verify(new.owner, grant_statement(b.name, b.kind, b.s, new.policy, new.appenders), b.grant):
        return False
    return _entries_ok((), b.entries, new.writer, False, provider)


def _root_update_ok(old: StoredObject, new: StoredObject, provider, by_owner: bool) -> bool:
    try:
        a, b = RootInfo.decode(old.payload), RootInfo.decode(new.payload)
    except IntegrityError:
        return False
    if (a.name, a.kind, a.s) != (b.name, b.kind, b.s):
        return False
    if by_owner:
        return b.length >= a.length and b.start <= b.length
    return b.grant == a.grant and b.start == a.start and b.length == a.length + 1


def _pht_update_ok(old: StoredObject, new: StoredObject, provider, by_owner: bool) -> bool:
    try:
        a, b = PhtNode.decode(old.payload), PhtNode.decode(new.payload)
    except IntegrityError:
        return False
    return (a.name, a.label) == (b.name, b.label) and (a.leaf or not b.leaf)


EXTENSIONS["dds-bucket"] = _bucket_update_ok
EXTENSIONS["dds-root"] = _root_update_ok
EXTENSIONS["pht-node"] = _pht_update_ok
CREATE_CHECKS["dds-bucket"] = _bucket_create_ok


# ----------------------------------------------------------------------
# client side

@dataclass(frozen=True)
class Handle:
    name: str
    kind: str
    s: int
    owner: int
    policy: str
    appenders: tuple | str
    grant: bytes

    @property
    def root_id(self) -> int:
        return root_id(self.name)


class Dds:
    """Client for lists and sets over any store offering ``get``/``put``
    generators (the simulated storage service or :class:`~p2posn.storage.LocalClient`).

    Every method is a generator; drive it inside the simulator or with
    :func:`~p2posn.storage.run_sync` against a local store.
    """

    def __init__(self, store, kp: KeyPair, provider: CryptoProvider, s: int = 16,
                 rng=None, sleep: Callable | None = None):
        self.store = store
        self.kp = kp
        self.provider = provider
        self.s = s
        self.rng = rng
        self.sleep = sleep  # fn(ms) -> Future, for backoff between retries
        self.fetches = 0

    # -- helpers -------------------------------------------------------
    def _get(self, fid, fresh=False):
        self.fetches += 1
        return (yield from self.store.get(fid, fresh))

    def _backoff(self, attempt):
        if self.sleep is not None and self.rng is not None:
            yield self.sleep(self.rng.randint(50, 200 * (attempt + 1)))

    def _root(self, name, fresh=False):
        obj = yield from self._get(root_id(name), fresh)
        if obj is None or obj.kind != "dds-root":
            raise NotFound(f"no structure {name!r}")
        return obj, RootInfo.decode(obj.payload)

    @staticmethod
    def _handle(obj: StoredObject, info: RootInfo) -> Handle:
        return Handle(info.name, info.kind, info.s, obj.owner, obj.policy, obj.appenders, info.grant)

    # -- lifecycle -----------------------------------------------------
    def create(self, name: str, kind: str = "list", s: int | None = None, policy: str = "owner",
               appenders=()):
        """Create an empty list or set owned by this client's key."""
        s = s or self.s
        if appenders != ANY:
            appenders = tuple(sorted(set(appenders)))
        grant = self.provider.sign(self.kp, grant_statement(name, kind, s, policy, appenders))
        info = RootInfo(name, kind, s, 0, 0, grant)
        obj = make_object(self.kp, self.provider, root_id(name), "dds-root", info.encode(),
                          policy=policy, appenders=appenders)
        yield from self.store.put(obj)
        return self._handle(obj, info)

    def handle(self, name: str, fresh: bool = False):
        obj, info = yield from self._root(name, fresh)
        return self._handle(obj, info)

    def length(self, name: str, fresh: bool = True):
        _, info = yield from self._root(name, fresh)
        return info.length

    def set_access(self, name: str, policy: str, appenders):
        """Owner only: change who may append; rewrites root and buckets."""
        if appenders != ANY:
            appenders = tuple(sorted(set(appenders)))
        obj, info = yield from self._root(name, True)
        grant = self.provider.sign(self.kp, grant_statement(name, info.kind, info.s, policy, appenders))
        new_info = RootInfo(info.name, info.kind, info.s, info.start, info.length, grant)
        for m in range(bucket_of(info.start, info.s), bucket_of(max(info.length, 1) - 1, info.s) + 1):
            b = yield from self._get(bucket_id(name, m), True)
            if b is None:
                continue
            bi = BucketInfo.decode(b.payload)
            nb = BucketInfo(bi.name, bi.kind, bi.m, bi.s, grant, bi.entries)
            yield from self.store.put(successor(b, self.kp, self.provider, nb.encode(),
                                                policy=policy, appenders=appenders))
        yield from self.store.put(successor(obj, self.kp, self.provider, new_info.encode(),
                                            policy=policy, appenders=appenders))

    def destroy(self, name: str):
        """Owner only: delete the root and every bucket."""
        obj, info = yield from self._root(name, True)
        for m in range(1, bucket_of(max(info.length, 1) - 1, info.s) + 1):
            b = yield from self._get(bucket_id(name, m), True)
            if b is not None:
                yield from self.store.put(successor(b, self.kp, self.provider, b"", deleted=True))
        yield from self.store.put(successor(obj, self.kp, self.provider, b"", deleted=True))

    # -- list ----------------------------------------------------------
    def append(self, name: str, entry: bytes, handle: Handle | None = None):
        """Append ``entry``; returns its global index.

        The index is reserved by bumping the root's length (compare and
        swap), then the entry is written into its bucket.
        """
        for attempt in range(MAX_RETRIES):
            obj, info = yield from self._root(name, fresh=attempt > 0)
            index = info.length
            new_info = RootInfo(info.name, info.kind, info.s, info.start, index + 1, info.grant)
            try:
                yield from self.store.put(successor(obj, self.kp, self.provider, new_info.encode()))
                break
            except Conflict:
                yield from self._backoff(attempt)
        else:
            raise DdsError(f"append to {name!r}: too much contention")
        yield from self._write_slot(self._handle(obj, info), index, entry)
        return index

    def _write_slot(self, h: Handle, index: int, entry: bytes, require_old=None):
        m = bucket_of(index, h.s)
        pos = index - bucket_span(m, h.s)[0]
        fid = bucket_id(h.name, m)
        for attempt in range(MAX_RETRIES):
            old = yield from self._get(fid, fresh=True)
            if old is None:
                entries = [HOLE] * (pos + 1)
                entries[pos] = entry
                info = BucketInfo(h.name, h.kind, m, h.s, h.grant, tuple(entries))
                new = make_object(self.kp, self.provider, fid, "dds-bucket", info.encode(),
                                  owner=h.owner, policy=h.policy, appenders=h.appenders)
            else:
                bi = BucketInfo.decode(old.payload)
                entries = list(bi.entries) + [HOLE] * max(0, pos + 1 - len(bi.entries))
                if require_old is not None and entries[pos] != require_old:
                    raise Conflict("entry changed underneath")
                entries[pos] = entry
                info = BucketInfo(bi.name, bi.kind, bi.m, bi.s, bi.grant, tuple(entries))
                new = successor(old, self.kp, self.provider, info.encode())
            try:
                yield from self.store.put(new)
                return
            except Conflict:
                yield from self._backoff(attempt)
        raise DdsError(f"write to {h.name!r}[{index}]: too much contention")

    def get(self, name: str, index: int, s: int | None = None, fresh: bool = False):
        """Entry at ``index`` with a single bucket fetch; holes raise NotFound."""
        s = s or self.s
        m = bucket_of(index, s)
        obj = yield from self._get(bucket_id(name, m), fresh)
        if obj is None:
            raise NotFound(f"{name}[{index}]")
        bi = BucketInfo.decode(obj.payload)
        pos = index - bucket_span(m, bi.s)[0]
        if pos >= len(bi.entries) or bi.entries[pos] == HOLE:
            raise NotFound(f"{name}[{index}]")
        return bi.entries[pos]

    def entries(self, name: str, fresh: bool = False):
        """All live ``(index, entry)`` pairs in index order."""
        _, info = yield from self._root(name, fresh)
        return (yield from self._scan(info, fresh))

    def _scan(self, info: RootInfo, fresh: bool, upto: int | None = None):
        end = info.length if upto is None else upto
        out = []
        if end <= info.start:
            return out
        for m in range(bucket_of(info.start, info.s), bucket_of(end - 1, info.s) + 1):
            obj = yield from self._get(bucket_id(info.name, m), fresh)
            if obj is None:
                continue
            bi = BucketInfo.decode(obj.payload)
            base = bucket_span(m, info.s)[0]
            for pos, e in enumerate(bi.entries):
                idx = base + pos
                if e != HOLE and info.start <= idx < end:
                    out.append((idx, e))
        return out

    def replace(self, name: str, index: int, entry: bytes, handle: Handle | None = None):
        """Overwrite an entry (its author only) or punch a hole (owner)."""
        h = handle or (yield from self.handle(name))
        yield from self._write_slot(h, index, entry)

    def remove(self, name: str, index: int, handle: Handle | None = None):
        yield from self.replace(name, index, HOLE, handle)

    def drain(self, name: str):
        """Owner only: return all live entries and clear them.

        Entries appended after the root was read are left in place.  A slot
        that was reserved but not yet written keeps ``start`` from moving
        past it, so a slow appender's entry is picked up by the next drain.
        """
        for attempt in range(MAX_RETRIES):
            obj, info = yield from self._root(name, fresh=True)
            got = yield from self._scan(info, fresh=True)
            if not got and info.start == info.length:
                return []
            h = self._handle(obj, info)
            seen = {idx for idx, _ in got}
            new_start = next((i for i in range(info.start, info.length) if i not in seen), info.length)
            by_bucket: dict[int, list[int]] = {}
            for idx, _ in got:
                by_bucket.setdefault(bucket_of(idx, info.s), []).append(idx)
            for m in sorted(by_bucket):
                yield from self._clear(h, m, by_bucket[m], info.length)
            new_info = RootInfo(info.name, info.kind, info.s, new_start, info.length, info.grant)
            # the root may have grown meanwhile; only ``start`` moves here
            while new_start != info.start:
                try:
                    yield from self.store.put(successor(obj, self.kp, self.provider, new_info.encode()))
                    break
                except Conflict:
                    obj, cur = yield from self._root(name, fresh=True)
                    new_info = RootInfo(cur.name, cur.kind, cur.s, new_start, cur.length, cur.grant)
            return [e for _, e in got]
        return []  # pragma: no cover

    def _clear(self, h: Handle, m: int, idxs: list[int], limit: int):
        fid = bucket_id(h.name, m)
        base = bucket_span(m, h.s)[0]
        for attempt in range(MAX_RETRIES):
            old = yield from self._get(fid, fresh=True)
            if old is None:
                return
            bi = BucketInfo.decode(old.payload)
            entries = list(bi.entries)
            for idx in idxs:
                if idx - base < len(entries) and idx < limit:
                    entries[idx - base] = HOLE
            if entries == list(bi.entries):
                return
            new = successor(old, self.kp, self.provider,
                            BucketInfo(bi.name, bi.kind, bi.m, bi.s, bi.grant, tuple(entries)).encode())
            try:
                yield from self.store.put(new)
                return
            except Conflict:
                yield from self._backoff(attempt)
        raise DdsError("drain: too much contention")

    # -- set -----------------------------------------------------------
    # Set members are entries; ``key_of`` maps an entry to the member it
    # represents (e.g. by decrypting it), returning None if unreadable.

    def set_members(self, name: str, key_of, fresh: bool = False):
        """Generator: {member: index} over live entries; ``key_of`` is a generator fn."""
        got = yield from self.entries(name, fresh)
        out = {}
        for idx, e in got:
            k = yield from key_of(e)
            if k is not None and k not in out:
                out[k] = idx
        return out

    def set_add(self, name: str, member, entry: bytes, key_of):
        members = yield from self.set_members(name, key_of, fresh=True)
        if member in members:
            return False
        yield from self.append(name, entry)
        return True

    def set_contains(self, name: str, member, key_of, fresh: bool = False):
        members = yield from self.set_members(name, key_of, fresh)
        return member in members

    def set_remove(self, name: str, member, key_of):
        members = yield from self.set_members(name, key_of, fresh=True)
        if member not in members:
            return False
        got = yield from self.entries(name, fresh=True)
        for idx, e in got:
            k = yield from key_of(e)
            if k == member:
                yield from self.remove(name, idx)
        return True


# ----------------------------------------------------------------------
# prefix hash tree

def pht_node_id(name: str, label: str) -> int:
    return ids.name_id(f"{name}#{label}")


def key_bits(key: int, depth: int, D: int) -> str:
    return format(key, f"0{D}b")[:depth] if depth else ""


def label_range(label: str, D: int) -> tuple[int, int]:
    """Inclusive key interval covered by a trie label."""
    free = D - len(label)
    lo = (int(label, 2) << free) if label else 0
    return lo, lo + (1 << free) - 1


def probe_bound(D: int) -> int:
    return math.ceil(math.log2(D)) + 1


class Pht:
    """Prefix hash tree over D-bit keys with leaves of at most M keys.

    Values are opaque bytes.  ``policy="open"`` lets any node insert
    (used by the shared search index); otherwise only the owner writes.
    """

    def __init__(self, store, kp: KeyPair, provider: CryptoProvider, name: str, D: int = 32,
                 M: int = 4, policy: str = "owner"):
        self.store = store
        self.kp = kp
        self.provider = provider
        self.name = name
        self.D = D
        self.M = M
        self.policy = policy
        self.probes = 0  # fetches made by the last lookup

    def _fetch(self, label: str, fresh: bool = False):
        obj = yield from self.store.get(pht_node_id(self.name, label), fresh)
        if obj is None or obj.kind != "pht-node":
            return None, None
        return obj, PhtNode.decode(obj.payload)

    def _check_key(self, key: int):
        if not 0 <= key < (1 << self.D):
            raise ValueError(f"key must be a {self.D}-bit value")

    def find_leaf(self, key: int, fresh: bool = False):
        """Binary search over prefix lengths for the leaf covering ``key``.

        Returns ``(object, node)`` or ``(None, None)`` for an empty trie.
        """
        self._check_key(key)
        lo, hi = 0, self.D
        self.probes = 0
        while lo <= hi:
            mid = (lo + hi) // 2
            self.probes += 1
            obj, node = yield from self._fetch(key_bits(key, mid, self.D), fresh)
            if node is None:
                hi = mid - 1
            elif node.leaf:
                return obj, node
            else:
                lo = mid + 1
        return None, None

    def lookup(self, key: int):
        _, node = yield from self.find_leaf(key)
        if node is not None:
            for k, v in node.items:
                if k == key:
                    return v
        raise NotFound(f"key {key:#x}")

    def _write(self, label: str, leaf: bool, items, old: StoredObject | None):
        node = PhtNode(self.name, label, leaf, tuple(sorted(items)))
        if old is None:
            obj = make_object(self.kp, self.provider, pht_node_id(self.name, label), "pht-node",
                              node.encode(), policy=self.policy)
        else:
            obj = successor(old, self.kp, self.provider, node.encode())
        yield from self.store.put(obj)

    def insert(self, key: int, value: bytes):
        """Insert or overwrite ``key``; splits full leaves."""
        self._check_key(key)
        for attempt in range(MAX_RETRIES):
            try:
                obj, node = yield from self.find_leaf(key, fresh=attempt > 0)
                if node is None:
                    yield from self._write("", True, [(key, value)], None)
                    return
                items = dict(node.items)
                items[key] = value
                if len(items) <= self.M or len(node.label) == self.D:
                    yield from self._write(node.label, True, items.items(), obj)
                    return
                yield from self._split(obj, node.label, items)
                return
            except Conflict:
                continue
        raise DdsError("pht insert: too much contention")

    def _split(self, obj, label: str, items: dict):
        """Turn leaf ``label`` into an internal node; children are written first."""
        halves = {"0": {}, "1": {}}
        depth = len(label)
        for k, v in items.items():
            halves[key_bits(k, depth + 1, self.D)[-1]][k] = v
        for bit in "01":
            child = label + bit
            cobj, cnode = yield from self._fetch(child, True)
            sub = halves[bit]
            if len(sub) > self.M and len(child) < self.D:
                yield from self._split(cobj, child, sub)
            else:
                yield from self._write(child, True, sub.items(), cobj)
        yield from self._write(label, False, [], obj)

    def delete(self, key: int):
        obj, node = yield from self.find_leaf(key, fresh=True)
        if node is None:
            return False
        items = dict(node.items)
        if items.pop(key, None) is None:
            return False
        yield from self._write(node.label, True, items.items(), obj)
        return True

    def range(self, lo: int, hi: int, fresh: bool = False):
        """All ``(key, value)`` with ``lo <= key <= hi``, in key order."""
        if lo > hi:
            raise RangeError("range lower bound exceeds upper bound")
        out = []
        stack = [""]
        while stack:
            label = stack.pop()
            a, b = label_range(label, self.D)
            if b < lo or a > hi:
                continue
            _, node = yield from self._fetch(label, fresh)
            if node is None:
                continue
            if node.leaf:
                out.extend((k, v) for k, v in node.items if lo <= k <= hi)
            elif len(label) < self.D:
                stack.append(label + "1")
                stack.append(label + "0")
        out.sort()
        return out

    def walk(self):
        """Every node of the trie as ``(label, PhtNode)`` (for checks)."""
        out = []
        stack = [""]
        while stack:
            label = stack.pop()
            _, node = yield from self._fetch(label, True)
            if node is None:
                continue
            out.append((label, node))
            if not node.leaf:
                stack.extend((label + "1", label + "0"))
        return out
