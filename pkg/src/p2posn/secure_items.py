"""Secure storage items: encrypted payload, per-reader wrapped keys, owner
signature.

Readers are *principals*: users or groups, identified by 160-bit ids and
resolved to public keys by the caller.  A group is a virtual user whose
private key is itself stored as a secure item sealed to the group's
members, so reading an item sealed to a group means first opening the
group's key item (possibly through further nested groups).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

from . import ids
from .crypto import CryptoProvider, DecryptionError, KeyPair

PUBLIC = 0  # pseudo principal: the wrapped "key" is the raw symmetric key

_SIG_TAG = b"ssi1"


class AccessDenied(Exception):
    """The caller holds no key that unlocks the item."""


class IntegrityError(Exception):
    """The item is malformed or its signature does not verify."""


class UnknownPrincipal(Exception):
    def __init__(self, principals):
        self.principals = sorted(principals)
        super().__init__("cannot resolve principals: " + ", ".join(ids.short(p) for p in self.principals))


class NotOwner(Exception):
    pass


class CycleError(Exception):
    pass


def _lp(data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + data


def _read_lp(buf: bytes, pos: int) -> tuple[bytes, int]:
    if pos + 4 > len(buf):
        raise IntegrityError("truncated length prefix")
    (n,) = struct.unpack_from(">I", buf, pos)
    pos += 4
    if pos + n > len(buf):
        raise IntegrityError("truncated field")
    return buf[pos:pos + n], pos + n


def encode_list(items: Iterable[bytes]) -> bytes:
    items = list(items)
    return struct.pack(">I", len(items)) + b"".join(_lp(i) for i in items)


def decode_list(buf: bytes) -> list[bytes]:
    if len(buf) < 4:
        raise IntegrityError("truncated list")
    (n,) = struct.unpack_from(">I", buf, 0)
    pos, out = 4, []
    for _ in range(n):
        item, pos = _read_lp(buf, pos)
        out.append(item)
    if pos != len(buf):
        raise IntegrityError("trailing bytes")
    return out


@dataclass(frozen=True)
class SecureStorageItem:
    owner_pub: int
    wrapped_keys: tuple[tuple[int, bytes], ...]
    ciphertext: bytes
    tombstone: bool
    signature: bytes = field(repr=False)

    def _wrapped_blob(self) -> bytes:
        return encode_list(ids.to_bytes(p) + w for p, w in self.wrapped_keys)

    def body(self) -> bytes:
        """Signed part of the canonical encoding (everything but the signature)."""
        return (_lp(ids.to_bytes(self.owner_pub)) + _lp(self._wrapped_blob())
                + _lp(self.ciphertext) + _lp(b"\x01" if self.tombstone else b"\x00"))

    def encode(self) -> bytes:
        return self.body() + _lp(self.signature)

    @classmethod
    def decode(cls, data: bytes) -> "SecureStorageItem":
        owner, pos = _read_lp(data, 0)
        wrapped, pos = _read_lp(data, pos)
        ct, pos = _read_lp(data, pos)
        flag, pos = _read_lp(data, pos)
        sig, pos = _read_lp(data, pos)
        if pos != len(data) or len(owner) != 20 or flag not in (b"\x00", b"\x01"):
            raise IntegrityError("malformed item")
        keys = []
        for entry in decode_list(wrapped):
            if len(entry) < 20:
                raise IntegrityError("malformed wrapped key")
            keys.append((ids.from_bytes(entry[:20]), entry[20:]))
        return cls(ids.from_bytes(owner), tuple(keys), ct, flag == b"\x01", sig)

    def principals(self) -> list[int]:
        return [p for p, _ in self.wrapped_keys]

    def wire_size(self) -> int:
        return (20 + len(self.ciphertext) + len(self.signature) + 17
                + sum(24 + len(w) for _, w in self.wrapped_keys))


def verify(item: SecureStorageItem, provider: CryptoProvider) -> bool:
    return provider.verify(item.owner_pub, _SIG_TAG + item.body(), item.signature)


def _signed(owner: KeyPair, wrapped, ciphertext, tombstone, provider) -> SecureStorageItem:
    unsigned = SecureStorageItem(owner.public_key, wrapped, ciphertext, tombstone, b"")
    return SecureStorageItem(owner.public_key, wrapped, ciphertext, tombstone,
                             provider.sign(owner, _SIG_TAG + unsigned.body()))


def seal(payload: bytes, readers: Iterable[int], owner: KeyPair, owner_principal: int,
         provider: CryptoProvider, resolve: Callable[[int], int | None]) -> SecureStorageItem:
    """Encrypt ``payload`` for ``readers``; the owner is always a reader.

    ``resolve`` maps a principal id to its current public key (or None).
    Passing :data:`PUBLIC` among the readers makes the item world-readable.
    """
    principals = set(readers)
    principals.add(owner_principal)
    pubs = {}
    missing = []
    for pid in principals:
        if pid == PUBLIC:
            continue
        if pid == owner_principal:
            pubs[pid] = owner.public_key
            continue
        pub = resolve(pid)
        if pub is None:
            missing.append(pid)
        else:
            pubs[pid] = pub
    if missing:
        raise UnknownPrincipal(missing)
    key = provider.new_sym_key()
    wrapped = []
    for pid in sorted(principals):
        wrapped.append((pid, key if pid == PUBLIC else provider.encrypt(pubs[pid], key)))
    return _signed(owner, tuple(wrapped), provider.sym_encrypt(key, payload), False, provider)


def validate_replacement(old: SecureStorageItem, new: SecureStorageItem,
                         provider: CryptoProvider) -> bool:
    return new.owner_pub == old.owner_pub and verify(new, provider)


def tombstone(old: SecureStorageItem, owner: KeyPair, provider: CryptoProvider) -> SecureStorageItem:
    if owner.public_key != old.owner_pub:
        raise NotOwner("only the owner can tombstone an item")
    return _signed(owner, (), b"", True, provider)


class Keyring:
    """Key pairs a user can try, per principal (newest first)."""

    def __init__(self):
        self._keys: dict[int, list[KeyPair]] = {}
        self.groups: set[int] = set()

    def add(self, principal: int, kp: KeyPair, group: bool = False):
        lst = self._keys.setdefault(principal, [])
        if kp not in lst:
            lst.insert(0, kp)
        if group:
            self.groups.add(principal)

    def is_own_user(self, principal: int) -> bool:
        return principal in self._keys and principal not in self.groups

    def get(self, principal: int) -> list[KeyPair]:
        return self._keys.get(principal, [])

    def __contains__(self, principal):
        return principal in self._keys

    def copy(self) -> "Keyring":
        k = Keyring()
        k._keys = {p: list(v) for p, v in self._keys.items()}
        k.groups = set(self.groups)
        return k


def _try_unwrap(wrapped: bytes, keys: list[KeyPair], provider) -> bytes | None:
    for kp in keys:
        try:
            return provider.decrypt(kp, wrapped)
        except DecryptionError:
            continue
    return None


def unlock_steps(item: SecureStorageItem, keyring: Keyring, provider: CryptoProvider,
                 visiting: frozenset = frozenset()):
    """Generator finding the item's symmetric key, depth first through groups.

    It yields principal ids whose group-key item it needs; the driver sends
    back that item or ``None`` if the principal is not a group.  Group keys
    recovered on the way are added to ``keyring``.  Returns the key or None.
    """
    for pid, wrapped in item.wrapped_keys:
        if pid == PUBLIC:
            return wrapped
        keys = keyring.get(pid)
        if keys:
            key = _try_unwrap(wrapped, keys, provider)
            if key is not None:
                return key
    for pid, wrapped in item.wrapped_keys:
        if pid == PUBLIC or keyring.is_own_user(pid) or pid in visiting:
            continue
        gitem = yield pid
        if gitem is None or gitem.tombstone or not verify(gitem, provider):
            continue
        sub = yield from unlock_steps(gitem, keyring, provider, visiting | {pid})
        if sub is None:
            continue
        try:
            secrets = decode_list(provider.sym_decrypt(sub, gitem.ciphertext))
        except (DecryptionError, IntegrityError):
            continue
        for raw in reversed(secrets):
            keyring.add(pid, provider.import_private(raw), group=True)
        key = _try_unwrap(wrapped, keyring.get(pid), provider)
        if key is not None:
            return key
    return None


def open_steps(item: SecureStorageItem, keyring: Keyring, provider: CryptoProvider):
    """Generator form of :func:`open_item` (same yield protocol as unlock_steps).

    Returns the payload, or None for a tombstone.
    """
    if not verify(item, provider):
        raise IntegrityError("signature does not verify under owner key")
    if item.tombstone:
        return None
    key = yield from unlock_steps(item, keyring, provider)
    if key is None:
        raise AccessDenied("no key for any listed principal")
    try:
        return provider.sym_decrypt(key, item.ciphertext)
    except DecryptionError as exc:
        raise IntegrityError("ciphertext does not authenticate") from exc


def drive(steps, group_items: Mapping[int, SecureStorageItem] | Callable | None = None):
    """Run a step generator synchronously against a local table of group-key items."""
    lookup = group_items if callable(group_items) else (group_items or {}).get
    try:
        request = next(steps)
        while True:
            request = steps.send(lookup(request))
    except StopIteration as stop:
        return stop.value


def open_item(item: SecureStorageItem, keyring: Keyring, provider: CryptoProvider,
              group_items=None) -> bytes | None:
    return drive(open_steps(item, keyring, provider), group_items)


# ----------------------------------------------------------------------
# groups

def group_key_location(group_id: int) -> int:
    return ids.hash160("groupkey:" + ids.to_bytes(group_id).hex())


@dataclass
class Group:
    """A virtual user: own key pair, member principals, an admin.

    ``past_keys`` keeps earlier key pairs after rotations so members can
    still read items sealed before a removal.
    """
    group_id: int
    admin: int
    keypair: KeyPair
    members: set[int] = field(default_factory=set)
    past_keys: list[KeyPair] = field(default_factory=list)
    version: int = 1

    @property
    def public_key(self) -> int:
        return self.keypair.public_key


def _reachable(start: int, children: Callable[[int], Iterable[int]]) -> set[int]:
    seen, stack = set(), [start]
    while stack:
        g = stack.pop()
        for c in children(g):
            if c not in seen:
                seen.add(c)
                stack.append(c)
    return seen


def check_acyclic(group: Group, new_member: int, members_of: Callable[[int], Iterable[int]]):
    """Reject ``new_member`` if it is the group or transitively contains it."""
    if new_member == group.group_id or group.group_id in _reachable(new_member, members_of):
        raise CycleError("membership would create a cycle")


def create_group(group_id: int, admin: int, provider: CryptoProvider,
                 members: Iterable[int] = ()) -> Group:
    return Group(group_id, admin, provider.new_keypair(), set(members) | {admin})


def add_member(group: Group, principal: int, members_of: Callable[[int], Iterable[int]]):
    check_acyclic(group, principal, members_of)
    group.members.add(principal)
    group.version += 1


def remove_member(group: Group, principal: int, provider: CryptoProvider):
    """Drop a member and rotate the group key (forward-only revocation)."""
    group.members.discard(principal)
    group.past_keys.insert(0, group.keypair)
    group.keypair = provider.new_keypair()
    group.version += 1


def seal_group_key(group: Group, admin_kp: KeyPair, provider: CryptoProvider,
                   resolve: Callable[[int], int | None]) -> SecureStorageItem:
    secrets = [provider.export_private(group.keypair)]
    secrets += [provider.export_private(k) for k in group.past_keys]
    return seal(encode_list(secrets), group.members, admin_kp, group.admin, provider, resolve)
