"""User identities and the userID -> nodeID mapping record.

A user's key pair comes from their credentials, so they can log in from
any machine.  The user id is a hash of the username alone and never
changes; the mapping record stored under it names the node id (public
key) the user currently runs.  Overwriting an existing mapping requires
answering a challenge encrypted to the previous node's public key.
"""
from __future__ import annotations

from . import ids
from .crypto import CryptoProvider, KeyPair
from .secure_items import IntegrityError, decode_list, encode_list
from .storage import NotFound, StoredObject, make_object, proof_ok, successor


def make_user_id(username: str) -> int:
    if not username:
        raise ValueError("username must not be empty")
    return ids.hash160("user:" + username)


def mapping_statement(user_id: int, node_id: int) -> bytes:
    return b"map1" + ids.to_bytes(user_id) + ids.to_bytes(node_id)


def encode_mapping(user_id: int, kp: KeyPair, provider: CryptoProvider) -> bytes:
    sig = provider.sign(kp, mapping_statement(user_id, kp.public_key))
    return encode_list([ids.to_bytes(user_id), ids.to_bytes(kp.public_key), sig])


def decode_mapping(obj: StoredObject, provider: CryptoProvider) -> int:
    """Node id named by a mapping record; raises IntegrityError if it does not verify."""
    if obj.kind != "mapping" or not proof_ok(obj, provider):
        raise IntegrityError("not a valid mapping record")
    fields = decode_list(obj.payload)
    if len(fields) != 3:
        raise IntegrityError("malformed mapping record")
    user_id, node_id = ids.from_bytes(fields[0]), ids.from_bytes(fields[1])
    if user_id != obj.file_id or node_id != obj.owner or obj.writer != node_id:
        raise IntegrityError("mapping does not match its record")
    if not provider.verify(node_id, mapping_statement(user_id, node_id), fields[2]):
        raise IntegrityError("mapping signature does not verify")
    return node_id


def mapping_object(user_id: int, kp: KeyPair, provider: CryptoProvider,
                   previous: StoredObject | None = None) -> StoredObject:
    payload = encode_mapping(user_id, kp, provider)
    if previous is None:
        return make_object(kp, provider, user_id, "mapping", payload)
    return successor(previous, kp, provider, payload, owner=kp.public_key)


def publish_mapping(store, user_id: int, kp: KeyPair, provider: CryptoProvider):
    """Generator: store (or overwrite) the mapping; returns the stored record.

    Overwrites go through the storage node's challenge, which the caller's
    node answers with the keys it holds.
    """
    current = yield from store.get(user_id, True)
    if current is not None and current.kind == "mapping":
        try:
            if decode_mapping(current, provider) == kp.public_key:
                return current
        except IntegrityError:
            pass
    obj = mapping_object(user_id, kp, provider, current)
    yield from store.put(obj)
    return obj


def resolve_user(store, user_id: int, provider: CryptoProvider, fresh: bool = False):
    """Generator: the node id currently mapped to ``user_id``."""
    obj = yield from store.get(user_id, fresh)
    if obj is None:
        raise NotFound(f"user {ids.short(user_id)}")
    return decode_mapping(obj, provider)
