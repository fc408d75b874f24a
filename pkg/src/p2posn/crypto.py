"""Pluggable crypto providers.

Two implementations share one interface:

* ``HashCryptoProvider``: a fast, deterministic, *insecure* keyed-hash
  construction used by the simulator and most tests.
* ``EccCryptoProvider``: ECDSA/ECIES over the 160-bit curve secp160r1 plus
  AES-128-GCM.  The public key is the x coordinate of the public point, so
  it is a 160-bit integer that doubles as a node id.

Protocol code only ever talks to the interface, so swapping providers does
not change any behaviour other than byte sizes and speed.
"""
from __future__ import annotations

import hashlib
import hmac
import random
import secrets
from dataclasses import dataclass, field

from . import ids


class CryptoError(Exception):
    pass


class DecryptionError(CryptoError):
    """Ciphertext does not authenticate under the given key."""


@dataclass(frozen=True)
class KeyPair:
    public_key: int
    private_key: bytes = field(repr=False)


def _xor(data: bytes, stream: bytes) -> bytes:
    n = len(data)
    if not n:
        return b""
    return (int.from_bytes(data, "big") ^ int.from_bytes(stream[:n], "big")).to_bytes(n, "big")


def credential_seed(username: str, passphrase: str) -> bytes:
    return hashlib.sha256(username.encode() + b"\x00" + passphrase.encode()).digest()


class CryptoProvider:
    """Interface.  Subclasses implement the primitives."""

    name = "abstract"
    sym_key_size = 16

    def __init__(self, seed: int | None = None):
        self._rng = random.Random(seed) if seed is not None else None

    def random_bytes(self, n: int) -> bytes:
        if self._rng is None:
            return secrets.token_bytes(n)
        return self._rng.getrandbits(8 * n).to_bytes(n, "big")

    # identity -----------------------------------------------------------
    def derive_identity(self, username: str, passphrase: str) -> KeyPair:
        if not username or not passphrase:
            raise ValueError("username and passphrase must be non-empty")
        return self.derive_keypair(credential_seed(username, passphrase))

    def new_keypair(self) -> KeyPair:
        return self.derive_keypair(self.random_bytes(32))

    def hash(self, data: bytes) -> int:
        return ids.hash160(data)

    # to implement -------------------------------------------------------
    def derive_keypair(self, seed: bytes) -> KeyPair:
        raise NotImplementedError

    def sign(self, kp: KeyPair, message: bytes) -> bytes:
        raise NotImplementedError

    def verify(self, public_key: int, message: bytes, signature: bytes) -> bool:
        raise NotImplementedError

    def encrypt(self, public_key: int, message: bytes) -> bytes:
        raise NotImplementedError

    def decrypt(self, kp: KeyPair, ciphertext: bytes) -> bytes:
        raise NotImplementedError

    def sym_encrypt(self, key: bytes, message: bytes) -> bytes:
        raise NotImplementedError

    def sym_decrypt(self, key: bytes, ciphertext: bytes) -> bytes:
        raise NotImplementedError

    def export_private(self, kp: KeyPair) -> bytes:
        return kp.private_key

    def import_private(self, data: bytes) -> KeyPair:
        raise NotImplementedError

    def new_sym_key(self) -> bytes:
        return self.random_bytes(self.sym_key_size)


class HashCryptoProvider(CryptoProvider):
    """Deterministic test double.  Offers no real secrecy.

    Signatures are HMACs under the private key; verification looks the
    private key up in a registry of every key this provider instance has
    produced.  Asymmetric "encryption" is keyed by the public key and
    authenticated with a tag bound to it, so decrypting with the wrong key
    pair fails the way a real scheme would.
    """

    name = "double"
    SIG_SIZE = 20
    TAG = 8

    def __init__(self, seed: int | None = 0):
        super().__init__(seed)
        self._secrets: dict[int, bytes] = {}

    def derive_keypair(self, seed: bytes) -> KeyPair:
        priv = hashlib.sha256(b"priv" + seed).digest()
        return self.import_private(priv)

    def import_private(self, data: bytes) -> KeyPair:
        pub = ids.hash160(b"pub" + data)
        self._secrets[pub] = data
        return KeyPair(pub, data)

    def sign(self, kp, message):
        return hmac.new(kp.private_key, message, hashlib.sha1).digest()

    def verify(self, public_key, message, signature):
        priv = self._secrets.get(public_key)
        if priv is None or len(signature) != self.SIG_SIZE:
            return False
        return hmac.compare_digest(hmac.new(priv, message, hashlib.sha1).digest(), signature)

    def _stream(self, key: bytes, nonce: bytes, n: int) -> bytes:
        return hashlib.shake_128(key + nonce).digest(n)

    def _tag(self, key: bytes, nonce: bytes, body: bytes) -> bytes:
        return hashlib.sha1(b"tag" + key + nonce + body).digest()[: self.TAG]

    def encrypt(self, public_key, message):
        key = ids.to_bytes(public_key)
        nonce = hashlib.sha1(b"n" + key + message).digest()[:8]
        body = _xor(message, self._stream(key, nonce, len(message)))
        return nonce + body + self._tag(key, nonce, body)

    def decrypt(self, kp, ciphertext):
        return self._open(ids.to_bytes(kp.public_key), ciphertext, 8)

    def _open(self, key, ciphertext, nlen):
        if len(ciphertext) < nlen + self.TAG:
            raise DecryptionError("ciphertext too short")
        nonce, body, tag = ciphertext[:nlen], ciphertext[nlen:-self.TAG], ciphertext[-self.TAG:]
        if not hmac.compare_digest(self._tag(key, nonce, body), tag):
            raise DecryptionError("authentication failed")
        return _xor(body, self._stream(key, nonce, len(body)))

    def sym_encrypt(self, key, message):
        nonce = hashlib.sha1(b"s" + key + message).digest()[:12]
        body = _xor(message, self._stream(key, nonce, len(message)))
        return nonce + body + self._tag(key, nonce, body)

    def sym_decrypt(self, key, ciphertext):
        return self._open(key, ciphertext, 12)


class EccCryptoProvider(CryptoProvider):
    """secp160r1 ECDSA + ECIES (ECDH, HKDF-SHA256, AES-128-GCM), AES-128-GCM."""

    name = "ecc"
    SIG_SIZE = 42

    def __init__(self, seed: int | None = None):
        super().__init__(seed)
        import ecdsa
        from ecdsa import util
        from cryptography.hazmat.primitives.ciphers.aead import AESGCM

        self._ecdsa = ecdsa
        self._util = util
        self._aesgcm = AESGCM
        self.curve = ecdsa.SECP160r1
        self.order = self.curve.order
        self._vk_cache: dict[int, object] = {}

    def _normalize(self, d: int) -> tuple[int, object]:
        point = self.curve.generator * d
        if point.y() & 1:
            d = self.order - d
            point = self.curve.generator * d
        return d, point

    def derive_keypair(self, seed):
        d = int.from_bytes(hashlib.sha256(b"ecc" + seed).digest(), "big") % (self.order - 1) + 1
        d, point = self._normalize(d)
        return KeyPair(point.x(), d.to_bytes(21, "big"))

    def import_private(self, data):
        d, point = self._normalize(int.from_bytes(data, "big"))
        return KeyPair(point.x(), d.to_bytes(21, "big"))

    def _point(self, public_key: int):
        vk = self._vk_cache.get(public_key)
        if vk is None:
            try:
                vk = self._ecdsa.VerifyingKey.from_string(
                    b"\x02" + public_key.to_bytes(20, "big"), curve=self.curve)
            except Exception as exc:
                raise CryptoError("not a curve point") from exc
            self._vk_cache[public_key] = vk
        return vk

    def sign(self, kp, message):
        sk = self._ecdsa.SigningKey.from_secret_exponent(
            int.from_bytes(kp.private_key, "big"), curve=self.curve, hashfunc=hashlib.sha1)
        return sk.sign_deterministic(message, hashfunc=hashlib.sha1,
                                     sigencode=self._util.sigencode_string)

    def verify(self, public_key, message, signature):
        if len(signature) != self.SIG_SIZE:
            return False
        try:
            vk = self._point(public_key)
            return vk.verify(signature, message, hashfunc=hashlib.sha1,
                             sigdecode=self._util.sigdecode_string)
        except Exception:
            return False

    def _kdf(self, shared_x: int, ephemeral: bytes) -> bytes:
        from cryptography.hazmat.primitives import hashes
        from cryptography.hazmat.primitives.kdf.hkdf import HKDF

        return HKDF(hashes.SHA256(), 16, salt=None, info=b"ecies" + ephemeral).derive(
            shared_x.to_bytes(20, "big"))

    def encrypt(self, public_key, message):
        point = self._point(public_key).pubkey.point
        e = int.from_bytes(self.random_bytes(21), "big") % (self.order - 1) + 1
        eph = self.curve.generator * e
        eph_bytes = bytes([2 + (eph.y() & 1)]) + eph.x().to_bytes(20, "big")
        key = self._kdf((point * e).x(), eph_bytes)
        return eph_bytes + self._aesgcm(key).encrypt(b"\x00" * 12, message, None)

    def decrypt(self, kp, ciphertext):
        if len(ciphertext) < 21 + 16:
            raise DecryptionError("ciphertext too short")
        eph_bytes = ciphertext[:21]
        try:
            eph = self._ecdsa.VerifyingKey.from_string(eph_bytes, curve=self.curve).pubkey.point
        except Exception as exc:
            raise DecryptionError("bad ephemeral point") from exc
        key = self._kdf((eph * int.from_bytes(kp.private_key, "big")).x(), eph_bytes)
        try:
            return self._aesgcm(key).decrypt(b"\x00" * 12, ciphertext[21:], None)
        except Exception as exc:
            raise DecryptionError("authentication failed") from exc

    def sym_encrypt(self, key, message):
        nonce = self.random_bytes(12)
        return nonce + self._aesgcm(key).encrypt(nonce, message, None)

    def sym_decrypt(self, key, ciphertext):
        if len(ciphertext) < 28:
            raise DecryptionError("ciphertext too short")
        try:
            return self._aesgcm(key).decrypt(ciphertext[:12], ciphertext[12:], None)
        except Exception as exc:
            raise DecryptionError("authentication failed") from exc


def make_provider(name: str, seed: int | None = 0) -> CryptoProvider:
    if name == "double":
        return HashCryptoProvider(seed)
    if name == "ecc":
        return EccCryptoProvider(seed)
    raise ValueError(f"unknown crypto provider {name!r}")
