import pytest

from p2posn.crypto import DecryptionError, make_provider

PROVIDERS = ["double", "ecc"]


@pytest.fixture(params=PROVIDERS)
def prov(request):
    return make_provider(request.param, 7)


def test_sign_verify(prov):
    kp = prov.new_keypair()
    sig = prov.sign(kp, b"hello")
    assert prov.verify(kp.public_key, b"hello", sig)
    assert not prov.verify(kp.public_key, b"hellO", sig)
    assert not prov.verify(prov.new_keypair().public_key, b"hello", sig)


def test_asymmetric_round_trip_and_wrong_key(prov):
    a, b = prov.new_keypair(), prov.new_keypair()
    ct = prov.encrypt(a.public_key, b"secret")
    assert prov.decrypt(a, ct) == b"secret"
    with pytest.raises(DecryptionError):
        prov.decrypt(b, ct)


def test_symmetric_tamper_detected(prov):
    key = prov.new_sym_key()
    ct = bytearray(prov.sym_encrypt(key, b"payload"))
    assert prov.sym_decrypt(key, bytes(ct)) == b"payload"
    ct[-1] ^= 1
    with pytest.raises(DecryptionError):
        prov.sym_decrypt(key, bytes(ct))


def test_identity_is_derived_from_credentials(prov):
    a = prov.derive_identity("alice", "pw")
    assert a.public_key == prov.derive_identity("alice", "pw").public_key
    assert a.public_key != prov.derive_identity("alice", "other").public_key
    assert prov.import_private(prov.export_private(a)).public_key == a.public_key


def test_seeded_providers_are_reproducible():
    for name in PROVIDERS:
        a = make_provider(name, 5).new_keypair()
        b = make_provider(name, 5).new_keypair()
        assert a.public_key == b.public_key


def test_ecc_overhead_is_constant_over_payload_sizes():
    from p2posn.harness.checks import crypto_overhead

    rep = crypto_overhead(range(600, 2201, 400))
    assert rep.ok
    assert rep.sig[0] == 42 and rep.asym[0] == 37
