import hashlib
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attestsim import crypto
from attestsim.crypto import DhKeypair, Digest, SharedSecret, SigningKeypair
from attestsim.errors import ChannelError, ProvisioningError

EMPTY_SHA256 = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"


def test_hash_empty_known_answer():
    assert crypto.hash_data(b"").hex() == EMPTY_SHA256


def test_hash_deterministic():
    assert crypto.hash_data(b"abc" * 100) == crypto.hash_data(b"abc" * 100)


def test_digest_length_enforced():
    with pytest.raises(ValueError):
        Digest(b"\x00" * 31)


def test_fixture_images_hash_apart(fixtures):
    ours = crypto.hash_data(fixtures.p_plus), crypto.hash_data(fixtures.p_minus)
    # independent tool: sha256sum over the shipped files
    assert ours[0].hex() == "c122977bfae0b6c20f90ded01bdc853001eed95c4d5b18463b30b09ec1465827"
    assert ours[1].hex() == "aa2cb9aaaf10212525f6066b36c87dfe854e06672d9a28f0b9aa46c3cb3e17fd"
    assert ours[0] != ours[1]


def test_sign_verify_round_trip(rng):
    key = SigningKeypair.generate(rng)
    sig = crypto.sign(key, b"message")
    assert crypto.verify(key.public, b"message", sig)


def test_verify_wrong_key_rejects(rng):
    a, b = SigningKeypair.generate(rng), SigningKeypair.generate(rng)
    assert not crypto.verify(b.public, b"message", crypto.sign(a, b"message"))


def test_verify_every_bit_flip_rejects(rng):
    key = SigningKeypair.generate(rng)
    msg = bytes(range(48))
    sig = crypto.sign(key, msg)
    for pos in range(len(msg) * 8):
        flipped = bytearray(msg)
        flipped[pos // 8] ^= 1 << (pos % 8)
        assert not crypto.verify(key.public, bytes(flipped), sig)


@pytest.mark.parametrize("sig", [b"", b"\x00" * 63, b"\xff" * 64, b"\x00" * 65])
def test_malformed_signature_is_reject_not_exception(rng, sig):
    key = SigningKeypair.generate(rng)
    assert crypto.verify(key.public, b"m", sig) is False


def test_malformed_key_is_reject(rng):
    key = SigningKeypair.generate(rng)
    assert crypto.verify(b"\x01" * 7, b"m", crypto.sign(key, b"m")) is False


def test_sign_empty_message_rejected(rng):
    with pytest.raises(ValueError):
        crypto.sign(SigningKeypair.generate(rng), b"")


def test_public_key_derivable_from_private(rng):
    key = SigningKeypair.generate(rng)
    assert SigningKeypair(key.private_bytes()).public == key.public


_SIGNER = SigningKeypair.generate(random.Random(99))


@settings(max_examples=1000)
@given(st.binary(min_size=1, max_size=64 * 1024))
def test_sign_verify_property(msg):
    assert crypto.verify(_SIGNER.public, msg, crypto.sign(_SIGNER, msg))


def test_sign_verify_64kib_boundary():
    msg = random.Random(5).randbytes(64 * 1024)
    assert crypto.verify(_SIGNER.public, msg, crypto.sign(_SIGNER, msg))


# device key derivation

def test_device_key_deterministic():
    secret, fsbl = b"s" * 32, crypto.hash_data(b"fsbl")
    a = crypto.derive_device_keypair(secret, fsbl)
    b = crypto.derive_device_keypair(secret, fsbl)
    assert a.public == b.public


def test_device_key_changes_with_fsbl():
    secret = b"s" * 32
    a = crypto.derive_device_keypair(secret, crypto.hash_data(b"fsbl v1"))
    b = crypto.derive_device_keypair(secret, crypto.hash_data(b"fsbl v2"))
    assert a.public != b.public


def test_device_key_distinct_secrets_100():
    rng = random.Random(7)
    fsbl = crypto.hash_data(b"fsbl")
    pubs = {crypto.derive_device_keypair(rng.randbytes(32), fsbl).public for _ in range(100)}
    assert len(pubs) == 100


def test_device_key_matches_independent_kdf():
    import hmac

    from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
    from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

    secret, fsbl = bytes(range(32)), crypto.hash_data(b"fsbl")
    seed = hmac.new(secret, fsbl.value + b"tedge-devkey-v1", hashlib.sha256).digest()
    expected = Ed25519PrivateKey.from_private_bytes(seed).public_key().public_bytes(
        Encoding.Raw, PublicFormat.Raw)
    assert crypto.derive_device_keypair(secret, fsbl).public.value == expected


@pytest.mark.parametrize("n", [0, 8, 15])
def test_device_key_short_secret(n):
    with pytest.raises(ProvisioningError):
        crypto.derive_device_keypair(b"x" * n, crypto.hash_data(b"f"))


@given(st.binary(min_size=16, max_size=64), st.binary(min_size=32, max_size=32))
def test_device_key_pure(secret, digest):
    d = Digest(digest)
    assert crypto.derive_device_keypair(secret, d).private_bytes() == \
        crypto.derive_device_keypair(bytes(secret), Digest(bytes(digest))).private_bytes()


# Diffie-Hellman

def test_dh_symmetric(rng):
    a, b = DhKeypair.generate(rng), DhKeypair.generate(rng)
    assert crypto.dh_agree(a, b.public) == crypto.dh_agree(b, a.public)


def test_dh_distinct_peers_100():
    rng = random.Random(11)
    for _ in range(100):
        a, b, c = (DhKeypair.generate(rng) for _ in range(3))
        assert crypto.dh_agree(a, b.public) != crypto.dh_agree(a, c.public)


@pytest.mark.parametrize("peer", [bytes(32), b"\x01" + bytes(31), b"\x00" * 31])
def test_dh_degenerate_peer(rng, peer):
    with pytest.raises(ChannelError):
        crypto.dh_agree(DhKeypair.generate(rng), peer)


def test_shared_secret_repr_redacted():
    assert "ab" * 4 not in repr(SharedSecret(b"\xab" * 32))


# AEAD

def test_seal_round_trip(rng):
    key = SharedSecret(rng.randbytes(32))
    assert crypto.open(key, crypto.seal(key, b"payload", rng)) == b"payload"


def test_open_wrong_secret(rng):
    box = crypto.seal(SharedSecret(rng.randbytes(32)), b"payload", rng)
    with pytest.raises(ChannelError):
        crypto.open(SharedSecret(rng.randbytes(32)), box)


def test_seal_single_bit_sweep(rng):
    key = SharedSecret(rng.randbytes(32))
    box = crypto.seal(key, b"short payload", rng)
    for bit in range(len(box) * 8):
        bad = bytearray(box)
        bad[bit // 8] ^= 1 << (bit % 8)
        with pytest.raises(ChannelError):
            crypto.open(key, bytes(bad))


def test_open_truncated_box(rng):
    key = SharedSecret(rng.randbytes(32))
    with pytest.raises(ChannelError):
        crypto.open(key, b"\x00" * 10)


@given(st.binary(max_size=4096))
def test_seal_round_trip_property(data):
    key = SharedSecret(b"\x42" * 32)
    assert crypto.open(key, crypto.seal(key, data)) == data


def test_erase_zeroes_private_material(rng):
    key = SigningKeypair.generate(rng)
    buf = key._secret if hasattr(key, "_secret") else None
    key.erase()
    assert key.erased
    if buf is not None:
        assert not any(buf)
