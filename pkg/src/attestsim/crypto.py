"""Cryptographic suite: hash, signatures, key derivation, DH and AEAD.

Suite 0x01 is SHA-256 / Ed25519 / X25519 + HKDF-SHA256 / ChaCha20-Poly1305.
Callers never touch these algorithms directly, so a later suite only has to
change this module and the suite byte carried on the wire.

Every keypair generator takes an optional ``random.Random``.  When given, the
key material is drawn from it so transcripts are reproducible; otherwise
``os.urandom`` is used.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import random
from dataclasses import dataclass
from typing import Optional, Union

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from cryptography.hazmat.primitives.serialization import (
    Encoding,
    PublicFormat,
)

from .errors import ChannelError, ProvisioningError

SUITE_DEFAULT = 0x01
SUPPORTED_SUITES = frozenset({SUITE_DEFAULT})

DIGEST_SIZE = 32
SIGNATURE_SIZE = 64
VERIFYING_KEY_SIZE = 32
DH_PUBLIC_SIZE = 32
SECRET_SIZE = 32
AEAD_NONCE_SIZE = 12
AEAD_TAG_SIZE = 16

DEVICE_KEY_LABEL = b"tedge-devkey-v1"
DH_KDF_LABEL = b"tedge-dh-v1"
MIN_DEVICE_SECRET = 16


def random_bytes(n: int, rng: Optional[random.Random] = None) -> bytes:
    if rng is None:
        return os.urandom(n)
    return rng.randbytes(n)


@dataclass(frozen=True)
class Digest:
    value: bytes

    def __post_init__(self) -> None:
        if not isinstance(self.value, (bytes, bytearray)) or len(self.value) != DIGEST_SIZE:
            raise ValueError(f"digest must be {DIGEST_SIZE} bytes")
        object.__setattr__(self, "value", bytes(self.value))

    def __bytes__(self) -> bytes:
        return self.value

    def hex(self) -> str:
        return self.value.hex()

    @classmethod
    def fromhex(cls, text: str) -> "Digest":
        return cls(bytes.fromhex(text.strip()))


@dataclass(frozen=True)
class VerifyingKey:
    value: bytes

    def __post_init__(self) -> None:
        if len(self.value) != VERIFYING_KEY_SIZE:
            raise ValueError(f"verifying key must be {VERIFYING_KEY_SIZE} bytes")
        object.__setattr__(self, "value", bytes(self.value))

    def __bytes__(self) -> bytes:
        return self.value

    def hex(self) -> str:
        return self.value.hex()


@dataclass(frozen=True)
class DhPublic:
    value: bytes

    def __post_init__(self) -> None:
        if len(self.value) != DH_PUBLIC_SIZE:
            raise ValueError(f"DH public value must be {DH_PUBLIC_SIZE} bytes")
        object.__setattr__(self, "value", bytes(self.value))

    def __bytes__(self) -> bytes:
        return self.value

    def hex(self) -> str:
        return self.value.hex()


@dataclass(frozen=True, repr=False)
class SharedSecret:
    value: bytes

    def __post_init__(self) -> None:
        if len(self.value) != SECRET_SIZE:
            raise ValueError(f"shared secret must be {SECRET_SIZE} bytes")

    def __repr__(self) -> str:
        return "SharedSecret(<redacted>)"


class _PrivateMaterial:
    """Mutable holder for a 32-byte private scalar that can be wiped in place."""

    __slots__ = ("_secret",)

    def __init__(self, secret: bytes) -> None:
        if len(secret) != SECRET_SIZE:
            raise ValueError(f"private key must be {SECRET_SIZE} bytes")
        self._secret = bytearray(secret)

    @property
    def erased(self) -> bool:
        return self._secret is None

    def erase(self) -> None:
        if self._secret is not None:
            for i in range(len(self._secret)):
                self._secret[i] = 0
            self._secret = None

    def _material(self) -> bytes:
        if self._secret is None:
            raise ValueError("private key has been erased")
        return bytes(self._secret)

    def __repr__(self) -> str:
        state = "erased" if self.erased else "redacted"
        return f"{type(self).__name__}(<{state}>)"


class SigningKeypair(_PrivateMaterial):
    __slots__ = ("public",)

    def __init__(self, secret: bytes) -> None:
        super().__init__(secret)
        pub = Ed25519PrivateKey.from_private_bytes(bytes(secret)).public_key()
        self.public = VerifyingKey(pub.public_bytes(Encoding.Raw, PublicFormat.Raw))

    @classmethod
    def generate(cls, rng: Optional[random.Random] = None) -> "SigningKeypair":
        return cls(random_bytes(SECRET_SIZE, rng))

    def private_bytes(self) -> bytes:
        return self._material()

    def sign(self, message: bytes) -> bytes:
        return sign(self, message)


class DhKeypair(_PrivateMaterial):
    __slots__ = ("public",)

    def __init__(self, secret: bytes) -> None:
        super().__init__(secret)
        pub = X25519PrivateKey.from_private_bytes(bytes(secret)).public_key()
        self.public = DhPublic(pub.public_bytes(Encoding.Raw, PublicFormat.Raw))

    @classmethod
    def generate(cls, rng: Optional[random.Random] = None) -> "DhKeypair":
        return cls(random_bytes(SECRET_SIZE, rng))

    def private_bytes(self) -> bytes:
        return self._material()


def hash_data(data: bytes) -> Digest:
    return Digest(hashlib.sha256(data).digest())


def sign(key: SigningKeypair, message: bytes) -> bytes:
    if not message:
        raise ValueError("refusing to sign an empty message")
    return Ed25519PrivateKey.from_private_bytes(key.private_bytes()).sign(bytes(message))


def verify(key: Union[VerifyingKey, bytes], message: bytes, signature: bytes) -> bool:
    """Return True iff ``signature`` is valid for ``message`` under ``key``.

    Malformed keys or signatures are reported as a plain rejection.
    """
    raw = key.value if isinstance(key, VerifyingKey) else bytes(key)
    if len(signature) != SIGNATURE_SIZE:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(raw).verify(bytes(signature), bytes(message))
    except (InvalidSignature, ValueError):
        return False
    return True


def device_key_seed(device_secret: bytes, fsbl_digest: Digest) -> bytes:
    return hmac.new(bytes(device_secret), fsbl_digest.value + DEVICE_KEY_LABEL, hashlib.sha256).digest()


def derive_device_keypair(device_secret: bytes, fsbl_digest: Digest) -> SigningKeypair:
    """Derive the per-FSBL device signing key from the burned-in secret."""
    if len(device_secret) < MIN_DEVICE_SECRET:
        raise ProvisioningError(
            f"device secret must be at least {MIN_DEVICE_SECRET} bytes, got {len(device_secret)}"
        )
    return SigningKeypair(device_key_seed(device_secret, fsbl_digest))


def hkdf(ikm: bytes, info: bytes, length: int = SECRET_SIZE, salt: Optional[bytes] = None) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=length, salt=salt, info=info).derive(ikm)


def dh_agree(private: DhKeypair, peer: Union[DhPublic, bytes]) -> SharedSecret:
    raw = peer.value if isinstance(peer, DhPublic) else bytes(peer)
    if len(raw) != DH_PUBLIC_SIZE:
        raise ChannelError("peer DH value has the wrong length")
    try:
        shared = X25519PrivateKey.from_private_bytes(private.private_bytes()).exchange(
            X25519PublicKey.from_public_bytes(raw)
        )
    except ValueError as exc:
        raise ChannelError("degenerate DH peer value") from exc
    return SharedSecret(hkdf(shared, DH_KDF_LABEL))


def seal(secret: SharedSecret, plaintext: bytes, rng: Optional[random.Random] = None,
         aad: bytes = b"") -> bytes:
    """Encrypt and authenticate; the sealed box is nonce || ciphertext || tag."""
    nonce = random_bytes(AEAD_NONCE_SIZE, rng)
    return nonce + ChaCha20Poly1305(secret.value).encrypt(nonce, bytes(plaintext), aad)


def open(secret: SharedSecret, box: bytes, aad: bytes = b"") -> bytes:  # noqa: A001
    if len(box) < AEAD_NONCE_SIZE + AEAD_TAG_SIZE:
        raise ChannelError("sealed box too short")
    nonce, body = bytes(box[:AEAD_NONCE_SIZE]), bytes(box[AEAD_NONCE_SIZE:])
    try:
        return ChaCha20Poly1305(secret.value).decrypt(nonce, body, aad)
    except InvalidTag as exc:
        raise ChannelError("sealed box failed authentication") from exc
