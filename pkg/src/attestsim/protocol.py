"""Challenge-response attestation exchange and secure-channel bootstrap.

The device side answers a :class:`~attestsim.codec.Challenge` with its
boot-time report plus a signature by the session key over
``report || challenge``.  The verifier checks, in order: the echoed
challenge, the session signature, then the device signature on the report.
"""

from __future__ import annotations

import random
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Set

from . import crypto
from .codec import (
    AttestationReport,
    Challenge,
    ChallengeResponse,
    NONCE_SIZE,
    SealedMessage,
    SessionContext,
    SessionPublicKey,
    encode_body,
)
from .crypto import DhKeypair, Digest, SharedSecret, SigningKeypair, VerifyingKey
from .errors import ChannelError, LifecycleError

CHANNEL_LABEL = b"tedge-channel-v1"


class RejectReason(str, Enum):
    CHALLENGE_MISMATCH = "ChallengeMismatch"
    REPLAY_DETECTED = "ReplayDetected"
    SESSION_SIG_INVALID = "SessionSigInvalid"
    DEVICE_SIG_INVALID = "DeviceSigInvalid"
    # Not one of the three checks; raised by the layers around them.
    MALFORMED = "Malformed"
    TRANSPORT = "Transport"
    UNKNOWN_DEVICE = "UnknownDevice"


class VerificationError(Exception):
    def __init__(self, reason: RejectReason, detail: str = "") -> None:
        super().__init__(f"{reason.value}: {detail}" if detail else reason.value)
        self.reason = reason


class SessionKeys:
    """Ephemeral signing + DH keys created together at boot."""

    def __init__(self, signing: SigningKeypair, dh: DhKeypair) -> None:
        self.signing = signing
        self.dh = dh

    @classmethod
    def generate(cls, rng: Optional[random.Random] = None) -> "SessionKeys":
        return cls(SigningKeypair.generate(rng), DhKeypair.generate(rng))

    @property
    def public(self) -> SessionPublicKey:
        return SessionPublicKey(self.signing.public, self.dh.public)

    def erase(self) -> None:
        self.signing.erase()
        self.dh.erase()


def build_report(
    serial_number: int,
    fsbl_digest: Digest,
    program_digest: Digest,
    session_public: SessionPublicKey,
    device_key: SigningKeypair,
    suite_id: int = crypto.SUITE_DEFAULT,
) -> AttestationReport:
    unsigned = AttestationReport(
        serial_number=serial_number,
        fsbl_digest=fsbl_digest,
        program_digest=program_digest,
        session_public_key=session_public,
        suite_id=suite_id,
        device_signature=bytes(crypto.SIGNATURE_SIZE),
    )
    signature = crypto.sign(device_key, unsigned.signed_payload())
    return AttestationReport(
        serial_number, fsbl_digest, program_digest, session_public, suite_id, signature
    )


def verify_report(report: AttestationReport, device_key: VerifyingKey) -> bool:
    return crypto.verify(device_key, report.signed_payload(), report.device_signature)


def new_challenge(rng: Optional[random.Random] = None) -> tuple[Challenge, DhKeypair]:
    dh = DhKeypair.generate(rng)
    return Challenge(dh.public, crypto.random_bytes(NONCE_SIZE, rng)), dh


def sign_response(report: AttestationReport, challenge: Challenge,
                  session_key: SigningKeypair) -> ChallengeResponse:
    sig = crypto.sign(session_key, ChallengeResponse(report, challenge, b"").signed_payload())
    return ChallengeResponse(report, challenge, sig)


def respond(boot_state, challenge: Challenge) -> ChallengeResponse:
    """Answer ``challenge`` from a booted Secure OS."""
    from .device import Stage

    if boot_state is None or boot_state.stage is not Stage.SECURE_OS or boot_state.report is None:
        stage = getattr(boot_state, "stage", None)
        raise LifecycleError(f"cannot respond in stage {getattr(stage, 'name', stage)}")
    return sign_response(boot_state.report, challenge, boot_state.session_keys.signing)


class NonceLedger:
    """Thread-safe set of nonces already consumed by accepted sessions."""

    def __init__(self, initial=()) -> None:
        self._seen: Set[bytes] = set(initial)
        self._lock = threading.Lock()

    def __contains__(self, nonce: bytes) -> bool:
        with self._lock:
            return bytes(nonce) in self._seen

    def __len__(self) -> int:
        with self._lock:
            return len(self._seen)

    def claim(self, nonce: bytes) -> bool:
        """Record ``nonce``; False if it was already present."""
        with self._lock:
            if nonce in self._seen:
                return False
            self._seen.add(bytes(nonce))
            return True


def verify_response(
    resp: ChallengeResponse,
    expected_challenge: Challenge,
    registry_key: VerifyingKey,
    seen_nonces,
) -> SessionContext:
    """Run the three verifier checks; raise :class:`VerificationError` on failure.

    ``seen_nonces`` may be a :class:`NonceLedger` or a plain ``set``.  The
    nonce is only recorded once every check has passed.
    """
    if resp.echoed_challenge != expected_challenge:
        raise VerificationError(RejectReason.CHALLENGE_MISMATCH)
    nonce = resp.echoed_challenge.nonce
    if nonce in seen_nonces:
        raise VerificationError(RejectReason.REPLAY_DETECTED)
    session_pub = resp.report.session_public_key
    if not crypto.verify(session_pub.signing, resp.signed_payload(), resp.session_signature):
        raise VerificationError(RejectReason.SESSION_SIG_INVALID)
    if not verify_report(resp.report, registry_key):
        raise VerificationError(RejectReason.DEVICE_SIG_INVALID)

    if isinstance(seen_nonces, NonceLedger):
        if not seen_nonces.claim(nonce):
            raise VerificationError(RejectReason.REPLAY_DETECTED)
    else:
        seen_nonces.add(bytes(nonce))
    return context_for(resp.report, registry_key, expected_challenge)


def context_for(report: AttestationReport, device_public_key: VerifyingKey,
                challenge: Challenge) -> SessionContext:
    return SessionContext(
        serial_number=report.serial_number,
        fsbl_digest=report.fsbl_digest,
        program_digest=report.program_digest,
        device_public_key=device_public_key,
        session_public_key=report.session_public_key,
        verifier_public=challenge.verifier_public,
    )


class Role(str, Enum):
    VERIFIER = "verifier"
    DEVICE = "device"


class SecureChannel:
    """Authenticated encryption between verifier and device for one session.

    The key is DH(k_c, k_s) expanded under a label that commits to the whole
    session context, so a channel can only open on the context it was built for.
    """

    def __init__(self, secret: SharedSecret, role: Role, context: SessionContext,
                 rng: Optional[random.Random] = None) -> None:
        self._secret = secret
        self.role = role
        self.context = context
        self._rng = rng

    @property
    def secret(self) -> SharedSecret:
        return self._secret

    def _aad(self, sender: Role) -> bytes:
        return CHANNEL_LABEL + b"/" + sender.value.encode()

    def seal(self, plaintext: bytes) -> SealedMessage:
        return SealedMessage(crypto.seal(self._secret, plaintext, self._rng, self._aad(self.role)))

    def open(self, msg: SealedMessage) -> bytes:
        peer = Role.DEVICE if self.role is Role.VERIFIER else Role.VERIFIER
        return crypto.open(self._secret, msg.box, self._aad(peer))


def establish_channel(ctx: SessionContext, own_dh: DhKeypair,
                      rng: Optional[random.Random] = None) -> SecureChannel:
    """Derive the channel from whichever side of ``ctx`` ``own_dh`` belongs to."""
    if own_dh.public == ctx.verifier_public:
        role, peer = Role.VERIFIER, ctx.session_public_key.dh
    elif own_dh.public == ctx.session_public_key.dh:
        role, peer = Role.DEVICE, ctx.verifier_public
    else:
        raise ChannelError("DH key does not belong to this session context")
    shared = crypto.dh_agree(own_dh, peer)
    transcript = crypto.hash_data(encode_body(ctx)).value
    key = crypto.hkdf(shared.value, CHANNEL_LABEL + transcript)
    return SecureChannel(SharedSecret(key), role, ctx, rng)
