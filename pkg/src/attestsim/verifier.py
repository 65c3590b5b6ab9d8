"""Remote user: measurement policy, attestation driver and trust decision."""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, FrozenSet, Iterable, Optional

from . import protocol
from .codec import Challenge, ChallengeResponse, RegistryRecord, RevocationList, decode, encode
from .crypto import Digest, VerifyingKey
from .errors import CodecError, DeviceRevoked, NotFound, RegistryError
from .protocol import NonceLedger, RejectReason, SecureChannel, VerificationError
from .registry import verify_revocation_list

logger = logging.getLogger(__name__)

Transport = Callable[[bytes], bytes]


class Verdict(str, Enum):
    TRUSTED = "Trusted"
    UNTRUSTED = "Untrusted"


class Reason(str, Enum):
    OK = "Ok"
    UNKNOWN_FSBL = "UnknownFsbl"
    UNKNOWN_PROGRAM = "UnknownProgram"
    REVOKED_FSBL = "RevokedFsbl"
    REVOKED_DEVICE = "RevokedDevice"
    PROTOCOL_REJECT = "ProtocolReject"


@dataclass(frozen=True)
class TrustDecision:
    verdict: Verdict
    reason: Reason
    protocol_reason: Optional[RejectReason] = None

    def __post_init__(self) -> None:
        if (self.verdict is Verdict.TRUSTED) != (self.reason is Reason.OK):
            raise ValueError("verdict is Trusted exactly when reason is Ok")
        if (self.reason is Reason.PROTOCOL_REJECT) != (self.protocol_reason is not None):
            raise ValueError("protocol_reason must accompany ProtocolReject only")

    @classmethod
    def trusted(cls) -> "TrustDecision":
        return cls(Verdict.TRUSTED, Reason.OK)

    @classmethod
    def untrusted(cls, reason: Reason) -> "TrustDecision":
        return cls(Verdict.UNTRUSTED, reason)

    @classmethod
    def rejected(cls, reason: RejectReason) -> "TrustDecision":
        return cls(Verdict.UNTRUSTED, Reason.PROTOCOL_REJECT, reason)

    @property
    def label(self) -> str:
        if self.protocol_reason is not None:
            return f"ProtocolReject({self.protocol_reason.value})"
        return self.reason.value

    @property
    def outcome(self) -> str:
        """``Trusted`` or the rejection label; what harness expectations match on."""
        return "Trusted" if self.verdict is Verdict.TRUSTED else self.label

    def __str__(self) -> str:
        return f"{self.verdict.value}({self.label})" if self.verdict is Verdict.UNTRUSTED else "Trusted"


@dataclass(frozen=True)
class MeasurementPolicy:
    approved_fsbl: FrozenSet[Digest] = frozenset()
    approved_programs: FrozenSet[Digest] = frozenset()

    @classmethod
    def of(cls, fsbl: Iterable[Digest], programs: Iterable[Digest]) -> "MeasurementPolicy":
        return cls(frozenset(fsbl), frozenset(programs))

    @property
    def empty(self) -> bool:
        return not self.approved_fsbl or not self.approved_programs

    def union(self, other: "MeasurementPolicy") -> "MeasurementPolicy":
        return MeasurementPolicy(self.approved_fsbl | other.approved_fsbl,
                                 self.approved_programs | other.approved_programs)

    @classmethod
    def parse(cls, text: str) -> "MeasurementPolicy":
        sections = {"fsbl": set(), "programs": set()}
        current = None
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1].strip()
                if current not in sections:
                    raise ValueError(f"line {lineno}: unknown section [{current}]")
                continue
            if current is None:
                raise ValueError(f"line {lineno}: digest outside a section")
            try:
                sections[current].add(Digest.fromhex(line))
            except ValueError as exc:
                raise ValueError(f"line {lineno}: not a 32-byte hex digest") from exc
        return cls(frozenset(sections["fsbl"]), frozenset(sections["programs"]))

    @classmethod
    def load(cls, path) -> "MeasurementPolicy":
        return cls.parse(Path(path).read_text())

    def dumps(self) -> str:
        lines = ["[fsbl]"]
        lines += sorted(d.hex() for d in self.approved_fsbl)
        lines.append("[programs]")
        lines += sorted(d.hex() for d in self.approved_programs)
        return "\n".join(lines) + "\n"


@dataclass
class AttestationResult:
    decision: TrustDecision
    channel: Optional[SecureChannel] = None
    context: Optional[protocol.SessionContext] = None
    challenge: Optional[Challenge] = None
    response: Optional[ChallengeResponse] = None
    dh: Optional[object] = field(default=None, repr=False)
    detail: str = ""

    @property
    def trusted(self) -> bool:
        return self.decision.verdict is Verdict.TRUSTED


def fetch_device_key(registry, serial_number: int, fsbl_digest: Digest,
                     revocations: Optional[RevocationList] = None) -> VerifyingKey:
    record = registry.lookup(serial_number, fsbl_digest)
    revoked = record.revoked
    if revocations is not None:
        revoked = revoked or (serial_number, fsbl_digest) in revocations.revoked_device_records
    if revoked:
        raise DeviceRevoked(f"device {serial_number} key revoked")
    return record.device_public_key


def decide(
    response: ChallengeResponse,
    challenge: Challenge,
    record: RegistryRecord,
    revocations: RevocationList,
    policy: MeasurementPolicy,
    seen_nonces,
) -> tuple[TrustDecision, Optional[protocol.SessionContext]]:
    """Pure trust decision for one received response.

    Protocol checks run first since nothing in an unauthenticated report can
    be believed; revocation outranks unknown measurements.
    """
    try:
        ctx = protocol.verify_response(response, challenge, record.device_public_key, seen_nonces)
    except VerificationError as exc:
        return TrustDecision.rejected(exc.reason), None
    report = response.report
    if report.fsbl_digest in revocations.revoked_fsbl_digests:
        return TrustDecision.untrusted(Reason.REVOKED_FSBL), ctx
    if record.revoked or (report.serial_number, report.fsbl_digest) in revocations.revoked_device_records:
        return TrustDecision.untrusted(Reason.REVOKED_DEVICE), ctx
    if report.fsbl_digest not in policy.approved_fsbl:
        return TrustDecision.untrusted(Reason.UNKNOWN_FSBL), ctx
    if report.program_digest not in policy.approved_programs:
        return TrustDecision.untrusted(Reason.UNKNOWN_PROGRAM), ctx
    return TrustDecision.trusted(), ctx


class RemoteUser:
    """Drives attestation against one registry with one policy.

    ``seen_nonces`` is shared across every session this user runs.
    """

    def __init__(self, registry, policy: MeasurementPolicy,
                 service_key: Optional[VerifyingKey] = None,
                 rng: Optional[random.Random] = None,
                 seen_nonces: Optional[NonceLedger] = None) -> None:
        self.registry = registry
        self.policy = policy
        self.service_key = service_key if service_key is not None else registry.service_public_key
        self.rng = rng
        self.seen_nonces = seen_nonces if seen_nonces is not None else NonceLedger()

    def fetch_device_key(self, serial_number: int, fsbl_digest: Digest) -> VerifyingKey:
        return fetch_device_key(self.registry, serial_number, fsbl_digest, self._revocations())

    def _revocations(self) -> RevocationList:
        rl = self.registry.revocations()
        if not verify_revocation_list(rl, self.service_key):
            raise RegistryError("revocation list signature invalid")
        return rl

    def attest(self, transport: Transport, expected_serial: Optional[int] = None,
               challenge: Optional[Challenge] = None, dh=None) -> AttestationResult:
        """Run one exchange over ``transport`` (challenge frame in, response frame out).

        With ``expected_serial`` the device key is fetched for that serial,
        whatever the report claims, so only Dev(expected_serial) can pass.
        ``challenge``/``dh`` let a caller reuse a challenge; normally a fresh
        one is drawn.
        """
        if self.policy.empty:
            raise ValueError("measurement policy must approve at least one FSBL and one program")
        try:
            rl = self._revocations()
        except (RegistryError, CodecError, OSError) as exc:
            return AttestationResult(TrustDecision.rejected(RejectReason.TRANSPORT),
                                     detail=f"revocation list: {exc}")
        if challenge is None:
            challenge, dh = protocol.new_challenge(self.rng)
        result = AttestationResult(TrustDecision.rejected(RejectReason.TRANSPORT),
                                   challenge=challenge, dh=dh)

        try:
            frame = transport(encode(challenge))
        except (OSError, EOFError, TimeoutError) as exc:
            result.detail = f"transport: {exc}"
            return result
        if not frame:
            result.detail = "no response"
            return result
        try:
            response = decode(frame, expect=ChallengeResponse)
        except CodecError as exc:
            result.decision = TrustDecision.rejected(RejectReason.MALFORMED)
            result.detail = str(exc)
            return result
        result.response = response

        try:
            serial = expected_serial if expected_serial is not None else response.report.serial_number
            record = self.registry.lookup(serial, response.report.fsbl_digest)
        except NotFound:
            result.decision = TrustDecision.rejected(RejectReason.UNKNOWN_DEVICE)
            return result
        except (RegistryError, CodecError, OSError) as exc:
            result.detail = f"registry: {exc}"
            return result

        decision, ctx = decide(response, challenge, record, rl, self.policy, self.seen_nonces)
        result.decision, result.context = decision, ctx
        if decision.verdict is Verdict.TRUSTED:
            result.channel = protocol.establish_channel(ctx, dh, self.rng)
        logger.debug("attest serial=%d -> %s", response.report.serial_number, decision)
        return result
