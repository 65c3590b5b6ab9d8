"""Canonical binary encoding for every message that crosses a boundary.

Rules: fixed field order, big-endian integers, variable fields carry a u32
length prefix, sets are sorted and duplicate-free, booleans are 0x00/0x01.
Decoding rejects anything another encoder could not have produced, so each
message has exactly one encoding.

Frames on the wire are ``u32 length || u8 opcode || body`` where the length
counts the opcode and the body.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields as dc_fields
from typing import Any, ClassVar, Dict, FrozenSet, Iterator, List, Tuple, Type

from . import crypto
from .crypto import DhPublic, Digest, VerifyingKey
from .errors import CodecError

MAX_FRAME = 1 << 20
NONCE_SIZE = 16


class Reader:
    def __init__(self, data: bytes) -> None:
        self._data = memoryview(bytes(data))
        self._pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self._pos + n > len(self._data):
            raise CodecError("truncated input")
        out = self._data[self._pos:self._pos + n].tobytes()
        self._pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.take(8))[0]

    def var(self) -> bytes:
        n = self.u32()
        if n > MAX_FRAME:
            raise CodecError("length prefix exceeds frame limit")
        return self.take(n)

    def finish(self) -> None:
        if self._pos != len(self._data):
            raise CodecError(f"{len(self._data) - self._pos} trailing bytes")


class Writer:
    def __init__(self) -> None:
        self._parts: List[bytes] = []

    def raw(self, b: bytes) -> None:
        self._parts.append(bytes(b))

    def u8(self, v: int) -> None:
        self.raw(struct.pack(">B", v))

    def u32(self, v: int) -> None:
        self.raw(struct.pack(">I", v))

    def u64(self, v: int) -> None:
        self.raw(struct.pack(">Q", v))

    def var(self, b: bytes) -> None:
        self.u32(len(b))
        self.raw(b)

    def tell(self) -> int:
        return sum(len(p) for p in self._parts)

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


# Field kinds.  Each knows how to write and read one value canonically.

class Kind:
    name = "?"
    prefixed = False

    def write(self, w: Writer, v: Any) -> None:
        raise NotImplementedError

    def read(self, r: Reader) -> Any:
        raise NotImplementedError


class _Int(Kind):
    def __init__(self, name: str, bits: int) -> None:
        self.name, self.bits = name, bits

    def write(self, w, v):
        if not isinstance(v, int) or isinstance(v, bool) or not 0 <= v < (1 << self.bits):
            raise CodecError(f"{self.name} out of range: {v!r}")
        {8: w.u8, 32: w.u32, 64: w.u64}[self.bits](v)

    def read(self, r):
        return {8: r.u8, 32: r.u32, 64: r.u64}[self.bits]()


class _Bool(Kind):
    name = "bool"

    def write(self, w, v):
        w.u8(1 if v else 0)

    def read(self, r):
        b = r.u8()
        if b > 1:
            raise CodecError("non-canonical boolean")
        return b == 1


class _Fixed(Kind):
    """Fixed-width octet string, optionally wrapped in a value type."""

    def __init__(self, name: str, size: int, wrap=None) -> None:
        self.name, self.size, self.wrap = name, size, wrap

    def write(self, w, v):
        raw = bytes(v.value if self.wrap else v)
        if len(raw) != self.size:
            raise CodecError(f"{self.name} must be {self.size} bytes")
        w.raw(raw)

    def read(self, r):
        raw = r.take(self.size)
        return self.wrap(raw) if self.wrap else raw


class _SizedVar(Kind):
    """Length-prefixed field whose length is pinned by the suite."""

    prefixed = True

    def __init__(self, name: str, size: int, wrap=None) -> None:
        self.name, self.size, self.wrap = name, size, wrap

    def write(self, w, v):
        raw = bytes(v.value if self.wrap else v)
        if len(raw) != self.size:
            raise CodecError(f"{self.name} must be {self.size} bytes")
        w.var(raw)

    def read(self, r):
        raw = r.var()
        if len(raw) != self.size:
            raise CodecError(f"{self.name} must be {self.size} bytes, got {len(raw)}")
        return self.wrap(raw) if self.wrap else raw


class _Blob(Kind):
    name = "bytes"
    prefixed = True

    def write(self, w, v):
        w.var(bytes(v))

    def read(self, r):
        return r.var()


class _Text(Kind):
    name = "text"
    prefixed = True

    def write(self, w, v):
        w.var(v.encode("utf-8"))

    def read(self, r):
        try:
            return r.var().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CodecError("invalid utf-8") from exc


class _Suite(Kind):
    name = "suite"

    def write(self, w, v):
        if v not in crypto.SUPPORTED_SUITES:
            raise CodecError(f"unsupported suite {v!r}")
        w.u8(v)

    def read(self, r):
        v = r.u8()
        if v not in crypto.SUPPORTED_SUITES:
            raise CodecError(f"unsupported suite 0x{v:02x}")
        return v


class _Nested(Kind):
    prefixed = True

    def __init__(self, cls) -> None:
        self.cls = cls
        self.name = cls.__name__

    def write(self, w, v):
        if not isinstance(v, self.cls):
            raise CodecError(f"expected {self.cls.__name__}")
        w.var(encode_body(v))

    def read(self, r):
        return decode_body(self.cls, r.var())


class _SortedSet(Kind):
    def __init__(self, name: str, item_write, item_read, key) -> None:
        self.name, self._iw, self._ir, self._key = name, item_write, item_read, key

    def write(self, w, v):
        items = sorted(v, key=self._key)
        w.u32(len(items))
        for item in items:
            self._iw(w, item)

    def read(self, r):
        n = r.u32()
        if n > MAX_FRAME:
            raise CodecError("set too large")
        items = [self._ir(r) for _ in range(n)]
        keys = [self._key(i) for i in items]
        if any(a >= b for a, b in zip(keys, keys[1:])):
            raise CodecError("set not in canonical order")
        return frozenset(items)


U8 = _Int("u8", 8)
U32 = _Int("u32", 32)
U64 = _Int("u64", 64)
BOOL = _Bool()
DIGEST = _Fixed("digest", crypto.DIGEST_SIZE, Digest)
NONCE = _Fixed("nonce", NONCE_SIZE)
VKEY = _SizedVar("verifying_key", crypto.VERIFYING_KEY_SIZE, VerifyingKey)
DHPUB = _SizedVar("dh_public", crypto.DH_PUBLIC_SIZE, DhPublic)
SIG = _SizedVar("signature", crypto.SIGNATURE_SIZE)
BLOB = _Blob()
TEXT = _Text()
SUITE = _Suite()
DIGEST_SET = _SortedSet(
    "digest_set",
    lambda w, d: w.raw(d.value),
    lambda r: Digest(r.take(crypto.DIGEST_SIZE)),
    key=lambda d: d.value,
)


def _write_devrec(w: Writer, item: Tuple[int, Digest]) -> None:
    U64.write(w, item[0])
    w.raw(item[1].value)


def _read_devrec(r: Reader) -> Tuple[int, Digest]:
    return r.u64(), Digest(r.take(crypto.DIGEST_SIZE))


DEVICE_RECORD_SET = _SortedSet(
    "device_record_set", _write_devrec, _read_devrec,
    key=lambda t: (t[0], t[1].value),
)


class _SessionKeyKind(Kind):
    """Signing key || DH key, carried as one length-prefixed field."""

    name = "session_public_key"
    prefixed = True

    def write(self, w, v):
        w.var(v.signing.value + v.dh.value)

    def read(self, r):
        raw = r.var()
        if len(raw) != crypto.VERIFYING_KEY_SIZE + crypto.DH_PUBLIC_SIZE:
            raise CodecError("session public key has the wrong length")
        return SessionPublicKey(VerifyingKey(raw[:32]), DhPublic(raw[32:]))


SESSION_KEY = _SessionKeyKind()


# Message registry.

_BY_OPCODE: Dict[int, type] = {}


def message(opcode: int):
    def register(cls):
        if opcode in _BY_OPCODE:
            raise RuntimeError(f"duplicate opcode 0x{opcode:02x}")
        cls.OPCODE = opcode
        _BY_OPCODE[opcode] = cls
        return cls
    return register


def message_types() -> Dict[int, type]:
    return dict(_BY_OPCODE)


def encode_body(msg: Any) -> bytes:
    w = Writer()
    for name, kind in msg.FIELDS:
        kind.write(w, getattr(msg, name))
    return w.getvalue()


def decode_body(cls: type, data: bytes) -> Any:
    r = Reader(data)
    values = {name: kind.read(r) for name, kind in cls.FIELDS}
    r.finish()
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise CodecError(str(exc)) from exc


def encode(msg: Any) -> bytes:
    """Frame ``msg`` as ``length || opcode || body``."""
    body = encode_body(msg)
    if len(body) + 1 > MAX_FRAME:
        raise CodecError("message exceeds frame limit")
    return struct.pack(">IB", len(body) + 1, msg.OPCODE) + body


def decode(data: bytes, expect: type | None = None) -> Any:
    if len(data) > MAX_FRAME + 4:
        raise CodecError("input exceeds 1 MiB")
    if len(data) < 5:
        raise CodecError("truncated frame header")
    (length,) = struct.unpack(">I", data[:4])
    if length != len(data) - 4:
        raise CodecError(f"frame length {length} does not match {len(data) - 4} available bytes")
    opcode = data[4]
    cls = _BY_OPCODE.get(opcode)
    if cls is None:
        raise CodecError(f"unknown opcode 0x{opcode:02x}")
    if expect is not None and cls is not expect:
        raise CodecError(f"expected {expect.__name__}, got {cls.__name__}")
    return decode_body(cls, data[5:])


def read_frame(stream) -> bytes:
    """Read one frame from a binary file-like object; b'' on clean EOF."""
    header = stream.read(4)
    if not header:
        return b""
    if len(header) < 4:
        raise CodecError("truncated frame header")
    (length,) = struct.unpack(">I", header)
    if length == 0 or length > MAX_FRAME:
        raise CodecError(f"bad frame length {length}")
    body = stream.read(length)
    if len(body) != length:
        raise CodecError("truncated frame")
    return header + body


def iter_frames(data: bytes) -> Iterator[bytes]:
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise CodecError("truncated frame header")
        (length,) = struct.unpack(">I", data[pos:pos + 4])
        end = pos + 4 + length
        if length == 0 or end > len(data):
            raise CodecError("truncated frame")
        yield data[pos:end]
        pos = end


def field_spans(msg: Any) -> Dict[str, Tuple[int, int]]:
    """Byte ranges ``[start, end)`` of each leaf field's content inside ``encode(msg)``.

    Length prefixes are excluded, so overwriting a span in place keeps the
    framing valid.
    """
    spans: Dict[str, Tuple[int, int]] = {}

    def walk(m: Any, base: int, prefix: str) -> None:
        w = Writer()
        for name, kind in m.FIELDS:
            start = w.tell() + (4 if kind.prefixed else 0)
            kind.write(w, getattr(m, name))
            if isinstance(kind, _Nested):
                walk(getattr(m, name), base + start, f"{prefix}{name}.")
            else:
                spans[f"{prefix}{name}"] = (base + start, base + w.tell())

    walk(msg, 5, "")
    return spans


def field_paths(cls: type, prefix: str = "") -> List[str]:
    """Dotted paths of every leaf field, recursing into nested messages."""
    out = []
    for name, kind in cls.FIELDS:
        path = f"{prefix}{name}"
        if isinstance(kind, _Nested):
            out.extend(field_paths(kind.cls, path + "."))
        else:
            out.append(path)
    return out


def field_kind(cls: type, path: str) -> Kind:
    head, _, rest = path.partition(".")
    for name, kind in cls.FIELDS:
        if name == head:
            if rest:
                if not isinstance(kind, _Nested):
                    raise KeyError(path)
                return field_kind(kind.cls, rest)
            return kind
    raise KeyError(path)


# Protocol values.

@dataclass(frozen=True)
class SessionPublicKey:
    signing: VerifyingKey
    dh: DhPublic


@message(0x03)
@dataclass(frozen=True)
class AttestationReport:
    serial_number: int
    fsbl_digest: Digest
    program_digest: Digest
    session_public_key: SessionPublicKey
    suite_id: int
    device_signature: bytes

    FIELDS: ClassVar = (
        ("serial_number", U64),
        ("fsbl_digest", DIGEST),
        ("program_digest", DIGEST),
        ("session_public_key", SESSION_KEY),
        ("suite_id", SUITE),
        ("device_signature", SIG),
    )

    def signed_payload(self) -> bytes:
        w = Writer()
        for name, kind in self.FIELDS[:-1]:
            kind.write(w, getattr(self, name))
        return w.getvalue()


@message(0x01)
@dataclass(frozen=True)
class Challenge:
    verifier_public: DhPublic
    nonce: bytes

    FIELDS: ClassVar = (("verifier_public", DHPUB), ("nonce", NONCE))


@message(0x02)
@dataclass(frozen=True)
class ChallengeResponse:
    report: AttestationReport
    echoed_challenge: Challenge
    session_signature: bytes

    FIELDS: ClassVar = (
        ("report", _Nested(AttestationReport)),
        ("echoed_challenge", _Nested(Challenge)),
        ("session_signature", SIG),
    )

    def signed_payload(self) -> bytes:
        return session_signed_payload(self.report, self.echoed_challenge)


def session_signed_payload(report: AttestationReport, challenge: Challenge) -> bytes:
    w = Writer()
    w.var(encode_body(report))
    w.var(encode_body(challenge))
    return w.getvalue()


@message(0x04)
@dataclass(frozen=True)
class SealedMessage:
    box: bytes

    FIELDS: ClassVar = (("box", BLOB),)


@message(0x05)
@dataclass(frozen=True)
class SessionContext:
    serial_number: int
    fsbl_digest: Digest
    program_digest: Digest
    device_public_key: VerifyingKey
    session_public_key: SessionPublicKey
    verifier_public: DhPublic

    FIELDS: ClassVar = (
        ("serial_number", U64),
        ("fsbl_digest", DIGEST),
        ("program_digest", DIGEST),
        ("device_public_key", VKEY),
        ("session_public_key", SESSION_KEY),
        ("verifier_public", DHPUB),
    )


# Registry values.

@message(0x10)
@dataclass(frozen=True)
class FsblImage:
    code_bytes: bytes
    public_key: VerifyingKey
    signature: bytes

    FIELDS: ClassVar = (("code_bytes", BLOB), ("public_key", VKEY), ("signature", SIG))

    @property
    def digest(self) -> Digest:
        return crypto.hash_data(self.code_bytes)


@message(0x11)
@dataclass(frozen=True)
class FsblRelease:
    fsbl: FsblImage
    version: int
    revoked: bool

    FIELDS: ClassVar = (("fsbl", _Nested(FsblImage)), ("version", U32), ("revoked", BOOL))


@message(0x12)
@dataclass(frozen=True)
class RegistryRecord:
    serial_number: int
    fsbl_digest: Digest
    device_public_key: VerifyingKey
    revoked: bool

    FIELDS: ClassVar = (
        ("serial_number", U64),
        ("fsbl_digest", DIGEST),
        ("device_public_key", VKEY),
        ("revoked", BOOL),
    )


@message(0x13)
@dataclass(frozen=True)
class RevocationList:
    revoked_fsbl_digests: FrozenSet[Digest]
    revoked_device_records: FrozenSet[Tuple[int, Digest]]
    issued_at: int
    signature: bytes

    FIELDS: ClassVar = (
        ("revoked_fsbl_digests", DIGEST_SET),
        ("revoked_device_records", DEVICE_RECORD_SET),
        ("issued_at", U64),
        ("signature", SIG),
    )

    def signed_payload(self) -> bytes:
        w = Writer()
        for name, kind in self.FIELDS[:-1]:
            kind.write(w, getattr(self, name))
        return w.getvalue()


# Registry wire requests and replies.

@message(0x20)
@dataclass(frozen=True)
class ReleaseFsblRequest:
    code_bytes: bytes

    FIELDS: ClassVar = (("code_bytes", BLOB),)


@message(0x21)
@dataclass(frozen=True)
class RegisterRequest:
    serial_number: int
    fsbl_digest: Digest
    device_public_key: VerifyingKey

    FIELDS: ClassVar = (
        ("serial_number", U64),
        ("fsbl_digest", DIGEST),
        ("device_public_key", VKEY),
    )


@message(0x22)
@dataclass(frozen=True)
class LookupRequest:
    serial_number: int
    fsbl_digest: Digest

    FIELDS: ClassVar = (("serial_number", U64), ("fsbl_digest", DIGEST))


REVOKE_FSBL = 0
REVOKE_DEVICE = 1


@message(0x23)
@dataclass(frozen=True)
class RevokeRequest:
    target: int
    serial_number: int
    fsbl_digest: Digest

    FIELDS: ClassVar = (("target", U8), ("serial_number", U64), ("fsbl_digest", DIGEST))

    def __post_init__(self) -> None:
        if self.target not in (REVOKE_FSBL, REVOKE_DEVICE):
            raise ValueError(f"unknown revocation target {self.target}")
        if self.target == REVOKE_FSBL and self.serial_number != 0:
            raise ValueError("FSBL revocation carries serial 0")


@message(0x24)
@dataclass(frozen=True)
class GetRevocationsRequest:
    FIELDS: ClassVar = ()


@message(0x25)
@dataclass(frozen=True)
class ServiceInfoRequest:
    FIELDS: ClassVar = ()


@message(0x26)
@dataclass(frozen=True)
class ServiceInfo:
    boot_public_key: VerifyingKey
    service_public_key: VerifyingKey

    FIELDS: ClassVar = (("boot_public_key", VKEY), ("service_public_key", VKEY))


ERR_GENERIC = 1
ERR_NOT_FOUND = 2
ERR_CODEC = 3
ERR_FORBIDDEN = 4


@message(0x2F)
@dataclass(frozen=True)
class ErrorReply:
    code: int
    detail: str

    FIELDS: ClassVar = (("code", U8), ("detail", TEXT))


def replace_field(msg: Any, path: str, value: Any) -> Any:
    """Return a copy of ``msg`` with the dotted ``path`` set to ``value``."""
    from dataclasses import replace

    head, _, rest = path.partition(".")
    if head not in {f.name for f in dc_fields(msg)}:
        raise KeyError(path)
    if rest:
        return replace(msg, **{head: replace_field(getattr(msg, head), rest, value)})
    return replace(msg, **{head: value})


def get_field(msg: Any, path: str) -> Any:
    for part in path.split("."):
        msg = getattr(msg, part)
    return msg


Message = Any
MessageType = Type[Any]
