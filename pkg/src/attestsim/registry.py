"""Provisioning service: FSBL releases, device key records, revocation lists.

State is kept in an append-only file of canonical frames and rebuilt by
replaying it, so a restarted service answers every query exactly as before.
The service never sees a program measurement; its audit log records only the
``(serial, fsbl_digest)`` pairs that verifiers asked about.
"""

from __future__ import annotations

import ipaddress
import logging
import os
import random
import socket
import socketserver
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from . import crypto
from .codec import (
    ERR_CODEC,
    ERR_FORBIDDEN,
    ERR_GENERIC,
    ERR_NOT_FOUND,
    REVOKE_DEVICE,
    REVOKE_FSBL,
    ErrorReply,
    FsblImage,
    FsblRelease,
    GetRevocationsRequest,
    LookupRequest,
    RegisterRequest,
    RegistryRecord,
    ReleaseFsblRequest,
    RevocationList,
    RevokeRequest,
    ServiceInfo,
    ServiceInfoRequest,
    Writer,
    Reader,
    decode,
    encode,
    read_frame,
)
from .crypto import Digest, SigningKeypair, VerifyingKey
from .errors import CodecError, NotFound, RegistryError

logger = logging.getLogger(__name__)

RecordKey = Tuple[int, Digest]


@dataclass(frozen=True)
class AuditEntry:
    serial_number: int
    fsbl_digest: Digest


@dataclass(frozen=True)
class FsblTarget:
    fsbl_digest: Digest


@dataclass(frozen=True)
class DeviceTarget:
    serial_number: int
    fsbl_digest: Digest


RevocationTarget = Union[FsblTarget, DeviceTarget]


class ProvisioningService:
    def __init__(self, store_path: Optional[os.PathLike] = None,
                 rng: Optional[random.Random] = None) -> None:
        self._lock = threading.RLock()
        self._store = Path(store_path) if store_path is not None else None
        self.releases: List[FsblRelease] = []
        self._records: Dict[RecordKey, RegistryRecord] = {}
        self.revocation_history: List[RevocationList] = []
        self.audit_log: List[AuditEntry] = []
        self._boot_key, self._service_key = self._load_keys(rng)
        if self._store is not None and self._store.exists():
            self._replay()
        if not self.revocation_history:
            self._append(self._sign_list(frozenset(), frozenset(), 0))

    # keys and persistence

    def _load_keys(self, rng) -> Tuple[SigningKeypair, SigningKeypair]:
        keyfile = self._store.with_suffix(self._store.suffix + ".keys") if self._store else None
        if keyfile is not None and keyfile.exists():
            r = Reader(keyfile.read_bytes())
            boot, service = r.var(), r.var()
            r.finish()
            return SigningKeypair(boot), SigningKeypair(service)
        boot, service = SigningKeypair.generate(rng), SigningKeypair.generate(rng)
        if keyfile is not None:
            w = Writer()
            w.var(boot.private_bytes())
            w.var(service.private_bytes())
            keyfile.parent.mkdir(parents=True, exist_ok=True)
            fd = os.open(keyfile, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
            with os.fdopen(fd, "wb") as fh:
                fh.write(w.getvalue())
        return boot, service

    @property
    def audit_path(self) -> Optional[Path]:
        return self._store.with_suffix(self._store.suffix + ".audit") if self._store else None

    def _persist(self, msg) -> None:
        if self._store is None:
            return
        with open(self._store, "ab") as fh:
            fh.write(encode(msg))
            fh.flush()
            os.fsync(fh.fileno())

    def _replay(self) -> None:
        with open(self._store, "rb") as fh:
            while True:
                frame = read_frame(fh)
                if not frame:
                    break
                msg = decode(frame)
                if isinstance(msg, FsblRelease):
                    self.releases.append(msg)
                elif isinstance(msg, RegistryRecord):
                    self._records[(msg.serial_number, msg.fsbl_digest)] = msg
                elif isinstance(msg, RevocationList):
                    self._apply(msg)
                else:
                    raise CodecError(f"unexpected {type(msg).__name__} in store")
        if self.audit_path is not None and self.audit_path.exists():
            with open(self.audit_path, "rb") as fh:
                while frame := read_frame(fh):
                    req = decode(frame, expect=LookupRequest)
                    self.audit_log.append(AuditEntry(req.serial_number, req.fsbl_digest))

    # public keys

    @property
    def boot_public_key(self) -> VerifyingKey:
        return self._boot_key.public

    @property
    def service_public_key(self) -> VerifyingKey:
        return self._service_key.public

    def info(self) -> ServiceInfo:
        return ServiceInfo(self.boot_public_key, self.service_public_key)

    # operations

    def release_fsbl(self, code_bytes: bytes) -> FsblRelease:
        with self._lock:
            fsbl = FsblImage(bytes(code_bytes), self._boot_key.public,
                             crypto.sign(self._boot_key, bytes(code_bytes)))
            release = FsblRelease(fsbl, len(self.releases) + 1, False)
            self._persist(release)
            self.releases.append(release)
            return release

    def register_device(self, serial_number: int, fsbl_digest: Digest,
                        device_public_key: VerifyingKey) -> RegistryRecord:
        with self._lock:
            key = (serial_number, fsbl_digest)
            if key in self._records:
                raise RegistryError(
                    f"device {serial_number} already registered for FSBL {fsbl_digest.hex()[:16]}"
                )
            record = RegistryRecord(serial_number, fsbl_digest, device_public_key, False)
            self._persist(record)
            self._records[key] = record
            return record

    def lookup(self, serial_number: int, fsbl_digest: Digest) -> RegistryRecord:
        with self._lock:
            entry = AuditEntry(serial_number, fsbl_digest)
            self.audit_log.append(entry)
            if self.audit_path is not None:
                with open(self.audit_path, "ab") as fh:
                    fh.write(encode(LookupRequest(serial_number, fsbl_digest)))
            record = self._records.get((serial_number, fsbl_digest))
            if record is None:
                raise NotFound(f"no record for serial {serial_number}")
            return record

    def records(self) -> List[RegistryRecord]:
        with self._lock:
            return [self._records[k] for k in sorted(self._records, key=lambda k: (k[0], k[1].value))]

    def revocations(self) -> RevocationList:
        with self._lock:
            return self.revocation_history[-1]

    def revoke(self, target: RevocationTarget) -> RevocationList:
        with self._lock:
            current = self.revocations()
            fsbls = set(current.revoked_fsbl_digests)
            devices = set(current.revoked_device_records)
            if isinstance(target, FsblTarget):
                known = {r.fsbl.digest for r in self.releases} | {k[1] for k in self._records}
                if target.fsbl_digest not in known:
                    raise RegistryError(f"unknown FSBL digest {target.fsbl_digest.hex()[:16]}")
                fsbls.add(target.fsbl_digest)
            elif isinstance(target, DeviceTarget):
                key = (target.serial_number, target.fsbl_digest)
                if key not in self._records:
                    raise RegistryError(f"unknown device record {target.serial_number}")
                devices.add(key)
            else:
                raise RegistryError(f"unsupported revocation target {target!r}")
            rl = self._sign_list(frozenset(fsbls), frozenset(devices), current.issued_at + 1)
            self._append(rl)
            return rl

    def revoke_fsbl(self, fsbl_digest: Digest) -> RevocationList:
        return self.revoke(FsblTarget(fsbl_digest))

    def revoke_device(self, serial_number: int, fsbl_digest: Digest) -> RevocationList:
        return self.revoke(DeviceTarget(serial_number, fsbl_digest))

    def _sign_list(self, fsbls, devices, issued_at: int) -> RevocationList:
        unsigned = RevocationList(fsbls, devices, issued_at, bytes(crypto.SIGNATURE_SIZE))
        return replace(unsigned, signature=crypto.sign(self._service_key, unsigned.signed_payload()))

    def _append(self, rl: RevocationList) -> None:
        self._persist(rl)
        self._apply(rl)

    def _apply(self, rl: RevocationList) -> None:
        self.revocation_history.append(rl)
        for key in rl.revoked_device_records:
            if key in self._records:
                self._records[key] = replace(self._records[key], revoked=True)
        self.releases = [
            replace(r, revoked=True) if r.fsbl.digest in rl.revoked_fsbl_digests else r
            for r in self.releases
        ]

    # wire dispatch

    def handle_frame(self, frame: bytes, privileged: bool = True) -> bytes:
        try:
            req = decode(frame)
        except CodecError as exc:
            return encode(ErrorReply(ERR_CODEC, str(exc)))
        try:
            if isinstance(req, LookupRequest):
                return encode(self.lookup(req.serial_number, req.fsbl_digest))
            if isinstance(req, GetRevocationsRequest):
                return encode(self.revocations())
            if isinstance(req, ServiceInfoRequest):
                return encode(self.info())
            if not privileged:
                return encode(ErrorReply(ERR_FORBIDDEN, "provisioning requests need a loopback session"))
            if isinstance(req, ReleaseFsblRequest):
                return encode(self.release_fsbl(req.code_bytes))
            if isinstance(req, RegisterRequest):
                return encode(self.register_device(req.serial_number, req.fsbl_digest,
                                                   req.device_public_key))
            if isinstance(req, RevokeRequest):
                target = (FsblTarget(req.fsbl_digest) if req.target == REVOKE_FSBL
                          else DeviceTarget(req.serial_number, req.fsbl_digest))
                return encode(self.revoke(target))
        except NotFound as exc:
            return encode(ErrorReply(ERR_NOT_FOUND, str(exc)))
        except RegistryError as exc:
            return encode(ErrorReply(ERR_GENERIC, str(exc)))
        return encode(ErrorReply(ERR_CODEC, f"unsupported request {type(req).__name__}"))


def verify_revocation_list(rl: RevocationList, service_key: VerifyingKey) -> bool:
    return crypto.verify(service_key, rl.signed_payload(), rl.signature)


def load_snapshot(path: os.PathLike) -> Dict[RecordKey, RegistryRecord]:
    """Read registry records out of a store file without starting a service."""
    records: Dict[RecordKey, RegistryRecord] = {}
    revoked: set = set()
    with open(path, "rb") as fh:
        while frame := read_frame(fh):
            msg = decode(frame)
            if isinstance(msg, RegistryRecord):
                records[(msg.serial_number, msg.fsbl_digest)] = msg
            elif isinstance(msg, RevocationList):
                revoked |= set(msg.revoked_device_records)
    return {k: replace(v, revoked=True) if k in revoked else v for k, v in records.items()}


# Socket transport.

def parse_address(addr: str) -> Union[Tuple[str, int], str]:
    """``host:port`` for TCP, ``unix:/path`` for a Unix socket."""
    if addr.startswith("unix:"):
        return addr[len("unix:"):]
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"bad registry address {addr!r}; expected host:port or unix:/path")
    return host.strip("[]") or "127.0.0.1", int(port)


def format_address(address) -> str:
    if isinstance(address, str):
        return f"unix:{address}"
    return f"{address[0]}:{address[1]}"


def _is_loopback(client_address) -> bool:
    if not isinstance(client_address, tuple):
        return True  # unix socket
    try:
        return ipaddress.ip_address(client_address[0]).is_loopback
    except ValueError:
        return False


class _Handler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        service: ProvisioningService = self.server.service  # type: ignore[attr-defined]
        privileged = _is_loopback(self.client_address)
        while True:
            try:
                frame = read_frame(self.rfile)
            except CodecError as exc:
                self.wfile.write(encode(ErrorReply(ERR_CODEC, str(exc))))
                return
            if not frame:
                return
            self.wfile.write(service.handle_frame(frame, privileged=privileged))
            self.wfile.flush()


class _TcpServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


if hasattr(socketserver, "ThreadingUnixStreamServer"):
    class _UnixServer(socketserver.ThreadingUnixStreamServer):
        daemon_threads = True


class RegistryServer:
    """Serve a :class:`ProvisioningService` on a stream socket."""

    def __init__(self, service: ProvisioningService, address: str = "127.0.0.1:0") -> None:
        target = parse_address(address)
        if isinstance(target, str):
            if os.path.exists(target):
                os.unlink(target)
            self._server = _UnixServer(target, _Handler)
        else:
            self._server = _TcpServer(target, _Handler)
        self._server.service = service  # type: ignore[attr-defined]
        self.service = service
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> str:
        return format_address(self._server.server_address)

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def start(self) -> "RegistryServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True,
                                        name="registry-server")
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join()
        if isinstance(self._server.server_address, str):
            try:
                os.unlink(self._server.server_address)
            except OSError:
                pass

    def __enter__(self) -> "RegistryServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


class RegistryClient:
    """Request/response client; one short-lived connection per call."""

    def __init__(self, address: str, timeout: float = 5.0) -> None:
        self.address = address
        self.timeout = timeout
        self._info: Optional[ServiceInfo] = None

    def _call(self, request, expect: type):
        target = parse_address(self.address)
        family = socket.AF_UNIX if isinstance(target, str) else socket.AF_INET
        if not isinstance(target, str) and ":" in target[0]:
            family = socket.AF_INET6
        with socket.socket(family, socket.SOCK_STREAM) as sock:
            sock.settimeout(self.timeout)
            sock.connect(target)
            sock.sendall(encode(request))
            with sock.makefile("rb") as fh:
                frame = read_frame(fh)
        if not frame:
            raise RegistryError("registry closed the connection")
        reply = decode(frame)
        if isinstance(reply, ErrorReply):
            if reply.code == ERR_NOT_FOUND:
                raise NotFound(reply.detail)
            if reply.code == ERR_CODEC:
                raise CodecError(reply.detail)
            raise RegistryError(reply.detail)
        if not isinstance(reply, expect):
            raise CodecError(f"expected {expect.__name__}, got {type(reply).__name__}")
        return reply

    def info(self) -> ServiceInfo:
        if self._info is None:
            self._info = self._call(ServiceInfoRequest(), ServiceInfo)
        return self._info

    @property
    def boot_public_key(self) -> VerifyingKey:
        return self.info().boot_public_key

    @property
    def service_public_key(self) -> VerifyingKey:
        return self.info().service_public_key

    def release_fsbl(self, code_bytes: bytes) -> FsblRelease:
        return self._call(ReleaseFsblRequest(bytes(code_bytes)), FsblRelease)

    def register_device(self, serial_number: int, fsbl_digest: Digest,
                        device_public_key: VerifyingKey) -> RegistryRecord:
        return self._call(RegisterRequest(serial_number, fsbl_digest, device_public_key),
                          RegistryRecord)

    def lookup(self, serial_number: int, fsbl_digest: Digest) -> RegistryRecord:
        return self._call(LookupRequest(serial_number, fsbl_digest), RegistryRecord)

    def revocations(self) -> RevocationList:
        return self._call(GetRevocationsRequest(), RevocationList)

    def revoke(self, target: RevocationTarget) -> RevocationList:
        if isinstance(target, FsblTarget):
            req = RevokeRequest(REVOKE_FSBL, 0, target.fsbl_digest)
        else:
            req = RevokeRequest(REVOKE_DEVICE, target.serial_number, target.fsbl_digest)
        return self._call(req, RevocationList)

    def revoke_fsbl(self, fsbl_digest: Digest) -> RevocationList:
        return self.revoke(FsblTarget(fsbl_digest))

    def revoke_device(self, serial_number: int, fsbl_digest: Digest) -> RevocationList:
        return self.revoke(DeviceTarget(serial_number, fsbl_digest))
