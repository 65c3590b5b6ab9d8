"""Full simulation assembly: manufacturer, provisioning service, devices, users.

A seeded :class:`World` is fully deterministic: every key, nonce and event is
drawn from one ``random.Random``.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Optional

from . import crypto
from .codec import FsblRelease, encode
from .device import (
    DEVICE_SECRET_SIZE,
    BitstreamImage,
    BootOutcome,
    DeviceEndpoint,
    DevicePublicRecord,
    EmulatedDevice,
    Manufacturer,
    SystemImage,
    measure,
)
from .registry import ProvisioningService
from .verifier import AttestationResult, MeasurementPolicy, RemoteUser


def _fixture(name: str) -> bytes:
    return resources.files("attestsim").joinpath("fixtures", name).read_bytes()


@dataclass(frozen=True)
class Fixtures:
    fsbl_code: bytes
    p_plus: bytes
    p_minus: bytes
    os_payload: bytes

    @classmethod
    def default(cls) -> "Fixtures":
        return cls(
            fsbl_code=_fixture("fsbl.bin"),
            p_plus=_fixture("p_plus.bit"),
            p_minus=_fixture("p_minus.bit"),
            os_payload=_fixture("secure_os.bin"),
        )

    @classmethod
    def from_paths(cls, fsbl=None, p_plus=None, p_minus=None, os_payload=None) -> "Fixtures":
        """Load any given path; missing arguments fall back to the packaged blobs.

        Raises FileNotFoundError for a path that does not exist.
        """
        base = cls.default()
        read = lambda p, dflt: Path(p).read_bytes() if p is not None else dflt  # noqa: E731
        return cls(read(fsbl, base.fsbl_code), read(p_plus, base.p_plus),
                   read(p_minus, base.p_minus), read(os_payload, base.os_payload))

    def image(self, which: str = "P+", reconfig_enabled: bool = True) -> SystemImage:
        data = {"P+": self.p_plus, "P-": self.p_minus}[which]
        return SystemImage(BitstreamImage(data, which, reconfig_enabled), self.os_payload)


def payload_digest(payload: Any) -> str:
    if payload is None:
        return ""
    if not isinstance(payload, (bytes, bytearray)):
        payload = encode(payload)
    return hashlib.sha256(bytes(payload)).hexdigest()


@dataclass
class DeviceHandle:
    device: EmulatedDevice
    endpoint: DeviceEndpoint
    record: DevicePublicRecord
    boot: Optional[BootOutcome] = None

    @property
    def serial_number(self) -> int:
        return self.device.serial_number


@dataclass
class World:
    seed: Optional[int] = None
    fixtures: Fixtures = field(default_factory=Fixtures.default)
    registry: Any = None
    events: List[Dict[str, Any]] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.rng = random.Random(self.seed) if self.seed is not None else None
        self.manufacturer = Manufacturer()
        if self.registry is None:
            self.registry = ProvisioningService(rng=self.rng)
        self.release: FsblRelease = self.registry.release_fsbl(self.fixtures.fsbl_code)
        self.emit("provisioning", "P", "release_fsbl", self.release.fsbl,
                  version=self.release.version)
        self.devices: Dict[int, DeviceHandle] = {}

    def emit(self, stage: str, actor: str, event: str, payload: Any = None, **extra: Any) -> None:
        entry = {"seq": len(self.events), "stage": stage, "actor": actor, "event": event,
                 "payload_digest": payload_digest(payload)}
        entry.update(extra)
        self.events.append(entry)

    def event_log(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events)

    @property
    def fsbl_digest(self) -> crypto.Digest:
        return self.release.fsbl.digest

    def add_device(self, serial_number: int, image: Optional[SystemImage] = None,
                   boot: bool = True, fsbl=None) -> DeviceHandle:
        """Manufacture, provision, register and (by default) boot one device."""
        device = self.manufacturer.manufacture(serial_number)
        self.emit("manufacturing", "M", "manufacture", serial=serial_number)
        secret = crypto.random_bytes(DEVICE_SECRET_SIZE, self.rng)
        boot_key_hash = crypto.hash_data(self.registry.boot_public_key.value)
        record = device.provision(secret, boot_key_hash, self.fsbl_digest)
        del secret
        self.registry.register_device(record.serial_number, record.fsbl_digest,
                                      record.device_public_key)
        self.emit("provisioning", "P", "register", record.device_public_key.value,
                  serial=serial_number)
        handle = DeviceHandle(device, DeviceEndpoint(device, self.rng), record)
        self.devices[serial_number] = handle
        if boot:
            self.boot(handle, image if image is not None else self.fixtures.image("P+"), fsbl)
        return handle

    def boot(self, handle: DeviceHandle, image: SystemImage, fsbl=None) -> BootOutcome:
        if handle.device.stage.value != "PoweredOff":
            handle.device.reset()
        outcome = handle.device.boot(fsbl if fsbl is not None else self.release.fsbl, image, self.rng)
        handle.boot = outcome
        self.emit("operational", f"Dev({handle.serial_number})", "boot", outcome.report,
                  stage_after=outcome.stage.value, image=image.bitstream.label)
        return outcome

    def policy(self, programs=("P+",)) -> MeasurementPolicy:
        digests = [measure(self.fixtures.image(p)) for p in programs]
        return MeasurementPolicy.of([self.fsbl_digest], digests)

    def user(self, policy: Optional[MeasurementPolicy] = None, **kw) -> RemoteUser:
        return RemoteUser(self.registry, policy if policy is not None else self.policy(),
                          rng=self.rng, **kw)

    def attest(self, handle: DeviceHandle, user: Optional[RemoteUser] = None,
               transport=None) -> AttestationResult:
        user = user if user is not None else self.user()
        result = user.attest(transport if transport is not None else handle.endpoint)
        self.emit("operational", "U", "attest", result.response,
                  serial=handle.serial_number, verdict=result.decision.verdict.value,
                  reason=result.decision.label)
        return result
