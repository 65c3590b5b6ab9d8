"""Emulated ARM/FPGA SoC: OTP fuses, secure boot, measurement, world-split bus.

The boot chain is Boot ROM -> FSBL -> Secure OS.  The Boot ROM checks the
FSBL public key against the fused hash and the FSBL signature; the FSBL then
derives the device key, measures the system image, creates the session keys,
signs the report and wipes everything secret before handing off.
"""

from __future__ import annotations

import logging
import random
import struct
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Tuple, Union

from . import crypto, protocol
from .codec import (
    ERR_CODEC,
    ERR_GENERIC,
    AttestationReport,
    Challenge,
    ErrorReply,
    FsblImage,
    decode,
    encode,
)
from .crypto import Digest, VerifyingKey
from .errors import AccessDenied, CodecError, LifecycleError, ProvisioningError

logger = logging.getLogger(__name__)

DEVICE_SECRET_SIZE = 32
MAX_SERIAL = (1 << 64) - 1


class Stage(Enum):
    POWERED_OFF = "PoweredOff"
    BOOT_ROM = "BootRom"
    FSBL = "Fsbl"
    SECURE_OS = "SecureOs"
    FAIL_SECURE = "FailSecure"


class WorldTag(Enum):
    SECURE = "Secure"
    NORMAL = "Normal"


class RegionKind(Enum):
    RAM = "Ram"
    PL_MMIO = "PlMmio"
    RECONFIG_PORT = "ReconfigPort"


class Op(Enum):
    READ = "Read"
    WRITE = "Write"


class Access(Enum):
    ALLOWED = "Allowed"
    DENIED = "AccessDenied"


@dataclass(frozen=True)
class Region:
    name: str
    start: int
    size: int
    world: WorldTag
    kind: RegionKind

    @property
    def end(self) -> int:
        return self.start + self.size

    def __contains__(self, address: int) -> bool:
        return self.start <= address < self.end


# Sizes are kept small; only the layout matters for the isolation model.
DEFAULT_REGIONS: Tuple[Region, ...] = (
    Region("ddr_normal", 0x0000_0000, 0x1_0000, WorldTag.NORMAL, RegionKind.RAM),
    Region("ddr_secure", 0x1000_0000, 0x1_0000, WorldTag.SECURE, RegionKind.RAM),
    Region("pl_accel", 0xA000_0000, 0x1000, WorldTag.SECURE, RegionKind.PL_MMIO),
    Region("pl_dma", 0xA001_0000, 0x1000, WorldTag.SECURE, RegionKind.PL_MMIO),
    Region("pcap", 0xFFCA_3000, 0x100, WorldTag.SECURE, RegionKind.RECONFIG_PORT),
)

SECURE_SCRATCH = 0x1000_0000


class AddressSpace:
    def __init__(self, regions: Iterable[Region] = DEFAULT_REGIONS) -> None:
        ordered = tuple(sorted(regions, key=lambda r: r.start))
        for a, b in zip(ordered, ordered[1:]):
            if a.end > b.start:
                raise ValueError(f"regions {a.name} and {b.name} overlap")
        self.regions = ordered

    def region_for(self, address: int) -> Optional[Region]:
        for region in self.regions:
            if address in region:
                return region
        return None

    def check(self, address: int, world: WorldTag, op: Op = Op.READ) -> Access:
        region = self.region_for(address)
        if region is None:
            return Access.DENIED
        if region.world is world or (region.world is WorldTag.NORMAL and world is WorldTag.SECURE):
            return Access.ALLOWED
        return Access.DENIED


@dataclass(frozen=True)
class BitstreamImage:
    data: bytes
    label: str = ""
    reconfig_enabled: bool = True


@dataclass(frozen=True)
class SystemImage:
    """What the FSBL loads: PL bitstream plus the Secure OS / application payload."""

    bitstream: BitstreamImage
    os_payload: bytes = b""


def measure(image: SystemImage) -> Digest:
    data = bytes(image.bitstream.data)
    payload = bytes(image.os_payload)
    return crypto.hash_data(
        struct.pack(">Q", len(data)) + data + struct.pack(">Q", len(payload)) + payload
    )


class OtpStore:
    """eFUSE analogue.  Writable once; the secret is readable only during early boot."""

    def __init__(self, serial_number: int) -> None:
        self.serial_number = serial_number
        self._device_secret: Optional[bytearray] = None
        self.boot_key_hash: Optional[Digest] = None
        self.locked = False

    def program(self, device_secret: bytes, boot_key_hash: Digest) -> None:
        if self.locked:
            raise LifecycleError("OTP already locked")
        self._device_secret = bytearray(device_secret)
        self.boot_key_hash = boot_key_hash
        self.locked = True

    def read_device_secret(self, stage: Stage) -> bytes:
        if stage not in (Stage.BOOT_ROM, Stage.FSBL):
            raise AccessDenied(f"device secret not readable in stage {stage.value}")
        if self._device_secret is None:
            raise LifecycleError("device not provisioned")
        return bytes(self._device_secret)

    def __setattr__(self, name, value):
        if getattr(self, "locked", False) and name in ("serial_number", "_device_secret",
                                                       "boot_key_hash", "locked"):
            raise LifecycleError(f"OTP is locked; cannot write {name}")
        super().__setattr__(name, value)


class PlSlot:
    def __init__(self) -> None:
        self.bitstream: Optional[BitstreamImage] = None
        self.stale = False

    def load(self, bitstream: BitstreamImage) -> None:
        self.bitstream = bitstream
        self.stale = False


class MemoryBus:
    """Backing store for every mapped region, gated by the world check."""

    def __init__(self, space: AddressSpace) -> None:
        self.space = space
        self._mem: Dict[str, bytearray] = {r.name: bytearray(r.size) for r in space.regions}
        self.pl = PlSlot()
        self.events: List[Dict[str, object]] = []

    def _locate(self, address: int, length: int, world: WorldTag, op: Op) -> Tuple[Region, int]:
        region = self.space.region_for(address)
        if region is None or self.space.check(address, world, op) is Access.DENIED:
            raise AccessDenied(f"{world.value} {op.value} at 0x{address:08x}")
        if address + length > region.end:
            raise AccessDenied(f"access at 0x{address:08x}+{length} crosses {region.name}")
        return region, address - region.start

    def read(self, address: int, length: int, world: WorldTag) -> bytes:
        region, off = self._locate(address, length, world, Op.READ)
        return bytes(self._mem[region.name][off:off + length])

    def write(self, address: int, data: bytes, world: WorldTag) -> None:
        region, off = self._locate(address, len(data), world, Op.WRITE)
        self._mem[region.name][off:off + len(data)] = data

    def dump(self, world: WorldTag) -> Dict[str, bytes]:
        """Every region readable from ``world``, keyed by region name."""
        return {
            r.name: bytes(self._mem[r.name])
            for r in self.space.regions
            if self.space.check(r.start, world) is Access.ALLOWED
        }

    def zero(self, address: int, length: int) -> None:
        region, off = self._locate(address, length, WorldTag.SECURE, Op.WRITE)
        buf = self._mem[region.name]
        for i in range(off, off + length):
            buf[i] = 0

    def clear(self) -> None:
        for buf in self._mem.values():
            buf[:] = bytes(len(buf))

    def reconfigure(self, world: WorldTag, bitstream: BitstreamImage) -> Access:
        if world is not WorldTag.SECURE:
            self.events.append({"event": "reconfigure_denied", "world": world.value})
            return Access.DENIED
        current = self.pl.bitstream
        if current is not None and not current.reconfig_enabled:
            self.events.append({"event": "reconfigure_denied", "world": world.value,
                                "why": "capability disabled"})
            return Access.DENIED
        self.pl.bitstream = bitstream
        self.pl.stale = True
        self.events.append({"event": "reconfigured", "label": bitstream.label,
                            "measurement_stale": True})
        return Access.ALLOWED


@dataclass
class BootState:
    stage: Stage
    report: Optional[AttestationReport] = None
    session_keys: Optional[protocol.SessionKeys] = None
    device_public_key: Optional[VerifyingKey] = None

    @property
    def session_private(self):
        return self.session_keys


@dataclass
class BootOutcome:
    stage: Stage
    report: Optional[AttestationReport]
    reason: str = ""

    @property
    def ok(self) -> bool:
        return self.stage is Stage.SECURE_OS


@dataclass(frozen=True)
class DevicePublicRecord:
    serial_number: int
    fsbl_digest: Digest
    device_public_key: VerifyingKey


class SecureOsContext:
    """Everything the Secure OS and its applications can reach after hand-off.

    Holds no reference to the device or its OTP store.
    """

    def __init__(self, boot_state: BootState, bus: MemoryBus) -> None:
        self.boot_state = boot_state
        self.bus = bus

    @property
    def report(self) -> AttestationReport:
        return self.boot_state.report

    def read(self, address: int, length: int, world: WorldTag = WorldTag.SECURE) -> bytes:
        return self.bus.read(address, length, world)

    def write(self, address: int, data: bytes, world: WorldTag = WorldTag.SECURE) -> None:
        self.bus.write(address, data, world)

    def reconfigure_pl(self, world: WorldTag, bitstream: BitstreamImage) -> Access:
        return self.bus.reconfigure(world, bitstream)

    def read_device_secret(self) -> bytes:
        raise AccessDenied("boot ROM access disabled after hand-off")

    def respond(self, challenge):
        return protocol.respond(self.boot_state, challenge)


class EmulatedDevice:
    """One SoC instance.  Not thread-safe; callers serialize access."""

    def __init__(self, serial_number: int, regions: Iterable[Region] = DEFAULT_REGIONS) -> None:
        self.serial_number = serial_number
        self.otp = OtpStore(serial_number)
        self.stage = Stage.POWERED_OFF
        self.address_space = AddressSpace(regions)
        self._bus = MemoryBus(self.address_space)
        self.boot_state = BootState(Stage.POWERED_OFF)
        self._context: Optional[SecureOsContext] = None

    def __repr__(self) -> str:
        return f"EmulatedDevice(serial={self.serial_number}, stage={self.stage.value})"

    @property
    def pl(self) -> PlSlot:
        return self._bus.pl

    @property
    def events(self) -> List[Dict[str, object]]:
        return self._bus.events

    def _guard(self) -> None:
        if self.stage is Stage.FAIL_SECURE:
            raise LifecycleError("device is in FailSecure; reset required")

    def _require_booted(self) -> None:
        self._guard()
        if self.stage is not Stage.SECURE_OS:
            raise LifecycleError(f"device not booted (stage {self.stage.value})")

    # provisioning

    def provision(self, device_secret: bytes, boot_key_hash: Digest,
                  fsbl_digest: Digest) -> DevicePublicRecord:
        self._guard()
        if self.otp.locked:
            raise LifecycleError(f"device {self.serial_number} already provisioned")
        if len(device_secret) != DEVICE_SECRET_SIZE:
            raise ProvisioningError(
                f"device secret must be {DEVICE_SECRET_SIZE} bytes, got {len(device_secret)}"
            )
        keypair = crypto.derive_device_keypair(device_secret, fsbl_digest)
        public = keypair.public
        keypair.erase()
        self.otp.program(device_secret, boot_key_hash)
        return DevicePublicRecord(self.serial_number, fsbl_digest, public)

    def enroll_fsbl(self, fsbl_digest: Digest) -> DevicePublicRecord:
        """Run the provisioning bootloader again to publish the key for a new FSBL."""
        self._guard()
        if self.stage is not Stage.POWERED_OFF:
            raise LifecycleError("enrolment requires a powered-off device")
        keypair = crypto.derive_device_keypair(
            self.otp.read_device_secret(Stage.BOOT_ROM), fsbl_digest
        )
        public = keypair.public
        keypair.erase()
        return DevicePublicRecord(self.serial_number, fsbl_digest, public)

    def read_device_secret(self) -> bytes:
        return self.otp.read_device_secret(self.stage)

    # boot

    def boot(self, fsbl: Union[FsblImage, bytes], image: SystemImage,
             rng: Optional[random.Random] = None) -> BootOutcome:
        self._guard()
        if self.stage is not Stage.POWERED_OFF:
            raise LifecycleError(f"boot requires PoweredOff, device is {self.stage.value}")
        if not self.otp.locked:
            raise LifecycleError("device not provisioned")
        try:
            return self._boot(fsbl, image, rng)
        except (AccessDenied, CodecError, ValueError) as exc:
            return self._fail(f"boot aborted: {exc}")

    def _fail(self, reason: str) -> BootOutcome:
        logger.info("device %d fail-secure: %s", self.serial_number, reason)
        self._bus.zero(SECURE_SCRATCH, 64)
        self._bus.pl.bitstream = None
        self.stage = Stage.FAIL_SECURE
        self.boot_state = BootState(Stage.FAIL_SECURE)
        self._context = None
        return BootOutcome(Stage.FAIL_SECURE, None, reason)

    def _boot(self, fsbl, image: SystemImage, rng) -> BootOutcome:
        self.stage = Stage.BOOT_ROM
        if not isinstance(fsbl, FsblImage):
            try:
                fsbl = decode(bytes(fsbl), expect=FsblImage)
            except CodecError as exc:
                return self._fail(f"FSBL image does not decode: {exc}")
        if crypto.hash_data(fsbl.public_key.value) != self.otp.boot_key_hash:
            return self._fail("FSBL public key does not match fused hash")
        if not crypto.verify(fsbl.public_key, fsbl.code_bytes, fsbl.signature):
            return self._fail("FSBL signature invalid")

        self.stage = Stage.FSBL
        fsbl_digest = fsbl.digest
        secret = self.otp.read_device_secret(self.stage)
        self._bus.write(SECURE_SCRATCH, secret, WorldTag.SECURE)
        device_key = crypto.derive_device_keypair(secret, fsbl_digest)
        del secret
        self._bus.write(SECURE_SCRATCH + 32, device_key.private_bytes(), WorldTag.SECURE)

        program_digest = measure(image)
        session = protocol.SessionKeys.generate(rng)
        report = protocol.build_report(
            self.serial_number, fsbl_digest, program_digest, session.public, device_key
        )
        device_public = device_key.public
        device_key.erase()
        self._bus.zero(SECURE_SCRATCH, 64)
        self._bus.pl.load(image.bitstream)

        self.boot_state = BootState(Stage.SECURE_OS, report, session, device_public)
        self.stage = Stage.SECURE_OS
        self._context = SecureOsContext(self.boot_state, self._bus)
        return BootOutcome(Stage.SECURE_OS, report)

    def reset(self) -> None:
        """Full power cycle.  The only way out of FailSecure."""
        if self.boot_state.session_keys is not None:
            self.boot_state.session_keys.erase()
        self._bus.clear()
        self._bus.pl.bitstream = None
        self._bus.pl.stale = False
        self.boot_state = BootState(Stage.POWERED_OFF)
        self._context = None
        self.stage = Stage.POWERED_OFF

    # runtime

    def secure_os(self) -> SecureOsContext:
        self._require_booted()
        return self._context

    def access(self, address: int, world: WorldTag, op: Op = Op.READ) -> Access:
        self._require_booted()
        return self.address_space.check(address, world, op)

    def reconfigure_pl(self, world: WorldTag, bitstream: BitstreamImage) -> Access:
        self._require_booted()
        return self._bus.reconfigure(world, bitstream)

    def respond(self, challenge):
        self._guard()
        return protocol.respond(self.boot_state, challenge)


class DeviceEndpoint:
    """Framed transport into a device's trusted application.

    Requests are serialized; the endpoint remembers which challenges it has
    served so the device side can open the matching secure channel.
    """

    def __init__(self, device: EmulatedDevice, rng: Optional[random.Random] = None) -> None:
        self.device = device
        self.rng = rng
        self._lock = threading.Lock()
        self.served: Dict[bytes, Challenge] = {}

    def __call__(self, frame: bytes) -> bytes:
        with self._lock:
            try:
                challenge = decode(frame, expect=Challenge)
            except CodecError as exc:
                return encode(ErrorReply(ERR_CODEC, str(exc)))
            try:
                response = self.device.respond(challenge)
            except LifecycleError as exc:
                return encode(ErrorReply(ERR_GENERIC, str(exc)))
            self.served[challenge.nonce] = challenge
            return encode(response)

    def channel(self, challenge: Challenge) -> protocol.SecureChannel:
        state = self.device.boot_state
        if self.served.get(challenge.nonce) != challenge:
            raise LifecycleError("challenge was never served by this device")
        ctx = protocol.context_for(state.report, state.device_public_key, challenge)
        return protocol.establish_channel(ctx, state.session_keys.dh, self.rng)


@dataclass
class ManufactureRecord:
    serial_number: int


@dataclass
class Manufacturer:
    """Assigns serial numbers.  Keeps only what it would know at the factory."""

    records: List[ManufactureRecord] = field(default_factory=list)

    def manufacture(self, serial_number: int) -> EmulatedDevice:
        if not 0 <= serial_number <= MAX_SERIAL:
            raise LifecycleError(f"serial number {serial_number} out of range")
        if any(r.serial_number == serial_number for r in self.records):
            raise LifecycleError(f"serial number {serial_number} already used")
        self.records.append(ManufactureRecord(serial_number))
        return EmulatedDevice(serial_number)
