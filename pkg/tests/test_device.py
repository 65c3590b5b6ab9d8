import random
import struct

import pytest
from hypothesis import given
from hypothesis import strategies as st

from attestsim import crypto, protocol
from attestsim.codec import FsblImage
from attestsim.device import (
    DEFAULT_REGIONS,
    Access,
    AddressSpace,
    BitstreamImage,
    EmulatedDevice,
    Manufacturer,
    Op,
    Region,
    RegionKind,
    Stage,
    SystemImage,
    WorldTag,
    measure,
)
from attestsim.errors import AccessDenied, LifecycleError, ProvisioningError
from attestsim.protocol import new_challenge, verify_report

from bootgen import fsbl_variant


def _oracle_measure(bitstream: bytes, payload: bytes) -> str:
    import hashlib

    return hashlib.sha256(struct.pack(">Q", len(bitstream)) + bitstream +
                          struct.pack(">Q", len(payload)) + payload).hexdigest()


# manufacture

def test_manufacture_fresh_device():
    dev = Manufacturer().manufacture(1)
    assert dev.serial_number == 1
    assert dev.stage is Stage.POWERED_OFF
    assert not dev.otp.locked


def test_manufacture_duplicate():
    m = Manufacturer()
    m.manufacture(1)
    with pytest.raises(LifecycleError):
        m.manufacture(1)


def test_manufacture_boundaries():
    m = Manufacturer()
    assert m.manufacture(2 ** 64 - 1).serial_number == 2 ** 64 - 1
    with pytest.raises(LifecycleError):
        m.manufacture(2 ** 64)
    with pytest.raises(LifecycleError):
        m.manufacture(-1)


# provision

def test_provision_matches_independent_kdf(world, rng):
    dev = world.manufacturer.manufacture(10)
    secret = rng.randbytes(32)
    rec = dev.provision(secret, crypto.hash_data(world.registry.boot_public_key.value),
                        world.fsbl_digest)
    expected = crypto.derive_device_keypair(secret, world.fsbl_digest).public
    assert rec.device_public_key == expected
    assert (rec.serial_number, rec.fsbl_digest) == (10, world.fsbl_digest)
    assert dev.otp.locked


def test_provision_twice(world, rng):
    dev = world.manufacturer.manufacture(10)
    h = crypto.hash_data(b"k")
    dev.provision(rng.randbytes(32), h, world.fsbl_digest)
    with pytest.raises(LifecycleError):
        dev.provision(rng.randbytes(32), h, world.fsbl_digest)


@pytest.mark.parametrize("n", [8, 16, 31, 33])
def test_provision_bad_secret_length(world, n):
    dev = world.manufacturer.manufacture(10)
    with pytest.raises(ProvisioningError):
        dev.provision(b"x" * n, crypto.hash_data(b"k"), world.fsbl_digest)
    assert not dev.otp.locked


def test_otp_immutable_after_lock(world, rng):
    dev = world.manufacturer.manufacture(10)
    dev.provision(rng.randbytes(32), crypto.hash_data(b"k"), world.fsbl_digest)
    for name, value in [("serial_number", 5), ("boot_key_hash", crypto.hash_data(b"x")),
                        ("locked", False), ("_device_secret", bytearray(32))]:
        with pytest.raises(LifecycleError):
            setattr(dev.otp, name, value)


def test_secret_readable_only_in_early_boot(booted):
    _, handle, _ = booted
    otp = handle.device.otp
    assert len(otp.read_device_secret(Stage.BOOT_ROM)) == 32
    assert len(otp.read_device_secret(Stage.FSBL)) == 32
    for stage in (Stage.POWERED_OFF, Stage.SECURE_OS, Stage.FAIL_SECURE):
        with pytest.raises(AccessDenied):
            otp.read_device_secret(stage)
    with pytest.raises(AccessDenied):
        handle.device.read_device_secret()


def test_enroll_new_fsbl_gives_new_key(world):
    handle = world.add_device(3, boot=False)
    new_digest = crypto.hash_data(b"fsbl v2")
    rec = handle.device.enroll_fsbl(new_digest)
    assert rec.device_public_key != handle.record.device_public_key
    assert rec.fsbl_digest == new_digest


# boot

def test_boot_happy_path(booted):
    world, handle, _ = booted
    assert handle.boot.ok
    report = handle.boot.report
    assert handle.device.stage is Stage.SECURE_OS
    assert verify_report(report, handle.record.device_public_key)
    assert report.fsbl_digest == world.fsbl_digest
    assert report.program_digest == measure(world.fixtures.image("P+"))
    assert handle.device.boot_state.session_private is not None
    assert handle.device.pl.bitstream.label == "P+"


@pytest.mark.parametrize("kind", ["wrong-key", "bad-sig", "truncated"])
def test_boot_bad_fsbl_fails_secure(world, kind):
    handle = world.add_device(1, boot=False)
    fsbl = fsbl_variant(world.release.fsbl, kind, random.Random(3))
    outcome = handle.device.boot(fsbl, world.fixtures.image("P+"), world.rng)
    assert outcome.stage is Stage.FAIL_SECURE
    assert outcome.report is None
    assert handle.device.boot_state.report is None
    assert handle.device.boot_state.session_private is None
    assert handle.device.pl.bitstream is None


def test_boot_tampered_code_fails_secure(world):
    handle = world.add_device(1, boot=False)
    f = world.release.fsbl
    code = bytearray(f.code_bytes)
    code[100] ^= 0x01
    outcome = handle.device.boot(FsblImage(bytes(code), f.public_key, f.signature),
                                 world.fixtures.image("P+"), world.rng)
    assert outcome.stage is Stage.FAIL_SECURE


def test_fail_secure_absorbing(world):
    handle = world.add_device(1, boot=False)
    dev = handle.device
    dev.boot(fsbl_variant(world.release.fsbl, "bad-sig", random.Random(1)),
             world.fixtures.image("P+"))
    challenge, _ = new_challenge(random.Random(1))
    calls = [
        lambda: dev.boot(world.release.fsbl, world.fixtures.image("P+")),
        lambda: dev.respond(challenge),
        lambda: dev.access(0, WorldTag.SECURE),
        lambda: dev.reconfigure_pl(WorldTag.SECURE, BitstreamImage(b"x")),
        lambda: dev.secure_os(),
        lambda: dev.provision(b"x" * 32, crypto.hash_data(b""), world.fsbl_digest),
        lambda: dev.enroll_fsbl(world.fsbl_digest),
    ]
    for call in calls:
        with pytest.raises(LifecycleError):
            call()
    dev.reset()
    assert dev.stage is Stage.POWERED_OFF
    assert dev.boot(world.release.fsbl, world.fixtures.image("P+"), world.rng).ok


def test_boot_twice_same_measurements_fresh_session_key(world):
    handle = world.add_device(1)
    first = handle.boot.report
    second = world.boot(handle, world.fixtures.image("P+")).report
    assert (first.serial_number, first.fsbl_digest, first.program_digest) == \
        (second.serial_number, second.fsbl_digest, second.program_digest)
    assert first.session_public_key != second.session_public_key


def test_boot_requires_powered_off(booted):
    world, handle, _ = booted
    with pytest.raises(LifecycleError):
        handle.device.boot(world.release.fsbl, world.fixtures.image("P+"))


def test_boot_requires_provisioning(world):
    dev = world.manufacturer.manufacture(50)
    with pytest.raises(LifecycleError):
        dev.boot(world.release.fsbl, world.fixtures.image("P+"))


def test_boot_erases_scratch_and_keys(booted):
    world, handle, _ = booted
    dev = handle.device
    scratch = dev.secure_os().read(0x1000_0000, 64)
    assert scratch == bytes(64)


def test_respond_requires_secure_os(world):
    handle = world.add_device(1, boot=False)
    challenge, _ = new_challenge(random.Random(1))
    with pytest.raises(LifecycleError):
        handle.device.respond(challenge)
    with pytest.raises(LifecycleError):
        protocol.respond(None, challenge)


# measurement

def test_measure_fixtures_distinct_and_match_oracle(fixtures):
    plus, minus = measure(fixtures.image("P+")), measure(fixtures.image("P-"))
    assert plus != minus
    assert plus.hex() == _oracle_measure(fixtures.p_plus, fixtures.os_payload)
    assert minus.hex() == _oracle_measure(fixtures.p_minus, fixtures.os_payload)


def test_measure_empty():
    assert measure(SystemImage(BitstreamImage(b""), b"")).hex() == _oracle_measure(b"", b"")


def test_measure_order_matters():
    a, b = b"bitstream", b"payload"
    assert measure(SystemImage(BitstreamImage(a), b)) != measure(SystemImage(BitstreamImage(b), a))
    # plain concatenation would collide here; the length prefixes must not
    assert measure(SystemImage(BitstreamImage(b"ab"), b"c")) != \
        measure(SystemImage(BitstreamImage(b"a"), b"bc"))


def test_label_and_capability_not_measured():
    a = SystemImage(BitstreamImage(b"x", "P+", True), b"y")
    b = SystemImage(BitstreamImage(b"x", "other", False), b"y")
    assert measure(a) == measure(b)


@given(st.binary(max_size=64), st.binary(max_size=64), st.binary(max_size=64), st.binary(max_size=64))
def test_measure_binding(b1, p1, b2, p2):
    same = measure(SystemImage(BitstreamImage(b1), p1)) == measure(SystemImage(BitstreamImage(b2), p2))
    assert same == (b1 == b2 and p1 == p2)


# address space

def test_default_pl_regions_secure():
    for r in DEFAULT_REGIONS:
        if r.kind in (RegionKind.PL_MMIO, RegionKind.RECONFIG_PORT):
            assert r.world is WorldTag.SECURE


def test_overlapping_regions_rejected():
    with pytest.raises(ValueError):
        AddressSpace([Region("a", 0, 0x100, WorldTag.NORMAL, RegionKind.RAM),
                      Region("b", 0x80, 0x100, WorldTag.SECURE, RegionKind.RAM)])


@pytest.mark.parametrize("region", DEFAULT_REGIONS, ids=lambda r: r.name)
@pytest.mark.parametrize("op", list(Op))
def test_access_matrix(booted, region, op):
    _, handle, _ = booted
    dev = handle.device
    for addr in (region.start, region.end - 1):
        assert dev.access(addr, WorldTag.SECURE, op) is Access.ALLOWED
        expected = Access.ALLOWED if region.world is WorldTag.NORMAL else Access.DENIED
        assert dev.access(addr, WorldTag.NORMAL, op) is expected


@pytest.mark.parametrize("addr", [0x1_0000, 0x2000_0000, 0xA000_1000, 0xFFFF_FFFF])
def test_unmapped_denied(booted, addr):
    _, handle, _ = booted
    for world_tag in WorldTag:
        assert handle.device.access(addr, world_tag) is Access.DENIED


def test_normal_world_bus_read_raises(booted):
    _, handle, _ = booted
    with pytest.raises(AccessDenied):
        handle.device.secure_os().read(0xA000_0000, 4, WorldTag.NORMAL)


def test_regions_unchanged_by_operations(booted):
    world, handle, _ = booted
    before = handle.device.address_space.regions
    handle.device.reconfigure_pl(WorldTag.SECURE, BitstreamImage(b"new"))
    world.boot(handle, world.fixtures.image("P-"))
    assert handle.device.address_space.regions == before


# reconfiguration

def test_reconfigure_normal_world_denied(booted):
    _, handle, _ = booted
    assert handle.device.reconfigure_pl(WorldTag.NORMAL, BitstreamImage(b"evil")) is Access.DENIED
    assert handle.device.pl.bitstream.label == "P+"


def test_reconfigure_capability_disabled(world):
    handle = world.add_device(1, image=world.fixtures.image("P+", reconfig_enabled=False))
    assert handle.device.reconfigure_pl(WorldTag.SECURE, BitstreamImage(b"x")) is Access.DENIED


def test_reconfigure_secure_ok_marks_stale(booted):
    _, handle, _ = booted
    assert handle.device.reconfigure_pl(WorldTag.SECURE, BitstreamImage(b"new", "N")) is Access.ALLOWED
    assert handle.device.pl.stale
    assert handle.device.events[-1]["measurement_stale"] is True


def test_stale_session_still_attests(booted):
    world, handle, _ = booted
    handle.device.reconfigure_pl(WorldTag.SECURE, BitstreamImage(b"new", "N"))
    assert world.attest(handle).trusted


def test_device_repr_has_no_secrets(booted):
    _, handle, _ = booted
    assert "secret" not in repr(handle.device)


def test_independent_devices():
    a, b = EmulatedDevice(1), EmulatedDevice(2)
    assert a.address_space is not b.address_space
