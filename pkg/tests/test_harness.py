import random

import pytest

from attestsim import harness
from attestsim.codec import ChallengeResponse, decode
from attestsim.errors import HarnessError
from attestsim.harness import (
    Action,
    Expectation,
    Interposer,
    Interposition,
    Threat,
    load_catalog,
    mutation_sweep,
    parse_catalog,
    raw_fuzz,
    record_and_mutate,
    run_catalog,
    run_scenario,
    scan_reachable,
)
from attestsim.protocol import RejectReason

CATALOG = load_catalog()


@pytest.mark.parametrize("scenario", CATALOG, ids=lambda s: s.name)
def test_catalog_scenario_passes(scenario):
    report = run_scenario(scenario, seed=11)
    assert report.passed, report.line()


def test_catalog_covers_every_threat():
    assert {s.threat_ref for s in CATALOG} == set(Threat)


def test_catalog_missing_threat_refused():
    text = "[only]\nthreat = T5_Mitm\nsetup = legit\nscript = pass, pass\nexpect = trusted\n"
    with pytest.raises(HarnessError, match="misses threats"):
        parse_catalog(text)


@pytest.mark.parametrize("section", [
    "threat = T9_Nope\nexpect = trusted",
    "threat = T5_Mitm\nsetup = weird\nexpect = trusted",
    "threat = T5_Mitm\nscript = frobnicate\nexpect = trusted",
    "threat = T5_Mitm\nscript = modify:response.nope\nexpect = trusted",
    "threat = T5_Mitm\nscript = inject:nope\nexpect = trusted",
    "threat = T5_Mitm",
    "threat = T5_Mitm\nexpect = reject:NotAReason",
    "threat = T1_ManuPrivacy\nsetup = manufacturer_privacy\nscript = pass\nexpect = no_leak",
])
def test_catalog_parse_errors(section):
    with pytest.raises(HarnessError):
        parse_catalog(f"[bad]\n{section}\n")


def test_interposition_parse_round_trip():
    for token in ["pass", "drop", "replay:3", "modify:response.session_signature",
                  "modify:challenge.nonce=00112233445566778899aabbccddeeff", "inject:outside_tee"]:
        assert str(Interposition.parse(token)) == token
    with pytest.raises(HarnessError):
        Interposition.parse("replay:x")
    with pytest.raises(HarnessError):
        Interposition.parse("drop:1")


def test_expectation_matching():
    e = Expectation.parse("reject:ReplayDetected|ChallengeMismatch")
    assert e.matches("ProtocolReject(ChallengeMismatch)")
    assert not e.matches("Trusted")
    assert Expectation.parse("untrusted:UnknownProgram").matches("UnknownProgram")
    assert Expectation.parse("trusted").matches("Trusted")


def test_replay_of_unobserved_message_is_error():
    world, actx = harness.build_world(1, "legit")
    interposer = Interposer(actx.target.endpoint, [Interposition(Action.REPLAY, index=0)], [], actx)
    with pytest.raises(HarnessError, match="unobserved"):
        world.user().attest(interposer)


def test_run_catalog_unknown_name():
    with pytest.raises(HarnessError):
        run_catalog(CATALOG, names=["nope"])


def test_replay_scenario_alone():
    [report] = run_catalog(CATALOG, seed=2, names=["replay"])
    assert report.passed
    assert report.observed[0] in ("ProtocolReject(ReplayDetected)", "ProtocolReject(ChallengeMismatch)")


# record_and_mutate

@pytest.fixture
def transcript():
    world, actx = harness.build_world(4, "legit")
    frames = []
    user = world.user()
    res = user.attest(Interposer(actx.target.endpoint, (), frames, actx),
                      expected_serial=actx.target.serial_number)
    assert res.trusted
    return world, actx, frames


def test_record_and_mutate_changes_only_the_field(transcript):
    _, _, frames = transcript
    out = record_and_mutate(frames, "response.report.program_digest", b"\x00" * 32)
    assert out[0] == frames[0]
    assert len(out[1]) == len(frames[1])
    resp = decode(out[1], expect=ChallengeResponse)
    assert resp.report.program_digest.value == b"\x00" * 32
    assert resp.report.serial_number == decode(frames[1]).report.serial_number


def test_record_and_mutate_unknown_path(transcript):
    _, _, frames = transcript
    with pytest.raises(HarnessError):
        record_and_mutate(frames, "response.report.nope")
    with pytest.raises(HarnessError):
        record_and_mutate(frames, "sealed.box")


def test_record_and_mutate_wrong_length(transcript):
    _, _, frames = transcript
    with pytest.raises(HarnessError):
        record_and_mutate(frames, "challenge.nonce", b"\x00")


@pytest.mark.parametrize("path,reasons", [
    ("response.report.program_digest", {"SessionSigInvalid", "DeviceSigInvalid"}),
    ("response.echoed_challenge.nonce", {"ChallengeMismatch"}),
    ("response.report.serial_number", {"SessionSigInvalid", "DeviceSigInvalid", "UnknownDevice"}),
])
def test_single_field_mutations_rejected(path, reasons):
    result = mutation_sweep(seed=3, per_field=10, paths=[path])
    assert not result.false_accepts
    labels = set(result.outcomes[path])
    assert labels <= {f"ProtocolReject({r})" for r in reasons}, labels


def test_passthrough_control_accepts():
    world, actx = harness.build_world(5, "legit")
    script = [Interposition(Action.PASSTHROUGH)] * 2
    res = world.user().attest(Interposer(actx.target.endpoint, script, [], actx))
    assert res.trusted


def test_mutation_sweep_small():
    result = mutation_sweep(seed=1, per_field=5)
    assert result.cases == 5 * len(harness.all_field_paths())
    assert not result.false_accepts


def test_raw_fuzz_never_accepts():
    counts = raw_fuzz(seed=2, cases=150)
    assert "Trusted" not in counts
    assert sum(counts.values()) == 150


def test_injectors_fail_protocol():
    for name in ("outside_tee", "wrong_device", "substitute_session_key", "rewrite_program_digest"):
        # the digest rewrite only means something when the device really runs P-
        setup = "p_minus" if name == "rewrite_program_digest" else "legit"
        world, actx = harness.build_world(6, setup)
        script = [Interposition(Action.PASSTHROUGH), Interposition(Action.INJECT, injector=name)]
        res = world.user().attest(Interposer(actx.target.endpoint, script, [], actx),
                                  expected_serial=actx.target.serial_number)
        assert res.decision.protocol_reason is RejectReason.DEVICE_SIG_INVALID, name


# leak scanning

class _Slotted:
    __slots__ = ("hidden",)

    def __init__(self, v):
        self.hidden = v


def test_scanner_finds_planted_leaks():
    needle = b"\x13\x37" * 16
    for root in ([1, {"k": (b"pre" + needle,)}], _Slotted(bytearray(needle)),
                 {needle: "as key"}, {"a": [_Slotted([memoryview(needle)])]}):
        assert scan_reachable(root, [needle]), root


def test_scanner_handles_cycles():
    a = {}
    a["self"] = a
    assert scan_reachable(a, [b"x" * 8]) == []


def test_scanner_catches_leak_planted_in_secure_os(booted):
    world, handle, _ = booted
    app = handle.device.secure_os()
    secrets = harness.device_secrets(handle, world.fsbl_digest)
    assert scan_reachable(app, secrets.values()) == []
    app.leaked = secrets["device_private_key"]
    assert scan_reachable(app, secrets.values())


def test_scanner_catches_leak_planted_in_secure_memory(booted):
    from attestsim.device import WorldTag

    world, handle, _ = booted
    app = handle.device.secure_os()
    secrets = harness.device_secrets(handle, world.fsbl_digest)
    app.write(0x1000_0100, secrets["device_secret"], WorldTag.SECURE)
    assert scan_reachable(app, secrets.values())


def test_secure_os_context_has_no_device_reference(booted):
    _, handle, _ = booted
    from attestsim.device import EmulatedDevice, OtpStore

    app = handle.device.secure_os()
    stack, seen = [app], set()
    while stack:
        obj = stack.pop()
        if id(obj) in seen:
            continue
        seen.add(id(obj))
        assert not isinstance(obj, (EmulatedDevice, OtpStore))
        if hasattr(obj, "__dict__"):
            stack.extend(vars(obj).values())
        if isinstance(obj, (list, tuple, dict)):
            stack.extend(obj.values() if isinstance(obj, dict) else obj)


def test_scenario_report_line():
    report = run_scenario(CATALOG[0], seed=0)
    assert report.line().startswith("PASS control-passthrough")
