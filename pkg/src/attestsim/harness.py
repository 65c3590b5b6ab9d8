"""Man-in-the-middle and lifecycle attacker with a self-checking scenario catalog.

The interposer sits on the simulated transport between a
:class:`~attestsim.verifier.RemoteUser` and a device endpoint and works on
framed messages.  Each scenario names the threat it exercises and the verdict
the system must reach; :func:`run_scenario` reports whether it did.
"""

from __future__ import annotations

import configparser
import logging
import random
import types
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from . import crypto, protocol
from .codec import (
    AttestationReport,
    Challenge,
    ChallengeResponse,
    SealedMessage,
    decode,
    encode,
    field_paths,
    field_spans,
    replace_field,
)
from .device import DEFAULT_REGIONS, Access, Op, RegionKind, WorldTag, measure
from .errors import AccessDenied, ChannelError, CodecError, HarnessError
from .protocol import RejectReason
from .verifier import AttestationResult, Verdict
from .world import DeviceHandle, World

logger = logging.getLogger(__name__)


class Threat(str, Enum):
    T1_MANU_PRIVACY = "T1_ManuPrivacy"
    T2_PROV_PRIVACY = "T2_ProvPrivacy"
    T3_WRONG_APP = "T3_WrongApp"
    T4_OUTSIDE_TEE = "T4_OutsideTee"
    T5_MITM = "T5_Mitm"
    T6_MALICIOUS_DEV = "T6_MaliciousDev"


class Action(str, Enum):
    PASSTHROUGH = "pass"
    DROP = "drop"
    REPLAY = "replay"
    MODIFY = "modify"
    INJECT = "inject"


@dataclass(frozen=True)
class Interposition:
    action: Action
    index: Optional[int] = None
    path: Optional[str] = None
    value: Optional[bytes] = None
    injector: Optional[str] = None

    @classmethod
    def parse(cls, token: str) -> "Interposition":
        token = token.strip()
        name, _, arg = token.partition(":")
        try:
            action = Action(name)
        except ValueError:
            raise HarnessError(f"unknown interposition {token!r}") from None
        if action in (Action.PASSTHROUGH, Action.DROP):
            if arg:
                raise HarnessError(f"{name} takes no argument")
            return cls(action)
        if not arg:
            raise HarnessError(f"{name} needs an argument")
        if action is Action.REPLAY:
            if not arg.isdigit():
                raise HarnessError(f"replay index must be an integer: {arg!r}")
            return cls(action, index=int(arg))
        if action is Action.MODIFY:
            path, _, hexval = arg.partition("=")
            resolve_path(path)
            return cls(action, path=path, value=bytes.fromhex(hexval) if hexval else None)
        if arg not in INJECTORS:
            raise HarnessError(f"unknown injector {arg!r}")
        return cls(action, injector=arg)

    def __str__(self) -> str:
        if self.action is Action.REPLAY:
            return f"replay:{self.index}"
        if self.action is Action.MODIFY:
            return f"modify:{self.path}" + (f"={self.value.hex()}" if self.value else "")
        if self.action is Action.INJECT:
            return f"inject:{self.injector}"
        return self.action.value


MESSAGE_ALIASES = {
    "challenge": Challenge,
    "response": ChallengeResponse,
    "report": AttestationReport,
    "sealed": SealedMessage,
}


def resolve_path(path: str) -> Tuple[type, str]:
    head, _, rest = path.partition(".")
    cls = MESSAGE_ALIASES.get(head)
    if cls is None or rest not in field_paths(cls):
        raise HarnessError(f"unknown field path {path!r}")
    return cls, rest


def all_field_paths() -> List[str]:
    return [f"{alias}.{p}" for alias in ("challenge", "response", "sealed")
            for p in field_paths(MESSAGE_ALIASES[alias])]


def random_mutation(old: bytes, rng: random.Random) -> bytes:
    """A same-length replacement that differs from ``old``.

    Mixes single-bit flips, single-byte rewrites and whole-field rewrites.
    """
    if not old:
        raise HarnessError("cannot mutate an empty field")
    for _ in range(64):
        style = rng.randrange(3)
        buf = bytearray(old)
        if style == 0:
            bit = rng.randrange(len(buf) * 8)
            buf[bit // 8] ^= 1 << (bit % 8)
        elif style == 1:
            buf[rng.randrange(len(buf))] = rng.randrange(256)
        else:
            buf = bytearray(rng.randbytes(len(buf)))
        if bytes(buf) != old:
            return bytes(buf)
    buf = bytearray(old)
    buf[0] ^= 0xFF
    return bytes(buf)


def mutate_frame(frame: bytes, path: str, value: Optional[bytes] = None,
                 rng: Optional[random.Random] = None) -> bytes:
    """Overwrite the bytes of one named field in place; framing stays valid."""
    cls, rel = resolve_path(path)
    msg = decode(frame)
    if not isinstance(msg, cls):
        raise HarnessError(f"{path} does not apply to a {type(msg).__name__} frame")
    start, end = field_spans(msg)[rel]
    old = frame[start:end]
    if value is None:
        value = random_mutation(old, rng or random.Random())
    if len(value) != len(old):
        raise HarnessError(f"{path} is {len(old)} bytes, replacement is {len(value)}")
    return frame[:start] + value + frame[end:]


def record_and_mutate(transcript: Sequence[bytes], path: str,
                      mutation: Optional[bytes] = None,
                      rng: Optional[random.Random] = None) -> List[bytes]:
    """Copy of ``transcript`` with ``path`` mutated in the first frame it applies to."""
    cls, _ = resolve_path(path)
    out = list(transcript)
    for i, frame in enumerate(out):
        try:
            msg = decode(frame)
        except CodecError:
            continue
        if isinstance(msg, cls):
            out[i] = mutate_frame(frame, path, mutation, rng)
            return out
    raise HarnessError(f"no {cls.__name__} in transcript for {path}")


# Injectors: build a forged message in place of the one in flight.

@dataclass
class AttackContext:
    world: World
    target: DeviceHandle
    other: Optional[DeviceHandle]
    rng: random.Random
    last_challenge: Optional[Challenge] = None


def _inject_outside_tee(ctx: AttackContext, frame: bytes) -> bytes:
    """Run P+ outside any TEE: correct measurements, but no device key to sign with."""
    challenge = ctx.last_challenge
    fake_device_key = crypto.SigningKeypair.generate(ctx.rng)
    session = protocol.SessionKeys.generate(ctx.rng)
    report = protocol.build_report(
        ctx.target.serial_number, ctx.world.fsbl_digest,
        measure(ctx.world.fixtures.image("P+")), session.public, fake_device_key,
    )
    return encode(protocol.sign_response(report, challenge, session.signing))


def _inject_wrong_device(ctx: AttackContext, frame: bytes) -> bytes:
    """Have a different registered device, running P+, answer the challenge."""
    if ctx.other is None:
        raise HarnessError("wrong_device needs a second device")
    return encode(ctx.other.device.respond(ctx.last_challenge))


def _inject_substitute_session_key(ctx: AttackContext, frame: bytes) -> bytes:
    """Swap in the attacker's session key and re-sign the response with it."""
    resp = decode(frame, expect=ChallengeResponse)
    attacker = protocol.SessionKeys.generate(ctx.rng)
    report = replace_field(resp.report, "session_public_key", attacker.public)
    return encode(protocol.sign_response(report, resp.echoed_challenge, attacker.signing))


def _inject_rewrite_program_digest(ctx: AttackContext, frame: bytes) -> bytes:
    """Owner controls the Secure OS (and k_prv_s) and claims P+ was measured."""
    resp = decode(frame, expect=ChallengeResponse)
    report = replace_field(resp.report, "program_digest", measure(ctx.world.fixtures.image("P+")))
    session_key = ctx.target.device.boot_state.session_keys.signing
    return encode(protocol.sign_response(report, resp.echoed_challenge, session_key))


INJECTORS: Dict[str, Callable[[AttackContext, bytes], bytes]] = {
    "outside_tee": _inject_outside_tee,
    "wrong_device": _inject_wrong_device,
    "substitute_session_key": _inject_substitute_session_key,
    "rewrite_program_digest": _inject_rewrite_program_digest,
}


class Interposer:
    """Transport wrapper applying one scripted action per message in flight.

    Message order within one exchange is challenge, then response.  Every
    message is appended to ``transcript`` as observed (before the action), so
    ``replay:N`` indices refer to earlier traffic, including earlier runs
    sharing the same transcript list.
    """

    def __init__(self, inner: Callable[[bytes], bytes], script: Sequence[Interposition] = (),
                 transcript: Optional[List[bytes]] = None,
                 context: Optional[AttackContext] = None) -> None:
        self.inner = inner
        self.script = list(script)
        self.transcript = transcript if transcript is not None else []
        self.context = context
        self.delivered: List[Optional[bytes]] = []

    def _next(self) -> Interposition:
        return self.script.pop(0) if self.script else Interposition(Action.PASSTHROUGH)

    def _apply(self, frame: bytes) -> Optional[bytes]:
        step = self._next()
        observed = len(self.transcript)
        self.transcript.append(frame)
        if step.action is Action.PASSTHROUGH:
            out = frame
        elif step.action is Action.DROP:
            out = None
        elif step.action is Action.REPLAY:
            if step.index is None or step.index >= observed:
                raise HarnessError(f"replay:{step.index} refers to an unobserved message")
            out = self.transcript[step.index]
        elif step.action is Action.MODIFY:
            rng = self.context.rng if self.context else random.Random(0)
            out = mutate_frame(frame, step.path, step.value, rng)
        else:
            if self.context is None:
                raise HarnessError("injection needs an attack context")
            out = INJECTORS[step.injector](self.context, frame)
        self.delivered.append(out)
        return out

    def __call__(self, frame: bytes) -> bytes:
        out = self._apply(frame)
        if out is None:
            raise ConnectionError("challenge dropped in transit")
        if self.context is not None:
            try:
                self.context.last_challenge = decode(out, expect=Challenge)
            except CodecError:
                pass
        reply = self._apply(self.inner(out))
        if reply is None:
            raise ConnectionError("response dropped in transit")
        return reply


# Reachable-state scanning.

_OPAQUE = (type, types.ModuleType, types.FunctionType, types.BuiltinFunctionType,
           types.MethodType, int, float, complex, bool, type(None), str, Enum)


def scan_reachable(root: Any, needles: Iterable[bytes]) -> List[str]:
    """Paths of every byte-like value reachable from ``root`` containing a needle."""
    needles = [bytes(n) for n in needles if n]
    hits: List[str] = []
    seen = set()
    stack: List[Tuple[str, Any]] = [("root", root)]
    while stack:
        path, obj = stack.pop()
        if id(obj) in seen or isinstance(obj, _OPAQUE):
            continue
        seen.add(id(obj))
        if isinstance(obj, (bytes, bytearray, memoryview)):
            data = bytes(obj)
            hits.extend(path for n in needles if n in data)
            continue
        if isinstance(obj, dict):
            for k, v in obj.items():
                stack.append((f"{path}[{k!r}]", k))
                stack.append((f"{path}[{k!r}]", v))
            continue
        if isinstance(obj, (list, tuple, set, frozenset)):
            for i, v in enumerate(obj):
                stack.append((f"{path}[{i}]", v))
            continue
        if hasattr(obj, "__dict__"):
            stack.append((f"{path}.__dict__", vars(obj)))
        for klass in type(obj).__mro__:
            for slot in getattr(klass, "__slots__", ()):
                if hasattr(obj, slot):
                    stack.append((f"{path}.{slot}", getattr(obj, slot)))
    return hits


def device_secrets(handle: DeviceHandle, fsbl_digest: crypto.Digest) -> Dict[str, bytes]:
    """Harness-only view of what must never leak: the fused secret and k_prv_dev."""
    secret = bytes(handle.device.otp._device_secret)
    return {"device_secret": secret,
            "device_private_key": crypto.device_key_seed(secret, fsbl_digest)}


# Scenarios.

class ExpectKind(str, Enum):
    TRUSTED = "trusted"
    UNTRUSTED = "untrusted"
    REJECT = "reject"
    DENIED = "denied"
    NO_LEAK = "no_leak"


@dataclass(frozen=True)
class Expectation:
    kind: ExpectKind
    labels: Tuple[str, ...] = ()

    @classmethod
    def parse(cls, text: str) -> "Expectation":
        kind, _, rest = text.strip().partition(":")
        try:
            k = ExpectKind(kind)
        except ValueError:
            raise HarnessError(f"unknown expectation {text!r}") from None
        labels = tuple(x.strip() for x in rest.split("|") if x.strip())
        if k is ExpectKind.REJECT:
            valid = {r.value for r in RejectReason}
            bad = [lbl for lbl in labels if lbl not in valid]
            if bad or not labels:
                raise HarnessError(f"bad reject reasons in {text!r}")
        if k is ExpectKind.UNTRUSTED and not labels:
            raise HarnessError("untrusted expectation needs a reason")
        return cls(k, labels)

    def matches(self, observed: str) -> bool:
        if self.kind is ExpectKind.TRUSTED:
            return observed == "Trusted"
        if self.kind is ExpectKind.UNTRUSTED:
            return observed in self.labels
        if self.kind is ExpectKind.REJECT:
            return observed in {f"ProtocolReject({lbl})" for lbl in self.labels}
        if self.kind is ExpectKind.DENIED:
            return observed == "AccessDenied"
        return observed == "NoLeak"

    def __str__(self) -> str:
        return self.kind.value + (":" + "|".join(self.labels) if self.labels else "")


ATTEST_SETUPS = {"legit", "p_minus", "record_prior", "reuse_challenge"}
CHECK_SETUPS = {"manufacturer_privacy", "provisioning_privacy", "malicious_app",
                "normal_world_isolation"}


@dataclass(frozen=True)
class AttackScenario:
    name: str
    threat_ref: Threat
    setup: str
    script: Tuple[Interposition, ...]
    expect: Expectation
    description: str = ""


@dataclass
class ScenarioReport:
    name: str
    threat_ref: Threat
    expected: str
    observed: List[str]
    passed: bool
    details: Dict[str, Any] = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name} [{self.threat_ref.value}] expected={self.expected} observed={','.join(self.observed)}"


def parse_catalog(text: str) -> List[AttackScenario]:
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string(text)
    out = []
    for name in cp.sections():
        sec = cp[name]
        try:
            threat = Threat(sec["threat"].strip())
        except (KeyError, ValueError):
            raise HarnessError(f"scenario {name}: missing or unknown threat") from None
        setup = sec.get("setup", "legit").strip()
        if setup not in ATTEST_SETUPS | CHECK_SETUPS:
            raise HarnessError(f"scenario {name}: unknown setup {setup!r}")
        script = tuple(Interposition.parse(t) for t in sec.get("script", "").split(",") if t.strip())
        if setup in CHECK_SETUPS and script:
            raise HarnessError(f"scenario {name}: setup {setup} takes no script")
        if "expect" not in sec:
            raise HarnessError(f"scenario {name}: missing expect")
        out.append(AttackScenario(name, threat, setup, script, Expectation.parse(sec["expect"]),
                                  sec.get("description", "").strip()))
    validate_catalog(out)
    return out


def validate_catalog(scenarios: Sequence[AttackScenario]) -> None:
    names = [s.name for s in scenarios]
    if len(set(names)) != len(names):
        raise HarnessError("duplicate scenario names")
    missing = set(Threat) - {s.threat_ref for s in scenarios}
    if missing:
        raise HarnessError("catalog misses threats: " + ", ".join(sorted(t.value for t in missing)))


def load_catalog(path=None) -> List[AttackScenario]:
    if path is None:
        text = resources.files("attestsim").joinpath("catalog.ini").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    return parse_catalog(text)


def build_world(seed: int, setup: str) -> Tuple[World, AttackContext]:
    world = World(seed=seed)
    image = world.fixtures.image("P-" if setup == "p_minus" else "P+")
    target = world.add_device(1, image=image)
    other = world.add_device(2)
    return world, AttackContext(world, target, other, random.Random(seed ^ 0x5EED))


def run_scenario(scenario: AttackScenario, seed: int = 0) -> ScenarioReport:
    world, actx = build_world(seed, scenario.setup)
    if scenario.setup in CHECK_SETUPS:
        observed, details = _run_check(scenario.setup, world, actx)
    else:
        observed, details = _run_attestation(scenario, world, actx)
    details["device_events"] = list(actx.target.device.events)
    passed = all(scenario.expect.matches(o) for o in observed) and bool(observed)
    return ScenarioReport(scenario.name, scenario.threat_ref, str(scenario.expect),
                          observed, passed, details)


def _run_attestation(scenario: AttackScenario, world: World, actx: AttackContext):
    user = world.user()
    transcript: List[bytes] = []
    prior: Optional[AttestationResult] = None
    if scenario.setup in ("record_prior", "reuse_challenge"):
        prior = user.attest(Interposer(actx.target.endpoint, (), transcript, actx),
                            expected_serial=actx.target.serial_number)
        if not prior.trusted:
            raise HarnessError(f"setup run was not trusted: {prior.decision}")
    interposer = Interposer(actx.target.endpoint, scenario.script, transcript, actx)
    kwargs: Dict[str, Any] = {"expected_serial": actx.target.serial_number}
    if scenario.setup == "reuse_challenge":
        kwargs.update(challenge=prior.challenge, dh=prior.dh)
    result = user.attest(interposer, **kwargs)
    if result.trusted and result.channel is not None:
        device_side = actx.target.endpoint.channel(result.challenge)
        probe = b"case-study input tile"
        if device_side.open(result.channel.seal(probe)) != probe:
            raise HarnessError("channel round trip failed")
    details = {
        "transcript": [f.hex() for f in transcript],
        "delivered": [f.hex() if f else None for f in interposer.delivered],
        "detail": result.detail,
    }
    return [result.decision.outcome], details


def _run_check(setup: str, world: World, actx: AttackContext):
    target = actx.target
    if setup in ("manufacturer_privacy", "provisioning_privacy"):
        res = world.attest(target, transport=target.endpoint)
        if not res.trusted:
            raise HarnessError("privacy setup run was not trusted")
        needles = [measure(world.fixtures.image(p)).value for p in ("P+", "P-")]
        root = world.manufacturer if setup == "manufacturer_privacy" else world.registry
        hits = scan_reachable(root, needles)
        audit = len(world.registry.audit_log)
        return ["NoLeak" if not hits else "Leak"], {"hits": hits, "audit_entries": audit}
    if setup == "malicious_app":
        app = target.device.secure_os()
        secrets = device_secrets(target, world.fsbl_digest)
        hits = scan_reachable(app, secrets.values())
        attempts = []
        try:
            app.read_device_secret()
            attempts.append("read_device_secret succeeded")
        except AccessDenied:
            pass
        for region in DEFAULT_REGIONS:
            for world_tag in WorldTag:
                try:
                    data = app.read(region.start, region.size, world_tag)
                except AccessDenied:
                    continue
                if any(s in data for s in secrets.values()):
                    attempts.append(f"{region.name} via {world_tag.value}")
        ok = not hits and not attempts
        return ["NoLeak" if ok else "Leak"], {"hits": hits, "attempts": attempts}
    # normal_world_isolation
    observed = []
    device = target.device
    for region in device.address_space.regions:
        if region.kind in (RegionKind.PL_MMIO, RegionKind.RECONFIG_PORT) or region.world is WorldTag.SECURE:
            for op in Op:
                observed.append(device.access(region.start, WorldTag.NORMAL, op).value)
    observed.append(device.reconfigure_pl(WorldTag.NORMAL, world.fixtures.image("P-").bitstream).value)
    return observed, {}


def run_catalog(scenarios: Sequence[AttackScenario], seed: int = 0,
                names: Optional[Iterable[str]] = None) -> List[ScenarioReport]:
    wanted = None if names is None else set(names)
    if wanted is not None:
        unknown = wanted - {s.name for s in scenarios}
        if unknown:
            raise HarnessError("unknown scenarios: " + ", ".join(sorted(unknown)))
    return [run_scenario(s, seed) for s in scenarios if wanted is None or s.name in wanted]


# Sweeps.

@dataclass
class SweepResult:
    outcomes: Dict[str, Counter]
    false_accepts: List[Tuple[str, str]]

    @property
    def cases(self) -> int:
        return sum(sum(c.values()) for c in self.outcomes.values())


def mutation_sweep(seed: int = 0, per_field: int = 100,
                   paths: Optional[Sequence[str]] = None) -> SweepResult:
    """Mutate each field of each protocol message in an otherwise legitimate flow."""
    world, actx = build_world(seed, "legit")
    user = world.user()
    rng = random.Random(seed ^ 0xF1E1D)
    outcomes: Dict[str, Counter] = {}
    false_accepts: List[Tuple[str, str]] = []
    for path in paths if paths is not None else all_field_paths():
        counts: Counter = Counter()
        for _ in range(per_field):
            if path.startswith("sealed."):
                label = _sealed_case(world, actx, user, path, rng)
            else:
                value = None
                step = Interposition(Action.MODIFY, path=path, value=value)
                script = [step] if path.startswith("challenge.") else [Interposition(Action.PASSTHROUGH), step]
                actx.rng = rng
                result = user.attest(Interposer(actx.target.endpoint, script, None, actx),
                                     expected_serial=actx.target.serial_number)
                label = result.decision.outcome
            counts[label] += 1
            if label in ("Trusted", "Accepted"):
                false_accepts.append((path, label))
        outcomes[path] = counts
    return SweepResult(outcomes, false_accepts)


def _sealed_case(world: World, actx: AttackContext, user, path: str, rng: random.Random) -> str:
    result = user.attest(actx.target.endpoint, expected_serial=actx.target.serial_number)
    if not result.trusted:
        return result.decision.outcome
    device_side = actx.target.endpoint.channel(result.challenge)
    frame = encode(result.channel.seal(rng.randbytes(64)))
    mutated = mutate_frame(frame, path, None, rng)
    try:
        device_side.open(decode(mutated, expect=SealedMessage))
    except (ChannelError, CodecError):
        return "ChannelReject"
    return "Accepted"


def raw_fuzz(seed: int = 0, cases: int = 200) -> Counter:
    """Byte-level fuzzing of the response frame (framing and codec robustness)."""
    world, actx = build_world(seed, "legit")
    user = world.user()
    rng = random.Random(seed ^ 0xBADF00D)
    counts: Counter = Counter()

    def corrupt(frame: bytes) -> bytes:
        buf = bytearray(frame)
        style = rng.randrange(4)
        if style == 0:
            for _ in range(rng.randint(1, 4)):
                buf[rng.randrange(len(buf))] ^= 1 << rng.randrange(8)
        elif style == 1:
            del buf[rng.randrange(len(buf)):]
        elif style == 2:
            buf += rng.randbytes(rng.randint(1, 8))
        else:
            i = rng.randrange(len(buf))
            buf[i:i + 4] = rng.randbytes(4)
        return bytes(buf)

    for _ in range(cases):
        transport = lambda frame: corrupt(actx.target.endpoint(frame))  # noqa: E731
        counts[user.attest(transport, expected_serial=actx.target.serial_number).decision.outcome] += 1
    return counts
