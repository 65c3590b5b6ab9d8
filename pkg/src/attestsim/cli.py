"""Command-line orchestrator.

    attestsim lifecycle [--seed N] [--registry ADDR] [--fsbl F] [--image P] [--policy FILE] [--out LOG]
    attestsim attack NAME|all [--seed N] [--catalog FILE] [--out JSON]
    attestsim inspect REPORT [--snapshot STORE]
    attestsim registry serve --registry ADDR [--store PATH] [--seed N]

Exit status: 0 success / Trusted, 1 Untrusted or a failed scenario, 2 bad input.
"""

from __future__ import annotations

import argparse
import json
import logging
import random
import sys
from pathlib import Path
from typing import List, Optional

from . import harness
from .codec import AttestationReport, ChallengeResponse, decode, encode
from .device import BitstreamImage, SystemImage
from .errors import AttestSimError, CodecError, HarnessError
from .registry import ProvisioningService, RegistryClient, RegistryServer, load_snapshot
from .verifier import MeasurementPolicy
from .world import Fixtures, World

log = logging.getLogger("attestsim")

EXIT_OK, EXIT_UNTRUSTED, EXIT_USAGE = 0, 1, 2
SERVICE_SEED_SALT = 0x9E3779B97F4A7C15
CHANNEL_PROBE = b"secure channel probe"


def _fail(msg: str) -> int:
    print(f"attestsim: error: {msg}", file=sys.stderr)
    return EXIT_USAGE


def _write(path: Optional[str], text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def cmd_lifecycle(args) -> int:
    for flag in ("fsbl", "image", "p_plus", "os_payload", "policy"):
        path = getattr(args, flag)
        if path is not None and not Path(path).is_file():
            return _fail(f"--{flag.replace('_', '-')}: no such file: {path}")
    fixtures = Fixtures.from_paths(fsbl=args.fsbl, p_plus=args.p_plus,
                                  os_payload=args.os_payload)
    image_bytes = Path(args.image).read_bytes() if args.image else fixtures.p_plus
    label = Path(args.image).name if args.image else "P+"
    image = SystemImage(BitstreamImage(image_bytes, label), fixtures.os_payload)

    server = None
    if args.registry:
        registry = RegistryClient(args.registry)
    else:
        service_rng = random.Random(args.seed ^ SERVICE_SEED_SALT)
        server = RegistryServer(ProvisioningService(args.store, rng=service_rng),
                                "127.0.0.1:0").start()
        registry = RegistryClient(server.address)
    try:
        world = World(seed=args.seed, fixtures=fixtures, registry=registry)
        handles = [world.add_device(serial, image=image) for serial in range(1, args.devices + 1)]
        policy = (MeasurementPolicy.load(args.policy) if args.policy
                  else world.policy())
        user = world.user(policy)
        results = [world.attest(h, user) for h in handles]
        agreed = True
        lines = []
        for h, res in zip(handles, results):
            lines.append(encode(res.challenge).hex())
            if res.response is not None:
                lines.append(encode(res.response).hex())
            if res.trusted:
                sealed = res.channel.seal(CHANNEL_PROBE)
                lines.append(encode(sealed).hex())
                device_side = h.endpoint.channel(res.challenge)
                ok = device_side.secret == res.channel.secret and \
                    device_side.open(sealed) == CHANNEL_PROBE
                agreed = agreed and ok
                world.emit("operational", "U", "channel", sealed, serial=h.serial_number,
                           agreed=ok)
        failed = [r for r in results if not r.trusted]
        trusted = not failed and agreed
        world.emit("operational", "U", "result", None, devices=len(results),
                   verdict="Trusted" if trusted else "Untrusted",
                   reason="Ok" if trusted else (failed[0].decision.label if failed else "ChannelMismatch"))
        if args.transcript:
            Path(args.transcript).write_text("".join(line + "\n" for line in lines))
        if args.report_out and handles[0].boot.report is not None:
            Path(args.report_out).write_bytes(encode(handles[0].boot.report))
    except (AttestSimError, OSError) as exc:
        return _fail(str(exc))
    finally:
        if server is not None:
            server.stop()
    _write(args.out, world.event_log())
    return EXIT_OK if trusted else EXIT_UNTRUSTED


def cmd_attack(args) -> int:
    try:
        catalog = harness.load_catalog(args.catalog)
    except (OSError, HarnessError) as exc:
        return _fail(f"catalog: {exc}")
    names = None if args.scenario == "all" else [args.scenario]
    try:
        reports = harness.run_catalog(catalog, seed=args.seed, names=names)
    except HarnessError as exc:
        return _fail(str(exc))
    for r in reports:
        print(r.line())
    if args.out:
        payload = [
            {"name": r.name, "threat": r.threat_ref.value, "expected": r.expected,
             "observed": r.observed, "passed": r.passed}
            for r in reports
        ]
        Path(args.out).write_text(json.dumps(payload, indent=2) + "\n")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_UNTRUSTED


def report_fields(report: AttestationReport) -> dict:
    return {
        "serial_number": report.serial_number,
        "fsbl_digest": report.fsbl_digest.hex(),
        "program_digest": report.program_digest.hex(),
        "session_signing_key": report.session_public_key.signing.hex(),
        "session_dh_key": report.session_public_key.dh.hex(),
        "suite_id": report.suite_id,
        "device_signature": report.device_signature.hex(),
    }


def cmd_inspect(args) -> int:
    try:
        data = Path(args.report).read_bytes()
    except OSError as exc:
        return _fail(str(exc))
    try:
        msg = decode(data)
    except CodecError as exc:
        return _fail(f"{args.report}: {exc}")
    if isinstance(msg, ChallengeResponse):
        msg = msg.report
    if not isinstance(msg, AttestationReport):
        return _fail(f"{args.report}: not an attestation report ({type(msg).__name__})")
    fields = report_fields(msg)
    if args.snapshot:
        try:
            records = load_snapshot(args.snapshot)
        except (OSError, CodecError) as exc:
            return _fail(f"snapshot: {exc}")
        record = records.get((msg.serial_number, msg.fsbl_digest))
        if record is None:
            fields["signature"] = "unknown-device"
        else:
            from .protocol import verify_report
            fields["signature"] = "valid" if verify_report(msg, record.device_public_key) else "invalid"
            fields["revoked"] = record.revoked
    width = max(len(k) for k in fields)
    for k, v in fields.items():
        print(f"{k:<{width}}  {v}")
    print(json.dumps(fields, sort_keys=True))
    return EXIT_OK


def cmd_registry_serve(args) -> int:
    rng = random.Random(args.seed) if args.seed is not None else None
    try:
        service = ProvisioningService(args.store, rng=rng)
        server = RegistryServer(service, args.registry)
    except (OSError, ValueError, AttestSimError) as exc:
        return _fail(str(exc))
    print(f"registry listening on {server.address}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return EXIT_OK


def seed_arg(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attestsim", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    lc = sub.add_parser("lifecycle", help="manufacture, provision, boot and attest")
    lc.add_argument("--seed", type=seed_arg, default=0)
    lc.add_argument("--registry", help="host:port or unix:/path of a running registry")
    lc.add_argument("--fsbl", help="FSBL code image (raw binary)")
    lc.add_argument("--image", help="bitstream to boot (raw binary); default P+")
    lc.add_argument("--p-plus", help="approved application bitstream for the default policy")
    lc.add_argument("--os-payload", help="Secure OS payload (raw binary)")
    lc.add_argument("--policy", help="policy file with [fsbl] and [programs] sections")
    lc.add_argument("--devices", type=int, default=1)
    lc.add_argument("--store", help="persist the in-process registry to this store file")
    lc.add_argument("--out", help="JSON-lines event log (default stdout)")
    lc.add_argument("--transcript", help="write the protocol transcript as hex lines")
    lc.add_argument("--report-out", help="write device 1's encoded attestation report")
    lc.set_defaults(func=cmd_lifecycle)

    at = sub.add_parser("attack", help="run attack scenarios")
    at.add_argument("scenario", help="scenario name or 'all'")
    at.add_argument("--seed", type=seed_arg, default=0)
    at.add_argument("--catalog", help="scenario catalog file (default: packaged)")
    at.add_argument("--out", help="write per-scenario results as JSON")
    at.set_defaults(func=cmd_attack)

    ins = sub.add_parser("inspect", help="pretty-print an encoded attestation report")
    ins.add_argument("report")
    ins.add_argument("--snapshot", help="registry store file used to check the signature")
    ins.set_defaults(func=cmd_inspect)

    reg = sub.add_parser("registry", help="provisioning service")
    reg_sub = reg.add_subparsers(dest="registry_command", required=True)
    serve = reg_sub.add_parser("serve")
    serve.add_argument("--registry", default="127.0.0.1:7700")
    serve.add_argument("--store", help="append-only store file")
    serve.add_argument("--seed", type=seed_arg)
    serve.set_defaults(func=cmd_registry_serve)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
