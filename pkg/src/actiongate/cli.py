"""Command-line entry points: gate, audit, chronicle, acev."""
from __future__ import annotations

import argparse
import json
import os
import signal
import sys
import threading
from typing import Optional

from . import __version__
from .approvals_http import ConsoleServer
from .audit import verify_file
from .chronicle import Chronicle, ChronicleError
from .config import ConfigError, GatewayConfig, load_config
from .gateway import GatewayServer, StartupError, build_runtime, new_session
from .guardian import Guardian
from .harness import (
    CONFIG_LABELS,
    HarnessError,
    SuiteError,
    load_suite,
    run_suite,
)


def _fail(message: str, code: int = 2) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


# -- gate ---------------------------------------------------------------


def main_gate(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="gate", description="action gateway daemon")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run the gateway until interrupted")
    serve.add_argument("--config", help="YAML config file (defaults apply if omitted)")
    serve.add_argument("--console-static", help="directory with the console page bundle")

    session = sub.add_parser("session", help="proposer session management")
    session_sub = session.add_subparsers(dest="session_command", required=True)
    new = session_sub.add_parser("new", help="mint a session token")
    new.add_argument("--config", help="YAML config file (for the state directory)")
    new.add_argument("--id", help="explicit session id (random if omitted)")

    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config) if args.config else GatewayConfig()
    except (ConfigError, OSError) as exc:
        return _fail(f"bad config: {exc}")

    if args.command == "session":
        try:
            sid, _token, path = new_session(cfg.resolved_state_dir(), session_id=args.id)
        except FileExistsError:
            return _fail(f"session {args.id!r} already exists")
        print(f"session: {sid}")
        print(f"token file: {path}")
        print("export OP_AGENT_TOKEN from that file for proposer subprocesses")
        return 0

    # serve
    try:
        runtime = build_runtime(cfg)
    except StartupError as exc:
        return _fail(str(exc), code=1)
    try:
        server = GatewayServer(runtime)
    except OSError as exc:
        return _fail(f"cannot bind {cfg.host}:{cfg.port}: {exc}", code=1)
    try:
        console = ConsoleServer(
            runtime.broker,
            runtime.console_credential,
            host=cfg.host,
            port=cfg.http_port,
            static_dir=args.console_static,
        )
    except OSError as exc:
        return _fail(f"cannot bind console port {cfg.http_port}: {exc}", code=1)

    stop = threading.Event()

    def handle_signal(signum, frame):
        stop.set()

    signal.signal(signal.SIGINT, handle_signal)
    signal.signal(signal.SIGTERM, handle_signal)

    server.start()
    console.start()
    host, port = server.address
    chost, cport = console.address
    print(f"gateway listening on {host}:{port}")
    print(f"approval console on http://{chost}:{cport}/ (credential in state dir)")
    stop.wait()
    print("shutting down")
    console.shutdown()
    server.shutdown()
    return 0


# -- audit --------------------------------------------------------------


def _audit_path(args) -> str:
    if args.ledger:
        return args.ledger
    cfg = load_config(args.config) if args.config else GatewayConfig()
    return os.path.join(cfg.resolved_state_dir(), "audit.jsonl")


def main_audit(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="audit", description="audit ledger tools")
    sub = parser.add_subparsers(dest="command", required=True)

    verify = sub.add_parser("verify", help="verify the hash chain")
    verify.add_argument("--ledger", help="ledger path (overrides config)")
    verify.add_argument("--config", help="YAML config file")

    tail = sub.add_parser("tail", help="print the last records")
    tail.add_argument("--ledger", help="ledger path (overrides config)")
    tail.add_argument("--config", help="YAML config file")
    tail.add_argument("-n", type=int, default=10, help="record count (default 10)")

    args = parser.parse_args(argv)
    try:
        path = _audit_path(args)
    except (ConfigError, OSError) as exc:
        return _fail(f"bad config: {exc}")

    if args.command == "verify":
        result = verify_file(path)
        print(result.describe())
        return 0 if result.ok else 1

    # tail
    try:
        with open(path, encoding="utf-8") as fh:
            lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    except OSError as exc:
        return _fail(f"cannot read {path}: {exc}")
    for line in lines[-max(0, args.n):]:
        print(line)
    return 0


# -- chronicle ----------------------------------------------------------


def main_chronicle(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="chronicle", description="snapshot store tools")
    parser.add_argument("--config", help="YAML config file (for the state directory)")
    sub = parser.add_subparsers(dest="command", required=True)

    lst = sub.add_parser("list", help="list captured snapshots")
    lst.add_argument("--path", help="only snapshots of this path")

    roll = sub.add_parser("rollback", help="restore a snapshot to its original path")
    roll.add_argument("snapshot_id", help="snapshot id (prefix accepted)")

    prune = sub.add_parser("prune", help="drop old snapshots")
    prune.add_argument("--max-count", type=int, help="keep at most N snapshots")
    prune.add_argument("--max-age-days", type=int, help="drop snapshots older than this")

    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else GatewayConfig()
    except (ConfigError, OSError) as exc:
        return _fail(f"bad config: {exc}")
    chron = Chronicle(cfg.resolved_state_dir())

    if args.command == "list":
        records = chron.records()
        if args.path:
            records = [r for r in records if r.path == args.path]
        for rec in records:
            print(
                f"{rec.snapshot_id[:12]}  {rec.kind:<4} {rec.size:>10}  "
                f"{rec.ts}  {rec.path}  ({rec.action_id})"
            )
        if not records:
            print("no snapshots")
        return 0

    if args.command == "rollback":
        guardian = Guardian(
            state_dir=cfg.resolved_state_dir(),
            workspace_root=cfg.resolved_root(),
            home=cfg.resolved_home(),
            policy_path=cfg.policy_file,
        )
        try:
            record = chron.rollback(args.snapshot_id, refuse=guardian.restore_refusal)
        except ChronicleError as exc:
            return _fail(str(exc), code=1)
        print(f"restored {record.path} ({record.snapshot_id[:12]})")
        return 0

    # prune
    kwargs = {}
    if args.max_count is not None:
        kwargs["max_count"] = args.max_count
    if args.max_age_days is not None:
        kwargs["max_age_days"] = args.max_age_days
    report = chron.prune(**kwargs)
    print(
        f"removed {report.removed_records} snapshot(s), "
        f"{report.removed_blobs} blob(s); kept {report.kept}"
    )
    return 0


# -- acev ---------------------------------------------------------------

_LABEL_ALIASES = {"A": "A", "C": "C_default", "C_default": "C_default",
                  "C-maxsec": "C_maxsec", "C_maxsec": "C_maxsec"}


def main_acev(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="acev", description="adversarial evaluation harness"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a suite against a fresh gateway")
    run.add_argument("--suite", required=True, help="directory of YAML case files")
    run.add_argument(
        "--config",
        required=True,
        choices=sorted(_LABEL_ALIASES),
        help="A (pipeline off), C/C_default, or C-maxsec (empty bypass set)",
    )
    run.add_argument("--report", help="write the JSON report here")
    run.add_argument("--parallel", action="store_true", help="run categories concurrently")

    args = parser.parse_args(argv)
    label = _LABEL_ALIASES[args.config]
    try:
        suite = load_suite(args.suite)
    except SuiteError as exc:
        return _fail(str(exc))
    if not suite:
        return _fail("suite is empty", code=1)
    try:
        report = run_suite(suite, label, parallel=args.parallel)
    except HarnessError as exc:
        return _fail(str(exc), code=1)
    print(report.render_table())
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(report.to_json(), fh, indent=2, ensure_ascii=False)
            fh.write("\n")
        print(f"\nreport written to {args.report}")
    if not report.reconciliation.get("ok", False):
        print("reconciliation problems:", file=sys.stderr)
        for problem in report.reconciliation.get("problems", []):
            print(f"  {problem}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main_gate())
