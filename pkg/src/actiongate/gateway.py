"""The gateway daemon: builds the full pipeline from config, authenticates
proposer sessions over loopback TCP, and mediates every proposed action.

Session tokens are distributed through the filesystem: `gate session new`
writes <state>/sessions/<id>.token (mode 0600) and prints the path; the
proposer reads the token and presents it in its hello message. The state
directory is FullBlock-protected by the guardian, so a proposer cannot read
tokens through the gateway itself.

Startup is fail-closed: if the policy, heuristic catalog, or IFC rules fail
to load, the daemon refuses to start.
"""
from __future__ import annotations

import hmac
import os
import secrets
import socketserver
import threading
from dataclasses import dataclass, field
from typing import Optional

from .approvals import ApprovalBroker
from .audit import AuditError, AuditLog
from .chronicle import Chronicle
from .classifier import ClassifierPort, StubClassifier
from .config import GatewayConfig, default_text
from .evaluator import (
    BudgetLedger,
    CanaryToken,
    EvalClientPort,
    HttpEvalClient,
    MockEvalClient,
)
from .executors import Executor, WorkspaceConfig
from .guardian import Guardian
from .heuristics import Catalog, CatalogError, load_catalog
from .ifc import RuleSet, RulesError, TaintMap, load_rules
from .model import MalformedAction, Session, new_auth_token, now_ms, parse_action
from .pathmatch import PathContext
from .pipeline import Pipeline
from .policy import Policy, PolicyError, load_policy
from .wire import Connection, WireError


class StartupError(Exception):
    pass


def new_session(state_dir: str, session_id: Optional[str] = None) -> tuple[str, str, str]:
    """Create a proposer session: returns (session_id, token, token_path)."""
    sessions_dir = os.path.join(state_dir, "sessions")
    os.makedirs(sessions_dir, exist_ok=True)
    sid = session_id or f"s-{secrets.token_hex(4)}"
    token = new_auth_token()
    path = os.path.join(sessions_dir, f"{sid}.token")
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o600)
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(token)
    return sid, token, path


def _session_token(state_dir: str, session_id: str) -> Optional[str]:
    if not session_id or "/" in session_id or os.sep in session_id or session_id.startswith("."):
        return None
    path = os.path.join(state_dir, "sessions", f"{session_id}.token")
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read().strip()
    except OSError:
        return None


@dataclass
class Runtime:
    cfg: GatewayConfig
    audit: AuditLog
    chronicle: Chronicle
    canary: CanaryToken
    ledger: BudgetLedger
    guardian: Guardian
    policy: Policy
    catalog: Catalog
    ruleset: RuleSet
    classifier_port: Optional[ClassifierPort]
    eval_client: Optional[EvalClientPort]
    broker: ApprovalBroker
    executor: Executor
    pipeline: Pipeline
    path_ctx: PathContext
    console_credential: str = ""
    sessions: dict = field(default_factory=dict)
    _session_locks: dict = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock)

    def session(self, session_id: str, token: str) -> Optional[Session]:
        """Authenticate and return (creating on first use) the session."""
        expected = _session_token(self.cfg.resolved_state_dir(), session_id)
        if expected is None or not hmac.compare_digest(expected, token):
            return None
        with self._lock:
            sess = self.sessions.get(session_id)
            if sess is None:
                sess = Session(
                    session_id=session_id,
                    auth_token=expected,
                    taint_map=TaintMap(),
                    created_at=now_ms(),
                )
                self.sessions[session_id] = sess
                self._session_locks[session_id] = threading.Lock()
            return sess

    def session_lock(self, session_id: str) -> threading.Lock:
        with self._lock:
            return self._session_locks.setdefault(session_id, threading.Lock())


def _load_text(path: Optional[str], default_name: str) -> str:
    if path is None:
        return default_text(default_name)
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def build_runtime(
    cfg: GatewayConfig,
    eval_client: Optional[EvalClientPort] = None,
    classifier_port: Optional[ClassifierPort] = None,
) -> Runtime:
    state_dir = cfg.resolved_state_dir()
    root = cfg.resolved_root()
    home = cfg.resolved_home()
    os.makedirs(state_dir, exist_ok=True)
    os.makedirs(os.path.join(state_dir, "sessions"), exist_ok=True)
    os.makedirs(root, exist_ok=True)

    try:
        policy = load_policy(_load_text(cfg.policy_file, "policy.yaml"), home, root)
    except (PolicyError, OSError) as exc:
        raise StartupError(f"policy load failed: {exc}") from exc
    try:
        catalog = load_catalog(_load_text(cfg.heuristics_file, "heuristics.yaml"))
    except (CatalogError, OSError) as exc:
        raise StartupError(f"heuristic catalog load failed: {exc}") from exc
    try:
        ruleset = load_rules(_load_text(cfg.ifc_rules_file, "ifc_rules.yaml"), home, root)
    except (RulesError, OSError) as exc:
        raise StartupError(f"IFC rules load failed: {exc}") from exc
    try:
        audit = AuditLog(os.path.join(state_dir, "audit.jsonl"))
    except AuditError as exc:
        raise StartupError(f"audit ledger unusable: {exc}") from exc
    canary = CanaryToken.load_or_create(os.path.join(state_dir, "canary.token"))
    ledger = BudgetLedger(cfg.t2_max_per_day, path=os.path.join(state_dir, "budget.json"))
    chronicle = Chronicle(state_dir)
    guardian = Guardian(
        state_dir=state_dir, workspace_root=root, home=home, policy_path=cfg.policy_file
    )
    if classifier_port is None and cfg.t1_classifier == "stub":
        classifier_port = StubClassifier(workspace_root=root)
    if eval_client is None:
        if cfg.t2_client == "mock":
            eval_client = MockEvalClient()
        elif cfg.t2_client == "http":
            eval_client = HttpEvalClient(cfg.t2_endpoint, cfg.t2_model, cfg.t2_api_key_env)

    def record_approval(event: str, body: dict) -> None:
        try:
            audit.append("approval_event", {"event": event, **body})
        except AuditError:
            pass  # verdict/tier appends enforce fail-closed; this is supplementary

    broker = ApprovalBroker(
        timeout_s=cfg.t3_timeout_s,
        max_pending=cfg.t3_max_pending,
        window_s=cfg.t3_window_s,
        recorder=record_approval,
    )
    ws_cfg = WorkspaceConfig(
        root=root,
        env=dict(cfg.workspace_env),
        aliases=dict(cfg.workspace_aliases),
        http_allowlist=tuple(cfg.http_allowlist),
        mode=cfg.mode,
    )
    executor = Executor(ws_cfg, state_dir=state_dir, ruleset=ruleset)
    path_ctx = PathContext(home=home, workspace_root=root)
    pipeline = Pipeline(
        guardian=guardian,
        policy=policy,
        catalog=catalog,
        classifier_port=classifier_port,
        gate_cfg=cfg.gate_config(),
        ledger=ledger,
        canary=canary,
        eval_client=eval_client,
        t2_timeout_s=cfg.t2_timeout_s,
        broker=broker,
        executor=executor,
        chronicle=chronicle,
        audit=audit,
        path_ctx=path_ctx,
        shield_enabled=cfg.shield_enabled,
        env=dict(cfg.workspace_env),
        aliases=dict(cfg.workspace_aliases),
    )
    console_path = os.path.join(state_dir, "console.token")
    if os.path.exists(console_path):
        with open(console_path, encoding="utf-8") as fh:
            console_credential = fh.read().strip()
    else:
        console_credential = secrets.token_hex(16)
        fd = os.open(console_path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o600)
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(console_credential)
    return Runtime(
        cfg=cfg,
        audit=audit,
        chronicle=chronicle,
        canary=canary,
        ledger=ledger,
        guardian=guardian,
        policy=policy,
        catalog=catalog,
        ruleset=ruleset,
        classifier_port=classifier_port,
        eval_client=eval_client,
        broker=broker,
        executor=executor,
        pipeline=pipeline,
        path_ctx=path_ctx,
        console_credential=console_credential,
    )


class _ProposerHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:  # one thread per connection
        runtime: Runtime = self.server.runtime  # type: ignore[attr-defined]
        conn = Connection(self.request)
        audit = runtime.audit

        def note(event: str, **body) -> None:
            try:
                audit.append("session_event", {"event": event, **body})
            except AuditError:
                pass

        try:
            try:
                hello = conn.recv()
            except WireError as exc:
                note("unauth_message", detail=str(exc))
                return
            if hello is None or hello.get("kind") != "hello":
                note("unauth_message", detail="first message was not hello")
                return
            session = runtime.session(
                str(hello.get("session_id", "")), str(hello.get("token", ""))
            )
            if session is None:
                note("auth_failure", session_id=str(hello.get("session_id", "")))
                try:
                    conn.send({"kind": "error", "reason": "auth_failure"})
                except OSError:
                    pass
                return
            note("hello_ok", session_id=session.session_id)
            conn.send({"kind": "hello", "ok": True, "session_id": session.session_id})

            while True:
                try:
                    msg = conn.recv()
                except WireError as exc:
                    conn.send(
                        {"kind": "error", "reason": "malformed_action", "detail": str(exc)}
                    )
                    note("malformed_action", session_id=session.session_id, detail=str(exc))
                    continue
                if msg is None:
                    break
                if msg.get("kind") != "propose_action":
                    note(
                        "unauth_message",
                        session_id=session.session_id,
                        detail=f"unexpected kind {msg.get('kind')!r}",
                    )
                    conn.send({"kind": "error", "reason": "malformed_action"})
                    continue
                try:
                    action = parse_action(
                        msg.get("action"),
                        session_id=session.session_id,
                        id_allocator=session.next_action_id,
                    )
                except MalformedAction as exc:
                    note("malformed_action", session_id=session.session_id, detail=str(exc))
                    conn.send(
                        {"kind": "error", "reason": "malformed_action", "detail": str(exc)}
                    )
                    continue
                with runtime.session_lock(session.session_id):
                    result = runtime.pipeline.process(session, action)
                reply = {"kind": "verdict", **result.verdict.to_wire()}
                conn.send(reply)
                if result.execution is not None:
                    conn.send(
                        {
                            "kind": "execution_result",
                            "action_id": action.id,
                            **result.execution.to_wire(),
                        }
                    )
        except (OSError, BrokenPipeError):
            pass
        finally:
            conn.close()


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class GatewayServer:
    """TCP front end around a Runtime; start()/shutdown() for embedding."""

    def __init__(self, runtime: Runtime, host: Optional[str] = None, port: Optional[int] = None):
        self.runtime = runtime
        bind_host = host if host is not None else runtime.cfg.host
        bind_port = port if port is not None else runtime.cfg.port
        self._server = _Server((bind_host, bind_port), _ProposerHandler)
        self._server.runtime = runtime  # type: ignore[attr-defined]
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def start(self) -> None:
        self._thread = threading.Thread(
            target=self._server.serve_forever, name="gateway", daemon=True
        )
        self._thread.start()

    def shutdown(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
        self.runtime.audit.close()
