"""Typed executors with workspace containment and a RECORD_ONLY mode.

LIVE mode performs real effects: atomic file writes (temp + rename),
subprocess commands under a scrubbed environment, HTTP restricted to an
allowlist, and outbound email/messages written to an outbox directory under
the state dir rather than actually sent.

RECORD_ONLY is the evaluation mode: every action reports SIMULATED and no
effect touches disk, with one deliberate exception — reads really read, so
origin classification and taint propagation behave exactly as in LIVE. A
missing file in RECORD_ONLY simulates an empty read instead of failing;
simulation never reports FAILED.

Executors refuse any action that does not arrive with a matching ALLOW
verdict; the verdict object is the capability.
"""
from __future__ import annotations

import json
import os
import re
import shutil
import subprocess
import urllib.request
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional
from urllib.parse import urlparse

from .guardian import shell_write_targets
from .ifc import RuleSet, TaintMap, classify_origin
from .model import Action, ActionType, Decision, Verdict, now_ms

MAX_READ_BYTES = 4 * 1024 * 1024
COMMAND_TIMEOUT_S = 30


class Mode(Enum):
    LIVE = "live"
    RECORD_ONLY = "record_only"


class ExecStatus(Enum):
    EXECUTED = "EXECUTED"
    SIMULATED = "SIMULATED"
    FAILED = "FAILED"


@dataclass(frozen=True)
class WorkspaceConfig:
    root: str
    env: dict[str, str] = field(default_factory=dict)
    aliases: dict[str, str] = field(default_factory=dict)
    http_allowlist: tuple[str, ...] = ()
    mode: Mode = Mode.LIVE


@dataclass(frozen=True)
class ExecResult:
    status: ExecStatus
    output: str = ""
    error: str = ""
    effects: dict = field(default_factory=dict)

    def to_wire(self) -> dict:
        return {
            "status": self.status.value,
            "output": self.output,
            "error": self.error,
            "effects": self.effects,
        }


def resolve_in_root(root: str, target: str) -> Optional[str]:
    """Absolute path for target if it stays inside root after resolution."""
    t = (target or "").strip().replace("\\", "/")
    if t.startswith("~"):
        return None
    if not os.path.isabs(t):
        t = os.path.join(root, t)
    t = os.path.normpath(t)
    real_root = os.path.realpath(root)
    # resolve the deepest existing ancestor so symlinks cannot escape
    probe = t
    while not os.path.exists(probe):
        parent = os.path.dirname(probe)
        if parent == probe:
            break
        probe = parent
    resolved_probe = os.path.realpath(probe)
    resolved = os.path.normpath(os.path.join(resolved_probe, os.path.relpath(t, probe)))
    if resolved == real_root or resolved.startswith(real_root + os.sep):
        return resolved
    return None


def destruction_targets(action: Action, root: str) -> list[str]:
    """Existing paths this action would overwrite or remove (pre-snapshot set)."""
    out: list[str] = []

    def add(path: Optional[str]) -> None:
        if path and os.path.lexists(path):
            out.append(path)

    at = action.action_type
    if at is ActionType.WRITE_FILE or at is ActionType.DELETE_FILE:
        add(resolve_in_root(root, action.target))
    elif at is ActionType.MOVE_FILE:
        add(resolve_in_root(root, action.target))
        dest = resolve_in_root(root, action.payload_text.strip())
        if dest and os.path.isdir(dest):
            dest = os.path.join(dest, os.path.basename(action.target))
        add(dest)
    elif at is ActionType.COPY_FILE:
        dest = resolve_in_root(root, action.payload_text.strip())
        if dest and os.path.isdir(dest):
            dest = os.path.join(dest, os.path.basename(action.target))
        add(dest)
    elif at is ActionType.EXECUTE_COMMAND:
        for t in shell_write_targets(action.payload_text):
            add(resolve_in_root(root, t))
    return out


class Executor:
    def __init__(
        self,
        cfg: WorkspaceConfig,
        state_dir: str,
        ruleset: Optional[RuleSet] = None,
    ):
        self.cfg = cfg
        self.state_dir = state_dir
        self.ruleset = ruleset
        self.outbox = os.path.join(state_dir, "outbox")

    # -- helpers -------------------------------------------------------

    def _record(self, effects: dict, output: str = "") -> ExecResult:
        return ExecResult(ExecStatus.SIMULATED, output=output, effects=effects)

    def _classify_and_taint(self, target: str, content: bytes, taint: Optional[TaintMap]) -> str:
        if self.ruleset is None or taint is None or not content:
            return "PUBLIC"
        label = classify_origin(target, content, self.ruleset)
        taint.propagate(content, label)
        return label.label

    def read_for_flow(self, action: Action) -> bytes:
        """Bytes that would flow for this action (source content for
        move/copy, payload otherwise)."""
        if action.action_type in (ActionType.MOVE_FILE, ActionType.COPY_FILE):
            path = resolve_in_root(self.cfg.root, action.target)
            if path and os.path.isfile(path):
                try:
                    with open(path, "rb") as fh:
                        return fh.read(MAX_READ_BYTES)
                except OSError:
                    return b""
            return b""
        return action.payload

    def _scrubbed_env(self) -> dict[str, str]:
        env = {"PATH": "/usr/bin:/bin", "HOME": self.cfg.root, "LANG": "C.UTF-8"}
        env.update(self.cfg.env)
        return env

    # -- dispatch ------------------------------------------------------

    def execute(
        self,
        action: Action,
        verdict: Verdict,
        taint: Optional[TaintMap] = None,
    ) -> ExecResult:
        if verdict.decision is not Decision.ALLOW or verdict.action_id != action.id:
            return ExecResult(
                ExecStatus.FAILED, error="refused: no matching ALLOW verdict"
            )
        handler = {
            ActionType.READ_FILE: self._read_file,
            ActionType.WRITE_FILE: self._write_file,
            ActionType.DELETE_FILE: self._delete_file,
            ActionType.MOVE_FILE: self._move_file,
            ActionType.COPY_FILE: self._copy_file,
            ActionType.LIST_DIRECTORY: self._list_directory,
            ActionType.SEARCH_FILES: self._search_files,
            ActionType.EXECUTE_COMMAND: self._execute_command,
            ActionType.HTTP_REQUEST: self._http_request,
            ActionType.SEND_EMAIL: self._send_outbound,
            ActionType.SEND_MESSAGE: self._send_outbound,
        }[action.action_type]
        try:
            return handler(action, taint)
        except Exception as exc:  # executor bugs surface as FAILED, never crash the gateway
            if self.cfg.mode is Mode.RECORD_ONLY:
                return self._record({"error_suppressed": str(exc)})
            return ExecResult(ExecStatus.FAILED, error=str(exc))

    # -- reads ---------------------------------------------------------

    def _read_file(self, action: Action, taint: Optional[TaintMap]) -> ExecResult:
        path = resolve_in_root(self.cfg.root, action.target)
        simulated = self.cfg.mode is Mode.RECORD_ONLY
        if path is None or not os.path.isfile(path):
            if simulated:
                return self._record({"read": action.target, "exists": False})
            return ExecResult(ExecStatus.FAILED, error=f"not a readable file: {action.target}")
        with open(path, "rb") as fh:
            content = fh.read(MAX_READ_BYTES)
        label = self._classify_and_taint(action.target, content, taint)
        text = content.decode("utf-8", "replace")
        effects = {"read": action.target, "bytes": len(content), "label": label}
        if simulated:
            return self._record(effects, output=text)
        return ExecResult(ExecStatus.EXECUTED, output=text, effects=effects)

    def _list_directory(self, action: Action, taint: Optional[TaintMap]) -> ExecResult:
        path = resolve_in_root(self.cfg.root, action.target or ".")
        simulated = self.cfg.mode is Mode.RECORD_ONLY
        if path is None or not os.path.isdir(path):
            if simulated:
                return self._record({"list": action.target, "exists": False})
            return ExecResult(ExecStatus.FAILED, error=f"not a directory: {action.target}")
        names = sorted(os.listdir(path))
        out = "\n".join(names)
        effects = {"list": action.target, "entries": len(names)}
        if simulated:
            return self._record(effects, output=out)
        return ExecResult(ExecStatus.EXECUTED, output=out, effects=effects)

    def _search_files(self, action: Action, taint: Optional[TaintMap]) -> ExecResult:
        base = resolve_in_root(self.cfg.root, action.target or ".")
        simulated = self.cfg.mode is Mode.RECORD_ONLY
        pattern = action.payload_text or ""
        try:
            rx = re.compile(pattern)
        except re.error as exc:
            if simulated:
                return self._record({"search": pattern, "error": str(exc)})
            return ExecResult(ExecStatus.FAILED, error=f"bad pattern: {exc}")
        if base is None or not os.path.isdir(base):
            if simulated:
                return self._record({"search": pattern, "exists": False})
            return ExecResult(ExecStatus.FAILED, error=f"not a directory: {action.target}")
        matches: list[str] = []
        for root, dirs, files in os.walk(base):
            dirs.sort()
            for name in sorted(files):
                full = os.path.join(root, name)
                try:
                    if os.path.getsize(full) > MAX_READ_BYTES:
                        continue
                    with open(full, encoding="utf-8", errors="replace") as fh:
                        for lineno, line in enumerate(fh, 1):
                            if rx.search(line):
                                rel = os.path.relpath(full, self.cfg.root)
                                matches.append(f"{rel}:{lineno}:{line.rstrip()}")
                except OSError:
                    continue
        out = "\n".join(matches[:500])
        effects = {"search": pattern, "matches": len(matches)}
        if simulated:
            return self._record(effects, output=out)
        return ExecResult(ExecStatus.EXECUTED, output=out, effects=effects)

    # -- writes --------------------------------------------------------

    def _write_file(self, action: Action, taint: Optional[TaintMap]) -> ExecResult:
        if self.cfg.mode is Mode.RECORD_ONLY:
            return self._record(
                {"write": action.target, "bytes": len(action.payload)},
                output=f"would write {len(action.payload)} bytes to {action.target}",
            )
        path = resolve_in_root(self.cfg.root, action.target)
        if path is None:
            return ExecResult(ExecStatus.FAILED, error=f"outside workspace: {action.target}")
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        tmp = path + ".gatetmp"
        with open(tmp, "wb") as fh:
            fh.write(action.payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
        return ExecResult(
            ExecStatus.EXECUTED,
            output=f"wrote {len(action.payload)} bytes",
            effects={"write": action.target, "bytes": len(action.payload)},
        )

    def _delete_file(self, action: Action, taint: Optional[TaintMap]) -> ExecResult:
        if self.cfg.mode is Mode.RECORD_ONLY:
            return self._record({"delete": action.target})
        path = resolve_in_root(self.cfg.root, action.target)
        if path is None:
            return ExecResult(ExecStatus.FAILED, error=f"outside workspace: {action.target}")
        if os.path.isdir(path) and not os.path.islink(path):
            shutil.rmtree(path)
        elif os.path.lexists(path):
            os.unlink(path)
        else:
            return ExecResult(ExecStatus.FAILED, error=f"nothing to delete: {action.target}")
        return ExecResult(
            ExecStatus.EXECUTED, output="deleted", effects={"delete": action.target}
        )

    def _move_file(self, action: Action, taint: Optional[TaintMap]) -> ExecResult:
        dest_raw = action.payload_text.strip()
        if self.cfg.mode is Mode.RECORD_ONLY:
            return self._record({"move": action.target, "to": dest_raw})
        src = resolve_in_root(self.cfg.root, action.target)
        dest = resolve_in_root(self.cfg.root, dest_raw)
        if src is None or dest is None:
            return ExecResult(ExecStatus.FAILED, error="outside workspace")
        if not os.path.lexists(src):
            return ExecResult(ExecStatus.FAILED, error=f"no such file: {action.target}")
        os.makedirs(os.path.dirname(dest) or ".", exist_ok=True)
        shutil.move(src, dest)
        return ExecResult(
            ExecStatus.EXECUTED, output="moved", effects={"move": action.target, "to": dest_raw}
        )

    def _copy_file(self, action: Action, taint: Optional[TaintMap]) -> ExecResult:
        dest_raw = action.payload_text.strip()
        if self.cfg.mode is Mode.RECORD_ONLY:
            return self._record({"copy": action.target, "to": dest_raw})
        src = resolve_in_root(self.cfg.root, action.target)
        dest = resolve_in_root(self.cfg.root, dest_raw)
        if src is None or dest is None:
            return ExecResult(ExecStatus.FAILED, error="outside workspace")
        if not os.path.isfile(src):
            return ExecResult(ExecStatus.FAILED, error=f"no such file: {action.target}")
        if os.path.isdir(dest):
            dest = os.path.join(dest, os.path.basename(src))
        os.makedirs(os.path.dirname(dest) or ".", exist_ok=True)
        shutil.copy2(src, dest)
        return ExecResult(
            ExecStatus.EXECUTED, output="copied", effects={"copy": action.target, "to": dest_raw}
        )

    # -- commands and network -------------------------------------------

    def _execute_command(self, action: Action, taint: Optional[TaintMap]) -> ExecResult:
        cmd = action.payload_text
        if self.cfg.mode is Mode.RECORD_ONLY:
            return self._record(
                {"command": cmd, "cwd": self.cfg.root},
                output=f"would run: {cmd}",
            )
        proc = subprocess.run(
            ["/bin/sh", "-c", cmd],
            cwd=self.cfg.root,
            env=self._scrubbed_env(),
            capture_output=True,
            text=True,
            timeout=COMMAND_TIMEOUT_S,
        )
        status = ExecStatus.EXECUTED if proc.returncode == 0 else ExecStatus.FAILED
        return ExecResult(
            status,
            output=proc.stdout,
            error=proc.stderr if proc.returncode else "",
            effects={"command": cmd, "returncode": proc.returncode},
        )

    def _http_request(self, action: Action, taint: Optional[TaintMap]) -> ExecResult:
        url = action.target
        host = urlparse(url).hostname or ""
        if self.cfg.mode is Mode.RECORD_ONLY:
            return self._record(
                {"http": url, "host": host, "bytes": len(action.payload)},
                output=f"would request {url}",
            )
        if host not in self.cfg.http_allowlist:
            return ExecResult(
                ExecStatus.FAILED, error=f"host not allowlisted: {host or '<none>'}"
            )
        data = action.payload if action.payload else None
        req = urllib.request.Request(url, data=data)
        with urllib.request.urlopen(req, timeout=COMMAND_TIMEOUT_S) as resp:
            body = resp.read(MAX_READ_BYTES).decode("utf-8", "replace")
        return ExecResult(
            ExecStatus.EXECUTED, output=body, effects={"http": url, "status": 200}
        )

    def _send_outbound(self, action: Action, taint: Optional[TaintMap]) -> ExecResult:
        kind = action.action_type.value
        record = {
            "kind": kind,
            "to": action.target,
            "body": action.payload_text,
            "ts": now_ms(),
        }
        if self.cfg.mode is Mode.RECORD_ONLY:
            return self._record({"outbound": kind, "to": action.target})
        os.makedirs(self.outbox, exist_ok=True)
        name = f"{kind}-{now_ms()}-{abs(hash(action.id)) % 99999}.json"
        path = os.path.join(self.outbox, name)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(record, fh, indent=2)
        return ExecResult(
            ExecStatus.EXECUTED,
            output=f"queued {kind} to {action.target}",
            effects={"outbound": kind, "to": action.target, "outbox": name},
        )
