"""Proposer wire protocol: newline-delimited JSON over loopback TCP.

The first message on a connection must be a hello carrying the session id
and its auth token; anything else is dropped and audited. After that the
proposer sends propose_action messages and receives a verdict message per
action, followed by an execution_result message when the verdict allowed.

Message kinds: hello, propose_action, verdict, execution_result,
approval_request, approval_response, error. The approval kinds travel on
the approval channels (console/CLI), not the proposer socket, but share
this vocabulary.
"""
from __future__ import annotations

import json
import socket
from typing import Optional

MESSAGE_KINDS = frozenset(
    {
        "hello",
        "propose_action",
        "verdict",
        "execution_result",
        "approval_request",
        "approval_response",
        "error",
    }
)

MAX_LINE_BYTES = 8 * 1024 * 1024


class WireError(Exception):
    pass


def encode(msg: dict) -> bytes:
    kind = msg.get("kind")
    if kind not in MESSAGE_KINDS:
        raise WireError(f"unknown message kind {kind!r}")
    return json.dumps(msg, ensure_ascii=False, separators=(",", ":")).encode("utf-8") + b"\n"


def decode(line: bytes) -> dict:
    if len(line) > MAX_LINE_BYTES:
        raise WireError("message too large")
    try:
        msg = json.loads(line.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise WireError(f"not valid JSON: {exc}") from exc
    if not isinstance(msg, dict) or msg.get("kind") not in MESSAGE_KINDS:
        raise WireError("missing or unknown message kind")
    return msg


class Connection:
    """A line-oriented JSON connection (either side)."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._rfile = sock.makefile("rb")

    def send(self, msg: dict) -> None:
        self.sock.sendall(encode(msg))

    def recv(self) -> Optional[dict]:
        line = self._rfile.readline(MAX_LINE_BYTES + 1)
        if not line:
            return None
        return decode(line.rstrip(b"\n"))

    def close(self) -> None:
        try:
            self._rfile.close()
        except OSError:
            pass
        try:
            self.sock.close()
        except OSError:
            pass


class ProposerClient:
    """Client side of the proposer protocol, used by the harness and tests."""

    def __init__(self, host: str, port: int, session_id: str, token: str, timeout: float = 30.0):
        sock = socket.create_connection((host, port), timeout=timeout)
        self.conn = Connection(sock)
        self.session_id = session_id
        self.conn.send({"kind": "hello", "session_id": session_id, "token": token})
        reply = self.conn.recv()
        if reply is None or reply.get("kind") != "hello" or not reply.get("ok"):
            self.conn.close()
            raise WireError(f"hello rejected: {reply!r}")

    def propose(
        self,
        action_type: str,
        target: str = "",
        payload: str = "",
        payload_b64: Optional[str] = None,
    ) -> tuple[dict, Optional[dict]]:
        """Returns (verdict message, execution_result message or None)."""
        action: dict = {"action_type": action_type, "target": target}
        if payload_b64 is not None:
            action["payload_b64"] = payload_b64
        else:
            action["payload"] = payload
        self.conn.send(
            {"kind": "propose_action", "session_id": self.session_id, "action": action}
        )
        reply = self.conn.recv()
        if reply is None:
            raise WireError("connection closed before verdict")
        if reply.get("kind") == "error":
            return reply, None
        if reply.get("kind") != "verdict":
            raise WireError(f"expected verdict, got {reply.get('kind')!r}")
        if reply.get("decision") == "ALLOW":
            execution = self.conn.recv()
            if execution is None or execution.get("kind") != "execution_result":
                raise WireError("missing execution_result after ALLOW")
            return reply, execution
        return reply, None

    def close(self) -> None:
        self.conn.close()
