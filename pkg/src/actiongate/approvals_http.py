"""HTTP listener for the browser approval console.

Serves three things on the gateway's HTTP port:

  GET  /approvals/pending   JSON snapshot of pending approval requests
  GET  /approvals           WebSocket upgrade: live approval events in,
                            approval responses out (first response wins)
  GET  /                    the static console page, when a built frontend
                            is available next to the package or configured

Every route requires the console channel credential (``Authorization:
Bearer <token>`` or ``?credential=<token>``); unauthenticated requests get
401 and, on the WebSocket path, no handshake at all. The credential lives
in <state>/console.token, which sits inside the guardian's FullBlock
subtree, so a mediated agent cannot read it.

The WebSocket side is a deliberately small RFC 6455 server: text frames
only, masked client frames, ping/pong, close. No extensions, no
fragmentation support beyond FIN-only frames — enough for a same-host
console page, nothing more.
"""
from __future__ import annotations

import base64
import hashlib
import hmac
import json
import os
import secrets
import socketserver
import struct
import threading
from http.server import BaseHTTPRequestHandler
from typing import Optional
from urllib.parse import parse_qs, urlsplit

from .approvals import ApprovalBroker, ApprovalState

_WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"

_OP_TEXT = 0x1
_OP_CLOSE = 0x8
_OP_PING = 0x9
_OP_PONG = 0xA


def _accept_key(client_key: str) -> str:
    digest = hashlib.sha1((client_key + _WS_GUID).encode("ascii")).digest()
    return base64.b64encode(digest).decode("ascii")


def read_frame(rfile) -> Optional[tuple[int, bytes]]:
    """Read one client frame; returns (opcode, payload) or None at EOF."""
    head = rfile.read(2)
    if len(head) < 2:
        return None
    b0, b1 = head
    opcode = b0 & 0x0F
    masked = bool(b1 & 0x80)
    length = b1 & 0x7F
    if length == 126:
        ext = rfile.read(2)
        if len(ext) < 2:
            return None
        (length,) = struct.unpack("!H", ext)
    elif length == 127:
        ext = rfile.read(8)
        if len(ext) < 8:
            return None
        (length,) = struct.unpack("!Q", ext)
    if length > 1 << 20:
        return None  # console messages are tiny; oversized means abuse
    mask = rfile.read(4) if masked else b""
    payload = rfile.read(length)
    if len(payload) < length:
        return None
    if masked:
        payload = bytes(c ^ mask[i % 4] for i, c in enumerate(payload))
    return opcode, payload


def make_frame(opcode: int, payload: bytes) -> bytes:
    head = bytes([0x80 | opcode])
    n = len(payload)
    if n < 126:
        head += bytes([n])
    elif n < 1 << 16:
        head += bytes([126]) + struct.pack("!H", n)
    else:
        head += bytes([127]) + struct.pack("!Q", n)
    return head + payload


def pending_view(broker: ApprovalBroker) -> list[dict]:
    views = []
    for req in sorted(broker.pending_requests(), key=lambda r: r.created_at):
        views.append(
            {
                "request_id": req.request_id,
                "state": req.state.value,
                "seconds_remaining": round(broker.remaining_s(req), 1),
                "summary": req.summary,
            }
        )
    return views


class _WsChannel:
    """One connected console WebSocket, registered as an approval channel."""

    kind = "websocket"

    def __init__(self, wfile, credential: str):
        self.channel_id = f"ws-{secrets.token_hex(4)}"
        self.credential = credential
        self.connected = True
        self._wfile = wfile
        self._lock = threading.Lock()

    def send_json(self, obj: dict) -> None:
        data = json.dumps(obj, ensure_ascii=False).encode("utf-8")
        with self._lock:
            self._wfile.write(make_frame(_OP_TEXT, data))
            self._wfile.flush()

    def deliver(self, event: dict) -> None:
        try:
            self.send_json(event)
        except OSError:
            self.connected = False
            raise


class ConsoleHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "actiongate-console"

    def log_message(self, fmt, *args):  # silence default stderr chatter
        pass

    # -- helpers -------------------------------------------------------

    @property
    def broker(self) -> ApprovalBroker:
        return self.server.broker  # type: ignore[attr-defined]

    @property
    def credential(self) -> str:
        return self.server.credential  # type: ignore[attr-defined]

    def _presented_credential(self) -> str:
        auth = self.headers.get("Authorization", "")
        if auth.startswith("Bearer "):
            return auth[len("Bearer "):].strip()
        query = parse_qs(urlsplit(self.path).query)
        vals = query.get("credential", [])
        return vals[0] if vals else ""

    def _authorized(self) -> bool:
        presented = self._presented_credential()
        return bool(presented) and hmac.compare_digest(presented, self.credential)

    def _deny(self) -> None:
        body = b'{"error": "auth_failure"}'
        self.send_response(401)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _json(self, obj: dict, status: int = 200) -> None:
        body = json.dumps(obj, ensure_ascii=False).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    # -- routes --------------------------------------------------------

    def do_GET(self) -> None:
        path = urlsplit(self.path).path
        if path == "/approvals/pending":
            if not self._authorized():
                self._deny()
                return
            self._json({"pending": pending_view(self.broker)})
        elif path == "/approvals":
            if "websocket" not in self.headers.get("Upgrade", "").lower():
                self._json({"error": "websocket endpoint"}, status=400)
                return
            if not self._authorized():
                self._deny()
                return
            self._serve_websocket()
        elif path in ("/", "/index.html"):
            self._serve_static("index.html", "text/html; charset=utf-8")
        elif path == "/app.js":
            self._serve_static("app.js", "text/javascript; charset=utf-8")
        else:
            self._json({"error": "not found"}, status=404)

    def _serve_static(self, name: str, ctype: str) -> None:
        root = self.server.static_dir  # type: ignore[attr-defined]
        data: Optional[bytes] = None
        if root:
            candidate = os.path.join(root, name)
            if os.path.isfile(candidate):
                with open(candidate, "rb") as fh:
                    data = fh.read()
        if data is None:
            if name == "index.html":
                data = (
                    b"<!doctype html><title>approval console</title>"
                    b"<p>No console bundle installed. "
                    b"Use GET /approvals/pending or the WebSocket endpoint.</p>"
                )
            else:
                self._json({"error": "not found"}, status=404)
                return
        self.send_response(200)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    # -- websocket -----------------------------------------------------

    def _serve_websocket(self) -> None:
        key = self.headers.get("Sec-WebSocket-Key")
        if not key:
            self._json({"error": "missing Sec-WebSocket-Key"}, status=400)
            return
        self.send_response(101, "Switching Protocols")
        self.send_header("Upgrade", "websocket")
        self.send_header("Connection", "Upgrade")
        self.send_header("Sec-WebSocket-Accept", _accept_key(key))
        self.end_headers()
        self.close_connection = True

        channel = _WsChannel(self.wfile, self.credential)
        self.broker.register_channel(channel)
        try:
            channel.send_json({"kind": "snapshot", "pending": pending_view(self.broker)})
            while True:
                frame = read_frame(self.rfile)
                if frame is None:
                    break
                opcode, payload = frame
                if opcode == _OP_CLOSE:
                    try:
                        self.wfile.write(make_frame(_OP_CLOSE, b""))
                        self.wfile.flush()
                    except OSError:
                        pass
                    break
                if opcode == _OP_PING:
                    self.wfile.write(make_frame(_OP_PONG, payload))
                    self.wfile.flush()
                    continue
                if opcode != _OP_TEXT:
                    continue
                self._handle_client_message(channel, payload)
        except OSError:
            pass
        finally:
            channel.connected = False
            self.broker.unregister_channel(channel.channel_id)

    def _handle_client_message(self, channel: _WsChannel, payload: bytes) -> None:
        try:
            msg = json.loads(payload.decode("utf-8"))
            kind = msg.get("kind")
        except (ValueError, AttributeError):
            channel.send_json({"kind": "error", "reason": "malformed message"})
            return
        if kind == "approval_response":
            request_id = str(msg.get("request_id", ""))
            decision = msg.get("decision")
            if decision not in ("APPROVE", "DENY"):
                channel.send_json({"kind": "error", "reason": "decision must be APPROVE or DENY"})
                return
            accepted = self.broker.submit_response(
                request_id, channel.channel_id, channel.credential, decision == "APPROVE"
            )
            req = self.broker.get_request(request_id)
            if req is None:
                state = "UNKNOWN"
            elif not accepted and req.state is not ApprovalState.PENDING:
                state = req.state.value if req.state is ApprovalState.EXPIRED else "RESOLVED_ELSEWHERE"
            else:
                state = req.state.value
            channel.send_json(
                {
                    "kind": "approval_response",
                    "request_id": request_id,
                    "accepted": accepted,
                    "state": state,
                }
            )
        elif kind == "ping":
            channel.send_json({"kind": "pong"})
        else:
            channel.send_json({"kind": "error", "reason": f"unknown kind {kind!r}"})


class _HttpServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class ConsoleServer:
    """The gateway's approval-console listener; start()/shutdown() to embed."""

    def __init__(
        self,
        broker: ApprovalBroker,
        credential: str,
        host: str = "127.0.0.1",
        port: int = 0,
        static_dir: Optional[str] = None,
    ):
        self._server = _HttpServer((host, port), ConsoleHandler)
        self._server.broker = broker  # type: ignore[attr-defined]
        self._server.credential = credential  # type: ignore[attr-defined]
        self._server.static_dir = static_dir  # type: ignore[attr-defined]
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def start(self) -> None:
        self._thread = threading.Thread(
            target=self._server.serve_forever, name="console-http", daemon=True
        )
        self._thread.start()

    def shutdown(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
