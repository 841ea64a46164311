"""Tier 3: human approval broker.

Escalated actions are broadcast to every connected channel; the first valid
response wins and later ones are recorded as late. No response within the
deadline expires the request, and expiry means deny. A small rate limiter
auto-denies excess concurrent requests so a compromised proposer cannot
manufacture approval fatigue.

Responses must quote the request_id and the responding channel's credential;
anything else is discarded, so approvals cannot be forged over the proposer
wire.
"""
from __future__ import annotations

import hmac
import secrets
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Protocol

from .model import Action

DEFAULT_TIMEOUT_S = 300.0
DEFAULT_MAX_PENDING = 5
DEFAULT_WINDOW_S = 600.0
PAYLOAD_EXCERPT_BYTES = 2048

Recorder = Callable[[str, dict], None]   # (event kind detail, body) -> audited by caller


class ApprovalState(Enum):
    PENDING = "PENDING"
    APPROVED = "APPROVED"
    DENIED = "DENIED"
    EXPIRED = "EXPIRED"


class ApprovalChannel(Protocol):
    channel_id: str
    kind: str            # cli | websocket | harness_simulated
    credential: str
    connected: bool

    def deliver(self, event: dict) -> None: ...


@dataclass
class ApprovalRequest:
    request_id: str
    session_id: str
    summary: dict
    created_at: float
    timeout_s: float
    state: ApprovalState = ApprovalState.PENDING
    resolved_by: Optional[str] = None
    note: str = ""
    _done: threading.Event = field(default_factory=threading.Event, repr=False)


def summarize(action: Action, trail: list[dict], taint: list[str]) -> dict:
    excerpt = action.payload_text
    truncated = False
    if len(excerpt.encode("utf-8")) > PAYLOAD_EXCERPT_BYTES:
        raw = excerpt.encode("utf-8")[:PAYLOAD_EXCERPT_BYTES]
        excerpt = raw.decode("utf-8", "ignore") + " …[truncated]"
        truncated = True
    return {
        "action_id": action.id,
        "action_type": action.action_type.value,
        "target": action.target,
        "payload_excerpt": excerpt,
        "payload_truncated": truncated,
        "taint": sorted(taint),
        "trail": trail,
    }


class ApprovalBroker:
    def __init__(
        self,
        timeout_s: float = DEFAULT_TIMEOUT_S,
        max_pending: int = DEFAULT_MAX_PENDING,
        window_s: float = DEFAULT_WINDOW_S,
        recorder: Optional[Recorder] = None,
        clock: Callable[[], float] = time.monotonic,
    ):
        self.timeout_s = timeout_s
        self.max_pending = max_pending
        self.window_s = window_s
        self._recorder = recorder or (lambda kind, body: None)
        self._clock = clock
        self._lock = threading.Lock()
        self._channels: dict[str, ApprovalChannel] = {}
        self._requests: dict[str, ApprovalRequest] = {}

    # -- channels ------------------------------------------------------

    def register_channel(self, channel: ApprovalChannel) -> None:
        with self._lock:
            self._channels[channel.channel_id] = channel

    def unregister_channel(self, channel_id: str) -> None:
        with self._lock:
            self._channels.pop(channel_id, None)

    def connected_channels(self) -> list[ApprovalChannel]:
        with self._lock:
            return [c for c in self._channels.values() if c.connected]

    def pending_requests(self) -> list[ApprovalRequest]:
        with self._lock:
            return [r for r in self._requests.values() if r.state is ApprovalState.PENDING]

    def remaining_s(self, req: ApprovalRequest) -> float:
        """Seconds until this request times out (0 once expired)."""
        return max(0.0, req.created_at + req.timeout_s - self._clock())

    def get_request(self, request_id: str) -> Optional[ApprovalRequest]:
        with self._lock:
            return self._requests.get(request_id)

    # -- main flow -----------------------------------------------------

    def request_approval(
        self,
        action: Action,
        trail: list[dict],
        taint: Optional[list[str]] = None,
        timeout_s: Optional[float] = None,
    ) -> ApprovalRequest:
        timeout = self.timeout_s if timeout_s is None else timeout_s
        now = self._clock()
        req = ApprovalRequest(
            request_id=secrets.token_hex(8),
            session_id=action.session_id,
            summary=summarize(action, trail, list(taint or ())),
            created_at=now,
            timeout_s=timeout,
        )
        with self._lock:
            live = [
                r
                for r in self._requests.values()
                if r.state is ApprovalState.PENDING and now - r.created_at <= self.window_s
            ]
            if len(live) >= self.max_pending:
                req.state = ApprovalState.DENIED
                req.note = "approval_rate_limit"
                self._requests[req.request_id] = req
                self._recorder(
                    "rate_limited",
                    {"request_id": req.request_id, "pending": len(live)},
                )
                return req
            self._requests[req.request_id] = req
            channels = [c for c in self._channels.values() if c.connected]

        self._recorder("created", {"request_id": req.request_id, "summary": req.summary})
        if not channels:
            self._recorder("no_channels", {"request_id": req.request_id})
        event = {
            "kind": "approval_request",
            "request_id": req.request_id,
            "created_at": req.created_at,
            "timeout_s": req.timeout_s,
            "summary": req.summary,
        }
        for ch in channels:
            try:
                ch.deliver(dict(event))
                self._recorder(
                    "delivered", {"request_id": req.request_id, "channel": ch.channel_id}
                )
            except Exception as exc:
                self._recorder(
                    "delivery_failed",
                    {"request_id": req.request_id, "channel": ch.channel_id, "error": str(exc)},
                )

        req._done.wait(timeout)
        with self._lock:
            if req.state is ApprovalState.PENDING:
                req.state = ApprovalState.EXPIRED
                req.note = "no response before deadline"
                req._done.set()
        self._recorder(
            "resolved",
            {
                "request_id": req.request_id,
                "state": req.state.value,
                "resolved_by": req.resolved_by,
            },
        )
        return req

    def submit_response(
        self, request_id: str, channel_id: str, credential: str, approve: bool, note: str = ""
    ) -> bool:
        """First valid response wins; returns whether this one counted."""
        with self._lock:
            req = self._requests.get(request_id)
            ch = self._channels.get(channel_id)
            if req is None or ch is None:
                self._recorder(
                    "response_rejected",
                    {"request_id": request_id, "channel": channel_id, "why": "unknown id"},
                )
                return False
            if not hmac.compare_digest(ch.credential, credential):
                self._recorder(
                    "response_rejected",
                    {"request_id": request_id, "channel": channel_id, "why": "bad credential"},
                )
                return False
            if req.state is not ApprovalState.PENDING:
                self._recorder(
                    "late_response",
                    {"request_id": request_id, "channel": channel_id, "approve": approve},
                )
                return False
            req.state = ApprovalState.APPROVED if approve else ApprovalState.DENIED
            req.resolved_by = channel_id
            req.note = note
            req._done.set()
            return True


@dataclass
class SimulatedChannel:
    """Scripted responder used by the evaluation harness.

    decide(event) returns True/False/None (approve, deny, ignore). Responses
    are submitted from a worker thread to mimic a real asynchronous human.
    """

    broker: "ApprovalBroker"
    decide: Callable[[dict], Optional[bool]]
    channel_id: str = "sim"
    kind: str = "harness_simulated"
    credential: str = field(default_factory=lambda: secrets.token_hex(16))
    connected: bool = True
    delay_s: float = 0.0

    def deliver(self, event: dict) -> None:
        verdict = self.decide(event)
        if verdict is None:
            return

        def respond() -> None:
            if self.delay_s:
                time.sleep(self.delay_s)
            self.broker.submit_response(
                event["request_id"], self.channel_id, self.credential, verdict
            )

        threading.Thread(target=respond, daemon=True).start()
