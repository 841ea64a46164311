"""Shared vocabulary: actions, tiers, verdicts, sessions.

Everything here is an immutable value object. Mutation of per-session state
(the taint map) happens elsewhere, under the gateway's session serialization.
"""
from __future__ import annotations

import base64
import secrets
import time
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from typing import Any, Optional


class ActionType(str, Enum):
    READ_FILE = "read_file"
    WRITE_FILE = "write_file"
    DELETE_FILE = "delete_file"
    MOVE_FILE = "move_file"
    COPY_FILE = "copy_file"
    LIST_DIRECTORY = "list_directory"
    SEARCH_FILES = "search_files"
    EXECUTE_COMMAND = "execute_command"
    HTTP_REQUEST = "http_request"
    SEND_EMAIL = "send_email"
    SEND_MESSAGE = "send_message"


# Action types that destroy or overwrite state at their resolved target.
# move_file destroys its source; copy_file can overwrite its destination.
WRITE_CLASS = frozenset(
    {
        ActionType.WRITE_FILE,
        ActionType.DELETE_FILE,
        ActionType.MOVE_FILE,
        ActionType.COPY_FILE,
    }
)

READ_CLASS = frozenset(
    {ActionType.READ_FILE, ActionType.LIST_DIRECTORY, ActionType.SEARCH_FILES}
)

NETWORK_CLASS = frozenset(
    {ActionType.HTTP_REQUEST, ActionType.SEND_EMAIL, ActionType.SEND_MESSAGE}
)


class TierId(IntEnum):
    """Escalation order; an action never moves to a lower tier."""

    GUARDIAN = 0
    T0 = 1
    T1 = 2
    T2 = 3
    T3 = 4

    @property
    def label(self) -> str:
        return self.name


class Decision(str, Enum):
    ALLOW = "ALLOW"
    BLOCK = "BLOCK"


class MalformedAction(ValueError):
    """Raised when a raw record cannot become an Action. Callers must BLOCK."""


@dataclass(frozen=True)
class Action:
    id: str
    session_id: str
    action_type: ActionType
    target: str
    payload: bytes
    taint: frozenset = frozenset()
    proposed_at: int = 0  # ms since epoch, assigned at gateway receipt

    @property
    def payload_text(self) -> str:
        return self.payload.decode("utf-8", errors="replace")

    def with_taint(self, labels) -> "Action":
        return replace(self, taint=frozenset(labels))


@dataclass(frozen=True)
class Verdict:
    action_id: str
    decision: Decision
    resolving_tier: TierId
    reason: str
    detail: str = ""
    latency_ms: dict = field(default_factory=dict)

    def to_wire(self) -> dict:
        return {
            "action_id": self.action_id,
            "decision": self.decision.value,
            "resolving_tier": self.resolving_tier.label,
            "reason": self.reason,
            "detail": self.detail,
            "latency_ms": dict(self.latency_ms),
        }


@dataclass
class Session:
    session_id: str
    auth_token: str
    taint_map: Any  # ifc.TaintMap; typed loosely to avoid an import cycle
    created_at: int
    _next_action_seq: int = 0

    def next_action_id(self) -> str:
        self._next_action_seq += 1
        return f"{self.session_id}-{self._next_action_seq:04d}"


def new_auth_token() -> str:
    """128-bit random secret, hex encoded."""
    return secrets.token_hex(16)


def now_ms() -> int:
    return int(time.time() * 1000)


def parse_action(
    raw: dict,
    session_id: str = "",
    id_allocator=None,
) -> Action:
    """Validate a raw structured record into an Action with empty taint.

    Raises MalformedAction for unknown action types or missing fields;
    the caller is expected to turn that into a BLOCK (fail closed).
    """
    if not isinstance(raw, dict):
        raise MalformedAction("action record must be a mapping")
    try:
        type_name = raw["action_type"]
    except (KeyError, TypeError):
        raise MalformedAction("missing action_type") from None
    try:
        action_type = ActionType(type_name)
    except ValueError:
        raise MalformedAction(f"unknown action_type: {type_name!r}") from None

    target = raw.get("target", "")
    if target is None:
        target = ""
    if not isinstance(target, str):
        raise MalformedAction("target must be a string")

    if "payload_b64" in raw:
        try:
            payload = base64.b64decode(raw["payload_b64"], validate=True)
        except Exception:
            raise MalformedAction("payload_b64 is not valid base64") from None
    else:
        payload = raw.get("payload", "")
        if payload is None:
            payload = ""
        if isinstance(payload, str):
            payload = payload.encode("utf-8")
        elif not isinstance(payload, (bytes, bytearray)):
            raise MalformedAction("payload must be a string")
        payload = bytes(payload)

    action_id = raw.get("id") or ""
    if not action_id:
        action_id = id_allocator() if id_allocator else f"a-{secrets.token_hex(6)}"
    if not isinstance(action_id, str):
        raise MalformedAction("id must be a string")

    return Action(
        id=action_id,
        session_id=session_id or raw.get("session_id", ""),
        action_type=action_type,
        target=target,
        payload=payload,
        taint=frozenset(),
        proposed_at=now_ms(),
    )


def serialize_action(action: Action) -> dict:
    """Wire form of an Action; round-trips through parse_action."""
    record: dict = {
        "id": action.id,
        "action_type": action.action_type.value,
        "target": action.target,
    }
    try:
        record["payload"] = action.payload.decode("utf-8")
    except UnicodeDecodeError:
        record["payload_b64"] = base64.b64encode(action.payload).decode("ascii")
    return record
