"""Tier 1 gate: heuristic engine and injection classifier voting, BLOCK wins.

The classifier is a port. Production deployments plug in a real model or an
external command; tests and the default build use StubClassifier, a
deterministic keyword/entropy scorer whose behavior is fully documented in
its docstring. The gate only depends on the port contract:
classify(action_type, target, payload) -> ClassifierVerdict.

Gate outcomes:
  * any heuristic match                        -> BLOCK (classifier irrelevant)
  * action type in bypass_types                -> classifier skipped, ESCALATE_T2
  * INJECTION at/above threshold               -> BLOCK
  * INJECTION below threshold                  -> ESCALATE_T2
  * SAFE (with heuristic NO_MATCH)             -> PASS
  * classifier missing/erroring                -> ESCALATE_T2 (never a silent pass)
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Protocol

from .model import ActionType
from .heuristics import Catalog, ExpandedAction, match_heuristics


class Label(Enum):
    INJECTION = "INJECTION"
    SAFE = "SAFE"


@dataclass(frozen=True)
class ClassifierVerdict:
    label: Label
    confidence: float
    signals: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence out of range")


class ClassifierPort(Protocol):
    available: bool

    def classify(self, action_type: ActionType, target: str, payload: str) -> ClassifierVerdict: ...


DEFAULT_BYPASS_TYPES = frozenset(
    {
        ActionType.WRITE_FILE,
        ActionType.DELETE_FILE,
        ActionType.MOVE_FILE,
        ActionType.SEND_EMAIL,
        ActionType.SEND_MESSAGE,
        ActionType.HTTP_REQUEST,
        ActionType.COPY_FILE,
    }
)


@dataclass(frozen=True)
class GateConfig:
    threshold: float = 0.85
    bypass_types: frozenset[ActionType] = DEFAULT_BYPASS_TYPES

    def __post_init__(self) -> None:
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError("threshold must be in (0, 1]")


class T1Kind(Enum):
    BLOCK = "block"
    PASS = "pass"
    ESCALATE_T2 = "escalate_t2"


@dataclass(frozen=True)
class T1Result:
    kind: T1Kind
    reason: str = ""
    detail: str = ""
    heuristic_hits: tuple[str, ...] = ()


def evaluate_t1(
    expanded: ExpandedAction,
    catalog: Catalog,
    port: Optional[ClassifierPort],
    cfg: GateConfig,
) -> T1Result:
    hits = tuple(match_heuristics(catalog, expanded))
    if hits:
        return T1Result(
            T1Kind.BLOCK,
            reason=hits[0],
            detail="heuristic rules matched: " + ", ".join(hits),
            heuristic_hits=hits,
        )
    if expanded.action_type in cfg.bypass_types:
        return T1Result(T1Kind.ESCALATE_T2, reason="bypass_type")
    if port is None or not getattr(port, "available", False):
        return T1Result(T1Kind.ESCALATE_T2, reason="classifier_unavailable")
    try:
        verdict = port.classify(expanded.action_type, expanded.target, expanded.payload)
    except Exception as exc:  # any classifier fault fails toward stricter review
        return T1Result(
            T1Kind.ESCALATE_T2, reason="classifier_unavailable", detail=str(exc)
        )
    if verdict.label is Label.INJECTION:
        if verdict.confidence >= cfg.threshold:
            return T1Result(
                T1Kind.BLOCK,
                reason="classifier_threshold",
                detail=f"injection confidence {verdict.confidence:.2f}"
                + (" [" + ", ".join(verdict.signals) + "]" if verdict.signals else ""),
            )
        return T1Result(
            T1Kind.ESCALATE_T2,
            reason="low_confidence",
            detail=f"injection confidence {verdict.confidence:.2f} below threshold",
        )
    return T1Result(T1Kind.PASS)


# --- stub classifier ---------------------------------------------------

_STRONG = (
    "ignore previous instructions",
    "ignore all previous",
    "disregard your instructions",
    "exfiltrat",
    "attacker",
    "keylogger",
    "reverse shell",
    "/etc/shadow",
    "id_rsa",
    "private key",
    "-----begin",
    "base64 -d",
    "/dev/tcp/",
    "rm -rf",
    "chmod 4",
    "sudo ",
    "curl http://",
    "wget http://",
)
_MEDIUM = (
    "secret",
    "credential",
    "password",
    "passwd",
    "api_key",
    "apikey",
    "bearer ",
    ".ssh",
    ".env",
    "cookie",
    "histfile",
    "inject",
    "payload",
)
_WEAK = ("wipe", "bypass", "disable logging", "overwrite", "admin access")

_HEX_RUN_RE = re.compile(r"[0-9a-f]{32,}")
_HEX16_RE = re.compile(r"[0-9a-f]{16,}")
_OPAQUE_RE = re.compile(r"[A-Za-z0-9+/=_\-]{24,}")

_NETWORK_TYPES = {ActionType.HTTP_REQUEST, ActionType.SEND_EMAIL, ActionType.SEND_MESSAGE}
_DESTRUCTIVE_TYPES = {ActionType.DELETE_FILE, ActionType.MOVE_FILE, ActionType.WRITE_FILE}


def _entropy(s: str) -> float:
    if not s:
        return 0.0
    counts: dict[str, int] = {}
    for ch in s:
        counts[ch] = counts.get(ch, 0) + 1
    n = len(s)
    return -sum(c / n * math.log2(c / n) for c in counts.values())


@dataclass
class StubClassifier:
    """Deterministic scorer standing in for a learned injection model.

    Additive signal weights over the lowercased target+payload text:
    strong phrases 0.50, medium 0.30, weak 0.15 (each counted once),
    a >=32-char hex run 0.50 ("long_hex_blob"), a >=16-char hex run 0.30,
    a >=24-char high-entropy opaque token 0.45, an absolute-path target
    outside the workspace for destructive action types 0.50, a destructive
    action under a shared temp directory 0.35, a network-bound action
    carrying any of the blob signals 0.60, a history-rewriting push phrase
    0.50 ("high_impact_op"), and a network payload addressing more than
    five recipients 0.50 ("bulk_recipients"). Score is capped at 1.0;
    label is INJECTION when score >= 0.5, confidence = max(score, 0.5)
    for INJECTION and 1 - score for SAFE.
    """

    available: bool = True
    workspace_root: str = ""
    calls: int = field(default=0, repr=False)

    def classify(self, action_type: ActionType, target: str, payload: str) -> ClassifierVerdict:
        self.calls += 1
        hay = f"{target}\n{payload}".lower()
        score = 0.0
        signals: list[str] = []

        def add(weight: float, name: str) -> None:
            nonlocal score
            score += weight
            signals.append(name)

        if any(tok in hay for tok in _STRONG):
            add(0.50, "strong_phrase")
        if any(tok in hay for tok in _MEDIUM):
            add(0.30, "medium_phrase")
        if any(tok in hay for tok in _WEAK):
            add(0.15, "weak_phrase")
        has_blob = False
        if _HEX_RUN_RE.search(hay):
            add(0.50, "long_hex_blob")
            has_blob = True
        elif _HEX16_RE.search(hay):
            add(0.30, "hex_token")
            has_blob = True
        else:
            m = max(_OPAQUE_RE.finditer(hay), key=lambda m: len(m.group(0)), default=None)
            if m is not None and _entropy(m.group(0)) > 3.8:
                add(0.45, "high_entropy_token")
                has_blob = True
        tgt = target.strip().lower()
        outside = tgt.startswith(("/", "~")) and not (
            self.workspace_root and tgt.startswith(self.workspace_root.lower())
        )
        if action_type in _DESTRUCTIVE_TYPES and outside:
            add(0.50, "outside_workspace")
            if tgt.startswith(("/tmp/", "/var/tmp/")):
                add(0.35, "shared_temp_destructive")
        if action_type in _NETWORK_TYPES and has_blob:
            add(0.60, "opaque_blob_egress")
        if "push --force" in hay or "force-push" in hay:
            add(0.50, "high_impact_op")
        if action_type in _NETWORK_TYPES and payload.count("@") > 5:
            add(0.50, "bulk_recipients")

        score = min(1.0, score)
        if score >= 0.5:
            return ClassifierVerdict(Label.INJECTION, max(score, 0.5), tuple(signals))
        return ClassifierVerdict(Label.SAFE, 1.0 - score, tuple(signals))
