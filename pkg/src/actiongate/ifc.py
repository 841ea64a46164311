"""Information-flow control: label data at origin, taint-track it through a
session, and flag flows of sensitive content toward low-trust sinks.

Labels form a total order PUBLIC < INTERNAL < CONFIDENTIAL < RESTRICTED and
only ever join upward. Classification happens inside the executor when a
read returns content; the proposer has no way to write the taint map.

Taint propagation is content-based, not handle-based: every read is
fingerprinted as 64-byte windows sampled at a 16-byte stride (plus a tail
window, or the whole content when shorter), and an outbound payload is
considered tainted when any window reappears anywhere inside it. Matching
uses a Rabin-Karp rolling hash with SHA-256 confirmation, so embedding a
secret in the middle of a larger payload is still caught, at any step
count. Re-encoding (base64 of the secret, say) is a documented false
negative of this mechanism.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Optional

import yaml

from .model import Action, ActionType, NETWORK_CLASS, WRITE_CLASS
from .pathmatch import PathContext, compile_glob, normalize_target

WINDOW = 64
STRIDE = 16

_RK_BASE = 1_000_003
_RK_MOD = (1 << 61) - 1


class SensitivityLabel(IntEnum):
    PUBLIC = 0
    INTERNAL = 1
    CONFIDENTIAL = 2
    RESTRICTED = 3

    @property
    def label(self) -> str:
        return self.name


def join(a: SensitivityLabel, b: SensitivityLabel) -> SensitivityLabel:
    return a if a >= b else b


class SinkClass(IntEnum):
    LOCAL_WORKSPACE = 0
    WORLD_READABLE = 1
    NETWORK = 2
    MESSAGE_OUT = 3


class RulesError(Exception):
    pass


@dataclass(frozen=True)
class ClassificationRule:
    kind: str                     # path_glob | content_pattern
    match: str
    label: SensitivityLabel
    rx: re.Pattern = field(compare=False, repr=False, default=None)  # type: ignore[assignment]


@dataclass(frozen=True)
class RuleSet:
    rules: tuple[ClassificationRule, ...]
    ctx: PathContext


def load_rules(text: str, home: str, workspace_root: str) -> RuleSet:
    ctx = PathContext(home=home, workspace_root=workspace_root)
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise RulesError(f"rules are not valid YAML: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("rules"), list):
        raise RulesError("rules file must be a mapping with a 'rules' list")
    out: list[ClassificationRule] = []
    for raw in doc["rules"]:
        if not isinstance(raw, dict):
            raise RulesError("rule entries must be mappings")
        kind = raw.get("kind")
        match = raw.get("match")
        label_raw = raw.get("label")
        if kind not in ("path_glob", "content_pattern"):
            raise RulesError(f"unknown rule kind {kind!r}")
        if not isinstance(match, str) or not match:
            raise RulesError("rule missing match expression")
        try:
            label = SensitivityLabel[str(label_raw)]
        except KeyError:
            raise RulesError(f"unknown label {label_raw!r}") from None
        if kind == "path_glob":
            rx = compile_glob(match, ctx)
        else:
            try:
                rx = re.compile(match, re.IGNORECASE)
            except re.error as exc:
                raise RulesError(f"bad content pattern {match!r}: {exc}") from exc
        out.append(ClassificationRule(kind=kind, match=match, label=label, rx=rx))
    return RuleSet(rules=tuple(out), ctx=ctx)


def classify_origin(target: str, content: bytes, ruleset: RuleSet) -> SensitivityLabel:
    """First matching rule wins, in file order; PUBLIC when nothing matches."""
    norm = normalize_target(target, ruleset.ctx)
    text: Optional[str] = None
    for rule in ruleset.rules:
        if rule.kind == "path_glob":
            if rule.rx.match(norm):
                return rule.label
        else:
            if text is None:
                text = content.decode("utf-8", "replace")
            if rule.rx.search(text):
                return rule.label
    return SensitivityLabel.PUBLIC


# --- fingerprinting ----------------------------------------------------

def _windows(content: bytes) -> Iterable[bytes]:
    n = len(content)
    if n == 0:
        return
    if n <= WINDOW:
        yield content
        return
    last = None
    for start in range(0, n - WINDOW + 1, STRIDE):
        yield content[start : start + WINDOW]
        last = start
    if last != n - WINDOW:
        yield content[n - WINDOW :]


def _rk_hash(window: bytes) -> int:
    h = 0
    for b in window:
        h = (h * _RK_BASE + b) % _RK_MOD
    return h


@dataclass
class _Group:
    """All fingerprints of one window length, for one rolling scan."""

    length: int
    power: int                                   # _RK_BASE ** length % mod
    by_rk: dict[int, list[tuple[bytes, SensitivityLabel]]] = field(default_factory=dict)

    def add(self, window: bytes, label: SensitivityLabel) -> bool:
        """Record one window; returns True when it was new."""
        rk = _rk_hash(window)
        digest = hashlib.sha256(window).digest()
        bucket = self.by_rk.setdefault(rk, [])
        for i, (existing, old) in enumerate(bucket):
            if existing == digest:
                bucket[i] = (existing, join(old, label))
                return False
        bucket.append((digest, label))
        return True


class TaintMap:
    """Session-scoped fingerprint store. Entries only grow; labels only rise."""

    def __init__(self) -> None:
        self._groups: dict[int, _Group] = {}
        self._count = 0

    def __len__(self) -> int:
        return self._count

    def propagate(self, content: bytes, label: SensitivityLabel) -> None:
        if not content or label is SensitivityLabel.PUBLIC:
            return
        for window in _windows(content):
            group = self._groups.get(len(window))
            if group is None:
                group = _Group(len(window), pow(_RK_BASE, len(window), _RK_MOD))
                self._groups[len(window)] = group
            if group.add(window, label):
                self._count += 1

    def labels_in(self, payload: bytes) -> set[SensitivityLabel]:
        """Labels of every stored window found anywhere inside payload."""
        found: set[SensitivityLabel] = set()
        n = len(payload)
        for length, group in self._groups.items():
            if length > n:
                continue
            h = _rk_hash(payload[:length])
            pos = 0
            while True:
                bucket = group.by_rk.get(h)
                if bucket:
                    segment = payload[pos : pos + length]
                    sha = hashlib.sha256(segment).digest()
                    for digest, label in bucket:
                        if digest == sha:
                            found.add(label)
                if pos + length >= n:
                    break
                h = (
                    h * _RK_BASE + payload[pos + length] - payload[pos] * group.power
                ) % _RK_MOD
                pos += 1
        return found


# --- flow decisions ----------------------------------------------------

def sink_class(action: Action, ctx: PathContext) -> Optional[SinkClass]:
    at = action.action_type
    if at is ActionType.HTTP_REQUEST:
        return SinkClass.NETWORK
    if at in (ActionType.SEND_EMAIL, ActionType.SEND_MESSAGE):
        return SinkClass.MESSAGE_OUT
    if at in WRITE_CLASS:
        # destination for move/copy is the payload; plain writes use target
        dest = (
            action.payload_text.strip()
            if at in (ActionType.MOVE_FILE, ActionType.COPY_FILE)
            else action.target
        )
        norm = normalize_target(dest, ctx)
        root = normalize_target(ctx.workspace_root, ctx)
        if norm == root or norm.startswith(root.rstrip("/") + "/"):
            return SinkClass.LOCAL_WORKSPACE
        return SinkClass.WORLD_READABLE
    return None


@dataclass(frozen=True)
class FlowDecision:
    violation: bool
    label: SensitivityLabel = SensitivityLabel.PUBLIC
    sink: Optional[SinkClass] = None
    matched: frozenset[SensitivityLabel] = frozenset()

CLEAR = FlowDecision(violation=False)


def check_flow(
    taint: TaintMap, action: Action, ctx: PathContext, content: Optional[bytes] = None
) -> FlowDecision:
    """content overrides the payload when the flowing bytes are not the
    payload itself (move/copy read their source file)."""
    if action.action_type not in WRITE_CLASS and action.action_type not in NETWORK_CLASS:
        return CLEAR
    sink = sink_class(action, ctx)
    if sink is None:
        return CLEAR
    flowing = action.payload if content is None else content
    matched = taint.labels_in(flowing)
    if not matched:
        return CLEAR
    top = max(matched)
    if top >= SensitivityLabel.CONFIDENTIAL and sink in (
        SinkClass.NETWORK,
        SinkClass.MESSAGE_OUT,
        SinkClass.WORLD_READABLE,
    ):
        return FlowDecision(True, top, sink, frozenset(matched))
    if top is SensitivityLabel.RESTRICTED and sink is not SinkClass.LOCAL_WORKSPACE:
        return FlowDecision(True, top, sink, frozenset(matched))
    return FlowDecision(False, top, sink, frozenset(matched))
