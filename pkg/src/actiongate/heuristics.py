"""Tier 1 heuristic engine: a regex rule catalog with obfuscation-resistant
matching over an expanded form of each action.

Verdicts are strictly binary — a rule either matches (BLOCK) or the engine
reports NO_MATCH. Absence of a match carries no positive "safe" signal; the
classifier gate combines this with the classifier's opinion.

Expansion handles what a shell would do before the kernel sees the command:
inline VAR=value assignments and ${VAR} references are substituted (workspace
env first, then payload-local assignments, to a fixpoint), aliases resolved,
then normalization variants are generated — NFKC + confusable folding,
\\xHH / %HH unescaping, long hex and base64 token decoding. A rule matches if
it fires on any variant, so wrapping a blocked token in an env var or hex
armor does not evade it. Command substitution $(...) is treated as content to
match, never evaluated.
"""
from __future__ import annotations

import base64
import binascii
import re
import unicodedata
from dataclasses import dataclass, field
from typing import Iterable, Optional
from urllib.parse import unquote

import yaml

from .model import Action, ActionType

CATEGORIES = (
    "recursive_delete",
    "privilege_escalation",
    "credential_exposure",
    "pipe_to_shell",
    "encoded_payload",
    "reverse_shell",
    "sql_injection",
    "insecure_scheme",
    "env_dump",
    "agent_internal_enumeration",
)


class CatalogError(Exception):
    pass


@dataclass(frozen=True)
class HeuristicRule:
    id: str
    category: str
    pattern: str
    applies_to: frozenset[ActionType]   # empty = all types
    always_block: bool
    rx: re.Pattern = field(compare=False, repr=False, default=None)  # type: ignore[assignment]

    def applies(self, at: ActionType) -> bool:
        return not self.applies_to or at in self.applies_to


@dataclass(frozen=True)
class Catalog:
    rules: tuple[HeuristicRule, ...]

    def by_category(self) -> dict[str, list[HeuristicRule]]:
        out: dict[str, list[HeuristicRule]] = {}
        for r in self.rules:
            out.setdefault(r.category, []).append(r)
        return out


def load_catalog(text: str) -> Catalog:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise CatalogError(f"catalog is not valid YAML: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("rules"), list):
        raise CatalogError("catalog must be a mapping with a 'rules' list")
    rules: list[HeuristicRule] = []
    seen: set[str] = set()
    allowed_keys = {"id", "category", "pattern", "applies_to", "always_block", "note"}
    for raw in doc["rules"]:
        if not isinstance(raw, dict):
            raise CatalogError("rule entries must be mappings")
        unknown = set(raw) - allowed_keys
        if unknown:
            raise CatalogError(f"rule has unknown keys {sorted(unknown)}")
        rid = raw.get("id")
        cat = raw.get("category")
        pat = raw.get("pattern")
        if not isinstance(rid, str) or not rid:
            raise CatalogError("rule missing id")
        if rid in seen:
            raise CatalogError(f"duplicate rule id {rid!r}")
        seen.add(rid)
        if cat not in CATEGORIES:
            raise CatalogError(f"rule {rid!r}: unknown category {cat!r}")
        if not isinstance(pat, str) or not pat:
            raise CatalogError(f"rule {rid!r}: missing pattern")
        try:
            rx = re.compile(pat, re.IGNORECASE | re.DOTALL | re.MULTILINE)
        except re.error as exc:
            raise CatalogError(f"rule {rid!r}: bad pattern: {exc}") from exc
        applies_raw = raw.get("applies_to", [])
        applies: set[ActionType] = set()
        if applies_raw not in (None, [], ["*"], "*"):
            for a in applies_raw:
                try:
                    applies.add(ActionType(a))
                except (ValueError, TypeError):
                    raise CatalogError(f"rule {rid!r}: unknown action type {a!r}") from None
        rules.append(
            HeuristicRule(
                id=rid,
                category=cat,
                pattern=pat,
                applies_to=frozenset(applies),
                always_block=bool(raw.get("always_block", False)),
                rx=rx,
            )
        )
    return Catalog(rules=tuple(rules))


# --- expansion ---------------------------------------------------------

_ASSIGN_RE = re.compile(r"(?:^|[;&|]\s*|\bexport\s+)([A-Za-z_]\w*)=(\"[^\"]*\"|'[^']*'|[^\s;&|]*)")
_VARREF_RE = re.compile(r"\$\{(\w+)\}|\$(\w+)")
_HEX_ESC_RE = re.compile(r"(?:\\x[0-9a-fA-F]{2})+")
_HEX_TOKEN_RE = re.compile(r"\b(?:0x)?((?:[0-9a-fA-F]{2}){8,})\b")
_B64_TOKEN_RE = re.compile(r"\b[A-Za-z0-9+/]{16,}={0,2}\b")
_SEGMENT_RE = re.compile(r"\|\||&&|[|;\n]")

# common Cyrillic/Greek lookalikes folded to ASCII; NFKC does not cover these
_CONFUSABLES = str.maketrans({
    "а": "a", "е": "e", "о": "o", "р": "p", "с": "c", "х": "x", "у": "y",
    "і": "i", "ѕ": "s", "ԁ": "d", "ɡ": "g", "һ": "h", "ո": "n", "ν": "v",
    "α": "a", "ο": "o", "τ": "t", "ι": "i", "κ": "k", "ʏ": "y", "Α": "A",
    "Е": "E", "О": "O", "Р": "P", "С": "C", "Х": "X", "В": "B", "М": "M",
    "Н": "H", "Т": "T", "Ѕ": "S", "І": "I",
})


def _strip_quotes(v: str) -> str:
    if len(v) >= 2 and v[0] == v[-1] and v[0] in "\"'":
        return v[1:-1]
    return v


def _substitute_env(text: str, env: dict[str, str]) -> str:
    local = dict(env)
    for m in _ASSIGN_RE.finditer(text):
        local[m.group(1)] = _strip_quotes(m.group(2))

    def repl(m: re.Match) -> str:
        name = m.group(1) or m.group(2)
        return local.get(name, "")

    out = text
    for _ in range(3):  # bounded fixpoint for nested indirection
        new = _VARREF_RE.sub(repl, out)
        if new == out:
            break
        out = new
    return out


def _resolve_aliases(text: str, aliases: dict[str, str]) -> str:
    if not aliases:
        return text
    pieces: list[str] = []
    last = 0
    for m in _SEGMENT_RE.finditer(text):
        pieces.append(text[last:m.start()])
        pieces.append(m.group(0))
        last = m.end()
    pieces.append(text[last:])
    out: list[str] = []
    for piece in pieces:
        stripped = piece.lstrip()
        lead = piece[: len(piece) - len(stripped)]
        first, _, rest = stripped.partition(" ")
        if first in aliases:
            piece = lead + aliases[first] + (" " + rest if rest else "")
        out.append(piece)
    return "".join(out)


def _fold(text: str) -> str:
    return unicodedata.normalize("NFKC", text).translate(_CONFUSABLES).casefold()


def _decode_hex(text: str) -> str:
    def esc(m: re.Match) -> str:
        try:
            return bytes.fromhex(m.group(0).replace("\\x", "")).decode("utf-8", "replace")
        except ValueError:
            return m.group(0)

    out = _HEX_ESC_RE.sub(esc, text)
    out = unquote(out)

    def tok(m: re.Match) -> str:
        try:
            raw = bytes.fromhex(m.group(1))
        except ValueError:
            return m.group(0)
        if all(32 <= b < 127 or b in (9, 10) for b in raw):
            return raw.decode("ascii")
        return m.group(0)

    return _HEX_TOKEN_RE.sub(tok, out)


def _decode_b64_parts(text: str) -> list[str]:
    found: list[str] = []
    for m in _B64_TOKEN_RE.finditer(text):
        tok = m.group(0)
        if len(tok) % 4:
            continue
        try:
            raw = base64.b64decode(tok, validate=True)
        except (binascii.Error, ValueError):
            continue
        if raw and all(32 <= b < 127 or b in (9, 10, 13) for b in raw):
            found.append(raw.decode("ascii"))
    return found


@dataclass(frozen=True)
class ExpandedAction:
    action_type: ActionType
    target: str
    payload: str            # post env/alias expansion
    variants: tuple[str, ...]


def expand_action(
    action: Action,
    env: Optional[dict[str, str]] = None,
    aliases: Optional[dict[str, str]] = None,
) -> ExpandedAction:
    env = env or {}
    payload = action.payload_text
    if action.action_type is ActionType.EXECUTE_COMMAND:
        payload = _resolve_aliases(payload, aliases or {})
        payload = _substitute_env(payload, env)
    base = f"{action.target}\n{payload}"
    variants = [base, _fold(base)]
    decoded = _decode_hex(base)
    if decoded != base:
        variants.append(decoded)
        variants.append(_fold(decoded))
    for part in _decode_b64_parts(base):
        variants.append(part)
        variants.append(_fold(part))
    # stable dedupe
    seen: set[str] = set()
    uniq = tuple(v for v in variants if not (v in seen or seen.add(v)))
    return ExpandedAction(action.action_type, action.target, payload, uniq)


# --- matching ----------------------------------------------------------

def match_heuristics(catalog: Catalog, expanded: ExpandedAction) -> list[str]:
    """Ids of every rule that fires. Non-empty means BLOCK."""
    hits: list[str] = []
    for rule in catalog.rules:
        if not rule.applies(expanded.action_type):
            continue
        if any(rule.rx.search(v) for v in expanded.variants):
            hits.append(rule.id)
    return hits


def match_always_block(catalog: Catalog, expanded: ExpandedAction) -> list[str]:
    """Precheck for actions routed straight to Tier 2: always_block rules only."""
    hits: list[str] = []
    for rule in catalog.rules:
        if not rule.always_block or not rule.applies(expanded.action_type):
            continue
        if any(rule.rx.search(v) for v in expanded.variants):
            hits.append(rule.id)
    return hits


def categories_covered(catalog: Catalog) -> set[str]:
    return {r.category for r in catalog.rules}


def iter_rules(catalog: Catalog) -> Iterable[HeuristicRule]:
    return iter(catalog.rules)
