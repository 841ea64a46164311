"""Tier 0: deterministic allow/deny/verify policy over action type + target.

The policy is a YAML document with three ordered sections evaluated in fixed
precedence: deny, then verify, then allow. Within a section the first rule
whose action-type list and path globs both match wins. A ``verify`` match
routes the action to the tier named by its ``tier_override``. No rule ever
inspects payload content — content analysis starts at Tier 1.

Loading is strict: unknown keys, unknown action types, a verify rule without
a tier override, or duplicate rule names all raise PolicyError. Callers
treat a load failure as fail-closed (block everything until fixed).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import yaml

from .model import Action, ActionType, TierId
from .pathmatch import PathContext, compile_glob, normalize_target


class PolicyError(Exception):
    pass


class T0Kind(Enum):
    DENY = "deny"
    VERIFY = "verify"
    ALLOW = "allow"
    NO_MATCH = "no_match"


_SECTION_ORDER = ("deny", "verify", "allow")
_RULE_KEYS = {"name", "action_types", "paths", "tier_override", "description"}
_TIER_BY_OVERRIDE = {1: TierId.T1, 2: TierId.T2, 3: TierId.T3}


@dataclass(frozen=True)
class PolicyRule:
    name: str
    section: str
    action_types: frozenset[ActionType]
    paths: tuple[str, ...]          # empty tuple = any target
    tier_override: Optional[TierId]
    matchers: tuple = field(default=(), compare=False, repr=False)

    def matches(self, action: Action, ctx: PathContext) -> bool:
        if action.action_type not in self.action_types:
            return False
        if not self.paths:
            return True
        norm = normalize_target(action.target, ctx)
        return any(m.match(norm) for m in self.matchers)


@dataclass(frozen=True)
class Policy:
    rules: tuple[PolicyRule, ...]   # deny rules first, then verify, then allow
    ctx: PathContext

    def rule_named(self, name: str) -> Optional[PolicyRule]:
        for r in self.rules:
            if r.name == name:
                return r
        return None


@dataclass(frozen=True)
class T0Result:
    kind: T0Kind
    rule: Optional[str] = None
    tier: Optional[TierId] = None


def _parse_rule(raw: object, section: str, ctx: PathContext) -> PolicyRule:
    if not isinstance(raw, dict):
        raise PolicyError(f"{section}: rule entries must be mappings, got {type(raw).__name__}")
    unknown = set(raw) - _RULE_KEYS
    if unknown:
        raise PolicyError(f"{section}: unknown rule keys {sorted(unknown)}")
    name = raw.get("name")
    if not isinstance(name, str) or not name:
        raise PolicyError(f"{section}: every rule needs a non-empty string name")
    atypes = raw.get("action_types", [])
    if atypes is None:
        atypes = []
    if not isinstance(atypes, list):
        raise PolicyError(f"rule {name!r}: action_types must be a list")
    parsed_types = set()
    for a in atypes:
        try:
            parsed_types.add(ActionType(a))
        except (ValueError, TypeError):
            raise PolicyError(f"rule {name!r}: unknown action type {a!r}") from None
    if not parsed_types:
        parsed_types = set(ActionType)   # empty list means match every type
    paths = raw.get("paths", [])
    if paths is None:
        paths = []
    if not isinstance(paths, list) or not all(isinstance(p, str) and p for p in paths):
        raise PolicyError(f"rule {name!r}: paths must be a list of non-empty strings")
    override_raw = raw.get("tier_override")
    override: Optional[TierId] = None
    if section == "verify":
        if override_raw not in _TIER_BY_OVERRIDE:
            raise PolicyError(f"rule {name!r}: verify rules require tier_override of 1, 2 or 3")
        override = _TIER_BY_OVERRIDE[override_raw]
    elif override_raw is not None:
        raise PolicyError(f"rule {name!r}: tier_override only valid on verify rules")
    matchers = tuple(compile_glob(p, ctx) for p in paths)
    return PolicyRule(
        name=name,
        section=section,
        action_types=frozenset(parsed_types),
        paths=tuple(paths),
        tier_override=override,
        matchers=matchers,
    )


def load_policy(text: str, home: str, workspace_root: str) -> Policy:
    ctx = PathContext(home=home, workspace_root=workspace_root)
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise PolicyError(f"policy is not valid YAML: {exc}") from exc
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise PolicyError("policy document must be a mapping of sections")
    unknown = set(doc) - set(_SECTION_ORDER)
    if unknown:
        raise PolicyError(f"unknown policy sections {sorted(unknown)}")
    rules: list[PolicyRule] = []
    seen: set[str] = set()
    for section in _SECTION_ORDER:
        entries = doc.get(section, [])
        if entries is None:
            entries = []
        if not isinstance(entries, list):
            raise PolicyError(f"section {section!r} must be a list of rules")
        for raw in entries:
            rule = _parse_rule(raw, section, ctx)
            if rule.name in seen:
                raise PolicyError(f"duplicate rule name {rule.name!r}")
            seen.add(rule.name)
            rules.append(rule)
    return Policy(rules=tuple(rules), ctx=ctx)


def evaluate_t0(policy: Policy, action: Action) -> T0Result:
    """First match wins within each section; sections in deny/verify/allow order."""
    for rule in policy.rules:
        if rule.matches(action, policy.ctx):
            if rule.section == "deny":
                return T0Result(T0Kind.DENY, rule=rule.name)
            if rule.section == "verify":
                return T0Result(T0Kind.VERIFY, rule=rule.name, tier=rule.tier_override)
            return T0Result(T0Kind.ALLOW, rule=rule.name)
    return T0Result(T0Kind.NO_MATCH)
