"""Gateway configuration: a YAML file with defaults for every knob.

The protection table, wire grammar, and audit format are deliberately not
configurable. What is: workspace location/mode, which policy/catalog/rule
files load, tier thresholds and budgets, and server ports.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Optional

import yaml

from .classifier import DEFAULT_BYPASS_TYPES, GateConfig
from .executors import Mode
from .model import ActionType


class ConfigError(Exception):
    pass


def default_text(name: str) -> str:
    """Packaged default for policy.yaml / heuristics.yaml / ifc_rules.yaml."""
    return (resources.files("actiongate") / "defaults" / name).read_text(encoding="utf-8")


@dataclass(frozen=True)
class GatewayConfig:
    workspace_root: str = "./workspace"
    workspace_env: dict = field(default_factory=dict)
    workspace_aliases: dict = field(default_factory=dict)
    http_allowlist: tuple[str, ...] = ()
    mode: Mode = Mode.LIVE
    state_dir: str = "~/.gateway"
    home: str = "~"

    shield_enabled: bool = True
    policy_file: Optional[str] = None        # None = packaged default
    heuristics_file: Optional[str] = None
    ifc_rules_file: Optional[str] = None

    t1_threshold: float = 0.85
    t1_bypass_types: frozenset[ActionType] = DEFAULT_BYPASS_TYPES
    t1_classifier: str = "stub"              # stub | disabled

    t2_client: str = "mock"                  # mock | http | disabled
    t2_max_per_day: int = 100
    t2_timeout_s: float = 30.0
    t2_endpoint: str = ""
    t2_model: str = ""
    t2_api_key_env: str = "GATE_EVAL_API_KEY"

    t3_timeout_s: float = 300.0
    t3_max_pending: int = 5
    t3_window_s: float = 600.0

    host: str = "127.0.0.1"
    port: int = 7801
    http_port: int = 7802

    def gate_config(self) -> GateConfig:
        return GateConfig(threshold=self.t1_threshold, bypass_types=self.t1_bypass_types)

    def resolved_state_dir(self) -> str:
        return os.path.abspath(os.path.expanduser(self.state_dir))

    def resolved_root(self) -> str:
        return os.path.abspath(os.path.expanduser(self.workspace_root))

    def resolved_home(self) -> str:
        return os.path.abspath(os.path.expanduser(self.home))


def _parse_bypass(raw: object) -> frozenset[ActionType]:
    if raw is None:
        return DEFAULT_BYPASS_TYPES
    if raw in ([], "none"):
        return frozenset()
    if not isinstance(raw, list):
        raise ConfigError("tier1.bypass_types must be a list or 'none'")
    out = set()
    for a in raw:
        try:
            out.add(ActionType(a))
        except (ValueError, TypeError):
            raise ConfigError(f"unknown bypass action type {a!r}") from None
    return frozenset(out)


def parse_config(text: str, base_dir: str = ".") -> GatewayConfig:
    try:
        doc = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")

    def rel(p: Optional[str]) -> Optional[str]:
        if p is None:
            return None
        p = os.path.expanduser(str(p))
        return p if os.path.isabs(p) else os.path.join(base_dir, p)

    ws = doc.get("workspace", {}) or {}
    shield = doc.get("shield", {}) or {}
    t1 = shield.get("tier1", {}) or {}
    t2 = shield.get("tier2", {}) or {}
    t3 = shield.get("tier3", {}) or {}
    server = doc.get("server", {}) or {}

    mode_raw = str(ws.get("mode", "live")).lower()
    if mode_raw not in ("live", "record_only"):
        raise ConfigError(f"unknown workspace mode {mode_raw!r}")

    cfg = GatewayConfig(
        workspace_root=rel(ws.get("root", "./workspace")) or "./workspace",
        workspace_env=dict(ws.get("env", {}) or {}),
        workspace_aliases=dict(ws.get("aliases", {}) or {}),
        http_allowlist=tuple(ws.get("http_allowlist", []) or []),
        mode=Mode(mode_raw),
        state_dir=rel(doc.get("state_dir", "~/.gateway")) or "~/.gateway",
        home=str(doc.get("home", "~")),
        shield_enabled=bool(shield.get("enabled", True)),
        policy_file=rel(shield.get("policy_file")),
        heuristics_file=rel(shield.get("heuristics_file")),
        ifc_rules_file=rel(shield.get("ifc_rules_file")),
        t1_threshold=float(t1.get("threshold", 0.85)),
        t1_bypass_types=_parse_bypass(t1.get("bypass_types")),
        t1_classifier=str(t1.get("classifier", "stub")),
        t2_client=str(t2.get("client", "mock")),
        t2_max_per_day=int(t2.get("max_per_day", 100)),
        t2_timeout_s=float(t2.get("timeout_s", 30.0)),
        t2_endpoint=str(t2.get("endpoint", "")),
        t2_model=str(t2.get("model", "")),
        t2_api_key_env=str(t2.get("api_key_env", "GATE_EVAL_API_KEY")),
        t3_timeout_s=float(t3.get("timeout_s", 300.0)),
        t3_max_pending=int(t3.get("max_pending", 5)),
        t3_window_s=float(t3.get("window_s", 600.0)),
        host=str(server.get("host", "127.0.0.1")),
        port=int(server.get("port", 7801)),
        http_port=int(server.get("http_port", 7802)),
    )
    if cfg.t1_classifier not in ("stub", "disabled"):
        raise ConfigError(f"unknown tier1.classifier {cfg.t1_classifier!r}")
    if cfg.t2_client not in ("mock", "http", "disabled"):
        raise ConfigError(f"unknown tier2.client {cfg.t2_client!r}")
    return cfg


def load_config(path: Optional[str]) -> GatewayConfig:
    if path is None:
        return GatewayConfig()
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), base_dir=os.path.dirname(os.path.abspath(path)))


def max_security(cfg: GatewayConfig) -> GatewayConfig:
    """The hardened variant: no classifier bypass for any action type."""
    return replace(cfg, t1_bypass_types=frozenset())
