"""Evaluation pipeline: guardian -> T0 -> T1 -> T2 -> T3, then flow check,
pre-destruction snapshots, execution, and audit — in that order, fail-closed
at every stage.

Every action is evaluated independently; an approval earned by one action
carries nothing over to the next. The only way to skip the pipeline is the
explicit shield-disable launch flag, which still audits everything it lets
through (that mode exists for baseline measurement, not operation).
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

from .approvals import ApprovalBroker, ApprovalState
from .audit import AuditError, AuditLog
from .chronicle import Chronicle, ChronicleError
from .classifier import ClassifierPort, GateConfig, T1Kind, evaluate_t1
from .evaluator import BudgetLedger, CanaryToken, EvalClientPort, T2Kind, evaluate_t2
from .executors import ExecResult, Executor, destruction_targets
from .guardian import GuardKind, Guardian
from .heuristics import Catalog, expand_action, match_always_block
from .ifc import check_flow
from .model import Action, Decision, Session, TierId, Verdict
from .pathmatch import PathContext
from .policy import Policy, T0Kind, evaluate_t0

_AUDIT_EXCERPT = 2048


def _excerpt(text: str, limit: int = _AUDIT_EXCERPT) -> str:
    if len(text) <= limit:
        return text
    return text[:limit] + " …[truncated]"


@dataclass
class PipelineResult:
    verdict: Verdict
    execution: Optional[ExecResult] = None
    trail: list[dict] = field(default_factory=list)


class Pipeline:
    def __init__(
        self,
        *,
        guardian: Guardian,
        policy: Policy,
        catalog: Catalog,
        classifier_port: Optional[ClassifierPort],
        gate_cfg: GateConfig,
        ledger: BudgetLedger,
        canary: CanaryToken,
        eval_client: Optional[EvalClientPort],
        t2_timeout_s: float,
        broker: ApprovalBroker,
        executor: Executor,
        chronicle: Chronicle,
        audit: AuditLog,
        path_ctx: PathContext,
        shield_enabled: bool = True,
        env: Optional[dict[str, str]] = None,
        aliases: Optional[dict[str, str]] = None,
    ):
        self.guardian = guardian
        self.policy = policy
        self.catalog = catalog
        self.classifier_port = classifier_port
        self.gate_cfg = gate_cfg
        self.ledger = ledger
        self.canary = canary
        self.eval_client = eval_client
        self.t2_timeout_s = t2_timeout_s
        self.broker = broker
        self.executor = executor
        self.chronicle = chronicle
        self.audit = audit
        self.path_ctx = path_ctx
        self.shield_enabled = shield_enabled
        self.env = env or {}
        self.aliases = aliases or {}

    # -- audit helpers -------------------------------------------------

    def _audit(self, kind: str, body: dict) -> bool:
        try:
            self.audit.append(kind, body)
            return True
        except AuditError:
            return False

    def _audit_blocked_verdict(self, action: Action, verdict: Verdict) -> None:
        # best effort: a broken ledger is exactly when we cannot record
        self._audit(
            "verdict",
            {
                "phase": "decision",
                "action_id": action.id,
                "session_id": action.session_id,
                "decision": verdict.decision.value,
                "resolving_tier": verdict.resolving_tier.label,
                "reason": verdict.reason,
                "detail": verdict.detail,
            },
        )

    # -- main ----------------------------------------------------------

    def process(self, session: Session, action: Action) -> PipelineResult:
        t_start = time.monotonic()
        trail: list[dict] = []
        latency: dict[str, float] = {}

        def mark(tier: TierId, outcome: str, reason: str = "", t0: float = 0.0) -> None:
            entry = {"tier": tier.label, "outcome": outcome}
            if reason:
                entry["reason"] = reason
            trail.append(entry)
            if t0:
                latency[tier.label] = round((time.monotonic() - t0) * 1000.0, 3)
            if not self._audit(
                "tier_decision",
                {"action_id": action.id, "session_id": action.session_id, **entry},
            ):
                raise AuditError("tier decision append failed")

        def blocked(tier: TierId, reason: str, detail: str = "") -> PipelineResult:
            latency["total"] = round((time.monotonic() - t_start) * 1000.0, 3)
            verdict = Verdict(
                action_id=action.id,
                decision=Decision.BLOCK,
                resolving_tier=tier,
                reason=reason,
                detail=detail,
                latency_ms=dict(latency),
            )
            self._audit_blocked_verdict(action, verdict)
            return PipelineResult(verdict=verdict, trail=trail)

        if not self._audit(
            "action_proposed",
            {
                "action_id": action.id,
                "session_id": action.session_id,
                "action_type": action.action_type.value,
                "target": action.target,
                "payload": _excerpt(action.payload_text),
            },
        ):
            return blocked(TierId.GUARDIAN, "audit_failure", "cannot record proposal")

        if not self.shield_enabled:
            verdict = Verdict(
                action_id=action.id,
                decision=Decision.ALLOW,
                resolving_tier=TierId.GUARDIAN,
                reason="shield_disabled",
                latency_ms={"total": round((time.monotonic() - t_start) * 1000.0, 3)},
            )
            return self._finish_allow(session, action, verdict, trail, flow_checked=False)

        expanded = None

        def get_expanded():
            nonlocal expanded
            if expanded is None:
                expanded = expand_action(action, env=self.env, aliases=self.aliases)
            return expanded

        # (1) guardian
        t0_clock = time.monotonic()
        try:
            guard = self.guardian.guard(action)
        except AuditError:
            raise
        except Exception as exc:
            return blocked(TierId.GUARDIAN, "guardian_unresolvable", str(exc))
        try:
            forced_tier: Optional[TierId] = None
            if guard.kind is GuardKind.BLOCK:
                mark(TierId.GUARDIAN, "block", guard.reason, t0_clock)
                return blocked(TierId.GUARDIAN, guard.reason, guard.detail)
            if guard.kind is GuardKind.FORCE_TIER:
                forced_tier = guard.tier
                mark(TierId.GUARDIAN, f"force_{guard.tier.label.lower()}", t0=t0_clock)
            else:
                mark(TierId.GUARDIAN, "pass", t0=t0_clock)

            # (2) tier 0 (skipped when the guardian forced a tier)
            if forced_tier is None:
                t0_clock = time.monotonic()
                try:
                    t0 = evaluate_t0(self.policy, action)
                except Exception as exc:
                    return blocked(TierId.T0, "t0_error", str(exc))
                if t0.kind is T0Kind.DENY:
                    mark(TierId.T0, "deny", t0.rule or "", t0_clock)
                    return blocked(TierId.T0, t0.rule or "t0_deny")
                if t0.kind is T0Kind.ALLOW:
                    mark(TierId.T0, "allow", t0.rule or "", t0_clock)
                    verdict = self._allow_verdict(action, TierId.T0, t0.rule or "", latency, t_start)
                    return self._finish_allow(session, action, verdict, trail)
                if t0.kind is T0Kind.VERIFY:
                    mark(TierId.T0, "verify", t0.rule or "", t0_clock)
                    forced_tier = t0.tier
                else:
                    mark(TierId.T0, "no_match", t0=t0_clock)
                    forced_tier = TierId.T1

            # always-block precheck when something routed past T1 straight to T2
            if forced_tier in (TierId.T2, TierId.T3):
                hits = match_always_block(self.catalog, get_expanded())
                if hits:
                    mark(TierId.T1, "always_block", hits[0])
                    return blocked(
                        TierId.T1, hits[0], "always-block rules: " + ", ".join(hits)
                    )

            # (3) tier 1
            if forced_tier is TierId.T1:
                t0_clock = time.monotonic()
                t1 = evaluate_t1(
                    get_expanded(), self.catalog, self.classifier_port, self.gate_cfg
                )
                if t1.kind is T1Kind.BLOCK:
                    mark(TierId.T1, "block", t1.reason, t0_clock)
                    return blocked(TierId.T1, t1.reason, t1.detail)
                if t1.kind is T1Kind.PASS:
                    mark(TierId.T1, "pass", t0=t0_clock)
                    verdict = self._allow_verdict(action, TierId.T1, "t1_pass", latency, t_start)
                    return self._finish_allow(session, action, verdict, trail)
                mark(TierId.T1, "escalate", t1.reason, t0_clock)
                forced_tier = TierId.T2

            # (4) tier 2
            if forced_tier is TierId.T2:
                t0_clock = time.monotonic()
                t2 = evaluate_t2(
                    action,
                    self.ledger,
                    self.canary,
                    self.eval_client,
                    timeout_s=self.t2_timeout_s,
                )
                if t2.kind is T2Kind.BLOCK:
                    mark(TierId.T2, "block", t2.reason, t0_clock)
                    return blocked(TierId.T2, t2.reason, t2.detail)
                if t2.kind is T2Kind.ALLOW:
                    mark(TierId.T2, "allow", t0=t0_clock)
                    verdict = self._allow_verdict(action, TierId.T2, "t2_allow", latency, t_start)
                    return self._finish_allow(session, action, verdict, trail)
                mark(TierId.T2, "escalate", t0=t0_clock)
                forced_tier = TierId.T3

            # (5) tier 3
            t0_clock = time.monotonic()
            taint_labels = self._taint_labels(session, action)
            req = self.broker.request_approval(action, trail, taint_labels)
            if req.state is ApprovalState.APPROVED:
                mark(TierId.T3, "approved", t0=t0_clock)
                verdict = self._allow_verdict(action, TierId.T3, "human_approved", latency, t_start)
                return self._finish_allow(session, action, verdict, trail)
            if req.state is ApprovalState.DENIED:
                reason = (
                    "approval_rate_limit" if req.note == "approval_rate_limit" else "human_denied"
                )
                mark(TierId.T3, "denied", reason, t0_clock)
                return blocked(TierId.T3, reason, req.note if reason == "human_denied" else "")
            mark(TierId.T3, "expired", "approval_timeout", t0_clock)
            return blocked(TierId.T3, "approval_timeout", req.note)
        except AuditError as exc:
            latency["total"] = round((time.monotonic() - t_start) * 1000.0, 3)
            return PipelineResult(
                verdict=Verdict(
                    action_id=action.id,
                    decision=Decision.BLOCK,
                    resolving_tier=TierId.GUARDIAN,
                    reason="audit_failure",
                    detail=str(exc),
                    latency_ms=dict(latency),
                ),
                trail=trail,
            )

    # -- allow path ----------------------------------------------------

    def _allow_verdict(
        self,
        action: Action,
        tier: TierId,
        reason: str,
        latency: dict[str, float],
        t_start: float,
    ) -> Verdict:
        latency["total"] = round((time.monotonic() - t_start) * 1000.0, 3)
        return Verdict(
            action_id=action.id,
            decision=Decision.ALLOW,
            resolving_tier=tier,
            reason=reason,
            latency_ms=dict(latency),
        )

    def _taint_labels(self, session: Session, action: Action) -> list[str]:
        content = self.executor.read_for_flow(action)
        return [lbl.label for lbl in session.taint_map.labels_in(content)]

    def _finish_allow(
        self,
        session: Session,
        action: Action,
        verdict: Verdict,
        trail: list[dict],
        flow_checked: bool = True,
    ) -> PipelineResult:
        # (6) information-flow check before any execution
        if flow_checked:
            flow_content = self.executor.read_for_flow(action)
            decision = check_flow(session.taint_map, action, self.path_ctx, flow_content)
            if decision.sink is not None and not self._audit(
                "ifc_event",
                {
                    "action_id": action.id,
                    "session_id": action.session_id,
                    "sink": decision.sink.name,
                    "label": decision.label.label,
                    "violation": decision.violation,
                },
            ):
                return self._fail_closed(action, trail, "audit_failure")
            if decision.violation:
                blocked = Verdict(
                    action_id=action.id,
                    decision=Decision.BLOCK,
                    resolving_tier=verdict.resolving_tier,
                    reason="flow_violation",
                    detail=f"{decision.label.label} content toward {decision.sink.name}",
                    latency_ms=verdict.latency_ms,
                )
                self._audit_blocked_verdict(action, blocked)
                return PipelineResult(verdict=blocked, trail=trail)

            # (7) pre-destruction snapshots
            try:
                for path in destruction_targets(action, self.executor.cfg.root):
                    record = self.chronicle.capture(path, action.id)
                    if record is not None and not self._audit(
                        "snapshot",
                        {
                            "action_id": action.id,
                            "snapshot_id": record.snapshot_id,
                            "path": record.path,
                            "kind": record.kind,
                        },
                    ):
                        return self._fail_closed(action, trail, "audit_failure")
            except ChronicleError as exc:
                blocked = Verdict(
                    action_id=action.id,
                    decision=Decision.BLOCK,
                    resolving_tier=verdict.resolving_tier,
                    reason="chronicle_failure",
                    detail=str(exc),
                    latency_ms=verdict.latency_ms,
                )
                self._audit_blocked_verdict(action, blocked)
                return PipelineResult(verdict=blocked, trail=trail)

        # decision goes to the ledger before anything irreversible happens
        if not self._audit(
            "verdict",
            {
                "phase": "decision",
                "action_id": action.id,
                "session_id": action.session_id,
                "decision": verdict.decision.value,
                "resolving_tier": verdict.resolving_tier.label,
                "reason": verdict.reason,
                "detail": verdict.detail,
            },
        ):
            return self._fail_closed(action, trail, "audit_failure")

        execution = self.executor.execute(action, verdict, taint=session.taint_map)
        self._audit(
            "verdict",
            {
                "phase": "execution",
                "action_id": action.id,
                "session_id": action.session_id,
                "status": execution.status.value,
                "error": execution.error,
                "effects": execution.effects,
                "output_excerpt": _excerpt(execution.output, 512),
            },
        )
        return PipelineResult(verdict=verdict, execution=execution, trail=trail)

    def _fail_closed(self, action: Action, trail: list[dict], reason: str) -> PipelineResult:
        return PipelineResult(
            verdict=Verdict(
                action_id=action.id,
                decision=Decision.BLOCK,
                resolving_tier=TierId.GUARDIAN,
                reason=reason,
            ),
            trail=trail,
        )
