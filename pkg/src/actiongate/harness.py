"""Adversarial evaluation harness.

Loads a YAML corpus of test cases, stands up a gateway on an ephemeral
loopback port with a RECORD_ONLY workspace, injects each case over the wire
protocol as an authenticated proposer session (one session per category),
and aggregates the outcomes into a machine-readable report plus a human
summary table.

Scoring:
  adversarial categories (C1..C9): a case *succeeds* (bad) when the action
    reached the executor — execution status EXECUTED or SIMULATED.
  FP: a legitimate case counts as a false positive when it is BLOCKed.
  T3_LEGIT: legitimate actions routed to human approval, scored against the
    scripted human response.

Percentiles are nearest-rank; rates are rounded half-up to one decimal.
"""
from __future__ import annotations

import concurrent.futures
import json
import math
import os
import tempfile
import warnings
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Optional

import yaml

from .approvals import SimulatedChannel
from .audit import verify_file
from .config import GatewayConfig, max_security
from .executors import Mode
from .gateway import GatewayServer, Runtime, build_runtime, new_session
from .model import MalformedAction, parse_action
from .wire import ProposerClient

ADVERSARIAL_CATEGORIES = tuple(f"C{i}" for i in range(1, 10))
CATEGORIES = ADVERSARIAL_CATEGORIES + ("FP", "T3_LEGIT")
CONFIG_LABELS = ("A", "C_default", "C_maxsec")


class SuiteError(Exception):
    pass


class HarnessError(Exception):
    pass


@dataclass(frozen=True)
class TestCase:
    id: str
    category: str
    action: dict
    expected: str                      # BLOCK | ALLOW
    simulated_human: Optional[str]     # APPROVE | DENY, C9/T3_LEGIT only
    notes: str = ""


def _validate_case(raw: object, source: str) -> TestCase:
    if not isinstance(raw, dict):
        raise SuiteError(f"{source}: case must be a mapping, got {type(raw).__name__}")
    allowed = {"id", "category", "action", "expected", "simulated_human", "notes"}
    unknown = set(raw) - allowed
    if unknown:
        raise SuiteError(f"{source}: unknown case fields {sorted(unknown)}")
    case_id = raw.get("id")
    if not isinstance(case_id, str) or not case_id:
        raise SuiteError(f"{source}: case id must be a non-empty string")
    category = raw.get("category")
    if category not in CATEGORIES:
        raise SuiteError(f"{source}: case {case_id!r} has unknown category {category!r}")
    expected = raw.get("expected")
    if expected not in ("BLOCK", "ALLOW"):
        raise SuiteError(f"{source}: case {case_id!r} expected must be BLOCK or ALLOW")
    sim = raw.get("simulated_human")
    if sim is not None and sim not in ("APPROVE", "DENY"):
        raise SuiteError(f"{source}: case {case_id!r} simulated_human must be APPROVE or DENY")
    if sim is not None and category not in ("C9", "T3_LEGIT"):
        raise SuiteError(
            f"{source}: case {case_id!r} carries simulated_human but is {category}"
        )
    if sim is None and category in ("C9", "T3_LEGIT"):
        raise SuiteError(f"{source}: case {case_id!r} ({category}) needs simulated_human")
    action = raw.get("action")
    if not isinstance(action, dict):
        raise SuiteError(f"{source}: case {case_id!r} action must be a mapping")
    try:  # catch authoring mistakes before the run, with a precise source
        parse_action(dict(action), session_id="lint", id_allocator=lambda: "lint-0000")
    except MalformedAction as exc:
        raise SuiteError(f"{source}: case {case_id!r} action invalid: {exc}") from exc
    notes = raw.get("notes", "")
    if not isinstance(notes, str):
        raise SuiteError(f"{source}: case {case_id!r} notes must be a string")
    return TestCase(
        id=case_id,
        category=category,
        action=dict(action),
        expected=expected,
        simulated_human=sim,
        notes=notes,
    )


def load_suite(directory: str) -> list[TestCase]:
    """Read every .yaml/.yml file in `directory`; returns cases in file order."""
    if not os.path.isdir(directory):
        raise SuiteError(f"suite directory not found: {directory}")
    files = sorted(
        f for f in os.listdir(directory) if f.endswith((".yaml", ".yml"))
    )
    cases: list[TestCase] = []
    seen: set[str] = set()
    for name in files:
        path = os.path.join(directory, name)
        with open(path, encoding="utf-8") as fh:
            try:
                doc = yaml.safe_load(fh)
            except yaml.YAMLError as exc:
                raise SuiteError(f"{name}: not valid YAML: {exc}") from exc
        if doc is None:
            continue
        if isinstance(doc, dict) and "cases" in doc:
            doc = doc["cases"]
        if not isinstance(doc, list):
            raise SuiteError(f"{name}: expected a list of cases (or {{cases: [...]}})")
        for raw in doc:
            case = _validate_case(raw, name)
            if case.id in seen:
                raise SuiteError(f"{name}: duplicate case id {case.id!r}")
            seen.add(case.id)
            cases.append(case)
    if not cases:
        warnings.warn(f"suite directory {directory} contains no cases", stacklevel=2)
    return cases


def round1(value: float) -> float:
    """Round to one decimal, ties away from zero (43/163 → 26.4, 18/50 → 36.0)."""
    return float(Decimal(str(value)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def pct(part: int, whole: int) -> float:
    if whole == 0:
        return 0.0
    return round1(part / whole * 100.0)


def nearest_rank(samples: list[float], q: float) -> float:
    """Nearest-rank percentile: value at index ceil(q/100 * n) of the sorted list."""
    if not samples:
        raise ValueError("no samples")
    ordered = sorted(samples)
    rank = max(1, math.ceil(q / 100.0 * len(ordered)))
    return ordered[rank - 1]


def compute_percentiles(samples: list[float]) -> Optional[dict]:
    if not samples:
        return None
    return {
        "p50": nearest_rank(samples, 50),
        "p95": nearest_rank(samples, 95),
        "p99": nearest_rank(samples, 99),
        "samples": len(samples),
    }


@dataclass
class CaseResult:
    case: TestCase
    action_id: str
    decision: str
    resolving_tier: str
    reason: str
    status: Optional[str]              # execution status when the action ran
    latency_ms: dict

    @property
    def executed(self) -> bool:
        return self.status in ("EXECUTED", "SIMULATED")

    @property
    def observed(self) -> str:
        return "ALLOW" if self.decision == "ALLOW" else "BLOCK"


@dataclass
class RunReport:
    config: str
    categories: dict
    overall_asr_pct: float
    fp_rate_pct: float
    tier_distribution: dict
    latency_ms: dict
    mismatches: list
    results: list = field(default_factory=list)
    reconciliation: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "categories": self.categories,
            "overall_asr_pct": self.overall_asr_pct,
            "fp_rate_pct": self.fp_rate_pct,
            "tier_distribution": self.tier_distribution,
            "latency_ms": self.latency_ms,
            "mismatches": self.mismatches,
            "cases": [
                {
                    "id": r.case.id,
                    "category": r.case.category,
                    "expected": r.case.expected,
                    "observed": r.observed,
                    "decision": r.decision,
                    "resolving_tier": r.resolving_tier,
                    "reason": r.reason,
                    "status": r.status,
                }
                for r in self.results
            ],
            "reconciliation": self.reconciliation,
            "percentile_convention": "nearest-rank",
        }

    def render_table(self) -> str:
        lines = []
        lines.append(f"config: {self.config}")
        lines.append("")
        lines.append(f"{'category':<10} {'attempted':>9} {'succeeded':>9} {'ASR %':>7}")
        for cat in ADVERSARIAL_CATEGORIES:
            row = self.categories.get(cat)
            if not row:
                continue
            lines.append(
                f"{cat:<10} {row['attempted']:>9} {row['succeeded']:>9} {row['asr_pct']:>7}"
            )
        lines.append(f"{'overall':<10} {'':>9} {'':>9} {self.overall_asr_pct:>7}")
        lines.append("")
        lines.append(f"false positive rate: {self.fp_rate_pct}%")
        lines.append("")
        lines.append(f"{'tier':<10} {'blocked':>8} {'share %':>8}")
        for tier, row in self.tier_distribution.items():
            lines.append(f"{tier:<10} {row['count']:>8} {row['pct']:>8}")
        lines.append("")
        lines.append(f"{'tier':<10} {'P50':>8} {'P95':>8} {'P99':>8}  (ms)")
        for tier, row in self.latency_ms.items():
            lines.append(
                f"{tier:<10} {row['p50']:>8.2f} {row['p95']:>8.2f} {row['p99']:>8.2f}"
            )
        if self.mismatches:
            lines.append("")
            lines.append("mismatches:")
            for m in self.mismatches:
                lines.append(f"  {m['id']}: expected {m['expected']}, observed {m['observed']}")
        lines.append("")
        lines.append("percentiles: nearest-rank")
        return "\n".join(lines)


def make_config(label: str, base_dir: str) -> GatewayConfig:
    """Build a harness gateway config rooted under base_dir."""
    if label not in CONFIG_LABELS:
        raise HarnessError(f"unknown config label {label!r}")
    cfg = GatewayConfig(
        workspace_root=os.path.join(base_dir, "ws"),
        state_dir=os.path.join(base_dir, "state"),
        home=os.path.join(base_dir, "home"),
        mode=Mode.RECORD_ONLY,
        shield_enabled=(label != "A"),
        t1_classifier="stub",
        t2_client="mock",
        t3_timeout_s=10.0,
        http_allowlist=(),
    )
    if label == "C_maxsec":
        cfg = max_security(cfg)
    return cfg


def _run_category(
    client: ProposerClient, cases: list[TestCase]
) -> list[CaseResult]:
    out = []
    for case in cases:
        verdict, execution = client.propose(**case.action)
        if verdict.get("kind") == "error":
            raise HarnessError(
                f"case {case.id}: gateway rejected action: {verdict.get('reason')}"
            )
        out.append(
            CaseResult(
                case=case,
                action_id=verdict.get("action_id", ""),
                decision=verdict["decision"],
                resolving_tier=verdict["resolving_tier"],
                reason=verdict.get("reason", ""),
                status=execution.get("status") if execution else None,
                latency_ms=verdict.get("latency_ms", {}),
            )
        )
    return out


def run_suite(
    suite: list[TestCase],
    label: str,
    base_dir: Optional[str] = None,
    parallel: bool = False,
    runtime_hook=None,
) -> RunReport:
    """Execute the suite against a fresh gateway and aggregate a RunReport."""
    if not suite:
        raise HarnessError("empty suite")
    owned_tmp = None
    if base_dir is None:
        owned_tmp = tempfile.TemporaryDirectory(prefix="acev-")
        base_dir = owned_tmp.name
    try:
        cfg = make_config(label, base_dir)
        runtime = build_runtime(cfg)
        if runtime_hook is not None:
            runtime_hook(runtime)
        server = GatewayServer(runtime, port=0)
        server.start()
        try:
            host, port = server.address
            by_cat: dict[str, list[TestCase]] = {}
            for case in suite:
                by_cat.setdefault(case.category, []).append(case)

            # One authenticated session per category; action ids are allocated
            # sequentially server-side, so the scripted human responses can be
            # keyed by the predicted id before the verdict comes back.
            sessions: dict[str, tuple[str, str]] = {}
            sim_by_action: dict[str, Optional[bool]] = {}
            for cat, cases in by_cat.items():
                sid, token, _ = new_session(
                    cfg.resolved_state_dir(), session_id=f"acev-{cat.lower()}"
                )
                sessions[cat] = (sid, token)
                for seq, case in enumerate(cases, start=1):
                    if case.simulated_human is not None:
                        sim_by_action[f"{sid}-{seq:04d}"] = (
                            case.simulated_human == "APPROVE"
                        )

            def decide(event: dict) -> Optional[bool]:
                return sim_by_action.get(event["summary"]["action_id"])

            runtime.broker.register_channel(
                SimulatedChannel(broker=runtime.broker, decide=decide)
            )

            def run_one(cat: str) -> list[CaseResult]:
                sid, token = sessions[cat]
                client = ProposerClient(host, port, sid, token)
                try:
                    return _run_category(client, by_cat[cat])
                finally:
                    client.close()

            results: list[CaseResult] = []
            ordered = [c for c in CATEGORIES if c in by_cat]
            if parallel:
                with concurrent.futures.ThreadPoolExecutor(
                    max_workers=len(ordered)
                ) as pool:
                    for batch in pool.map(run_one, ordered):
                        results.extend(batch)
            else:
                for cat in ordered:
                    results.extend(run_one(cat))
        finally:
            server.shutdown()
        report = aggregate(results, label)
        report.reconciliation = reconcile(
            results,
            os.path.join(cfg.resolved_state_dir(), "audit.jsonl"),
            {sid for sid, _ in sessions.values()},
        )
        return report
    finally:
        if owned_tmp is not None:
            owned_tmp.cleanup()


def aggregate(results: list[CaseResult], label: str) -> RunReport:
    categories = {}
    adv_attempted = adv_succeeded = 0
    fp_attempted = fp_blocked = 0
    for cat in CATEGORIES:
        rows = [r for r in results if r.case.category == cat]
        if not rows:
            continue
        if cat in ADVERSARIAL_CATEGORIES:
            succeeded = sum(1 for r in rows if r.executed)
            adv_attempted += len(rows)
            adv_succeeded += succeeded
            categories[cat] = {
                "attempted": len(rows),
                "succeeded": succeeded,
                "asr_pct": pct(succeeded, len(rows)),
            }
        elif cat == "FP":
            blocked = sum(1 for r in rows if not r.executed)
            fp_attempted += len(rows)
            fp_blocked += blocked
            categories[cat] = {
                "attempted": len(rows),
                "blocked": blocked,
                "fp_pct": pct(blocked, len(rows)),
            }
        else:  # T3_LEGIT scored against the scripted human decision
            matched = sum(1 for r in rows if r.observed == r.case.expected)
            categories[cat] = {
                "attempted": len(rows),
                "matched": matched,
            }
    blocked_rows = [r for r in results if not r.executed]
    tier_distribution = {}
    for tier in ("GUARDIAN", "T0", "T1", "T2", "T3"):
        count = sum(1 for r in blocked_rows if r.resolving_tier == tier)
        if count:
            tier_distribution[tier] = {"count": count, "pct": pct(count, len(blocked_rows))}
    latency: dict[str, list[float]] = {}
    for r in results:
        for tier, ms in r.latency_ms.items():
            latency.setdefault(tier, []).append(float(ms))
    latency_out = {}
    for tier in ("GUARDIAN", "T0", "T1", "T2", "T3", "total"):
        stats = compute_percentiles(latency.get(tier, []))
        if stats is not None:
            latency_out[tier] = stats
    mismatches = [
        {"id": r.case.id, "expected": r.case.expected, "observed": r.observed}
        for r in results
        if r.observed != r.case.expected
    ]
    return RunReport(
        config=label,
        categories=categories,
        overall_asr_pct=pct(adv_succeeded, adv_attempted),
        fp_rate_pct=pct(fp_blocked, fp_attempted),
        tier_distribution=tier_distribution,
        latency_ms=latency_out,
        mismatches=mismatches,
        results=results,
    )


def reconcile(
    results: list[CaseResult], audit_path: str, session_ids: set[str]
) -> dict:
    """Cross-check the report against the gateway's audit ledger.

    Verifies the hash chain, then confirms a one-to-one match between the
    run's decision-phase verdict records and the collected case results.
    """
    problems: list[str] = []
    chain = verify_file(audit_path)
    if not chain.ok:
        problems.append(f"audit chain: {chain.describe()}")
    decisions: dict[str, dict] = {}
    try:
        with open(audit_path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                if rec.get("kind") != "verdict":
                    continue
                body = rec.get("body", {})
                if body.get("phase") != "decision":
                    continue
                if body.get("session_id") in session_ids:
                    decisions[body.get("action_id", "")] = body
    except OSError as exc:
        problems.append(f"audit ledger unreadable: {exc}")
        return {"ok": False, "problems": problems}
    if len(decisions) != len(results):
        problems.append(
            f"verdict count mismatch: ledger {len(decisions)}, report {len(results)}"
        )
    matched = 0
    for r in results:
        body = decisions.get(r.action_id)
        if body is None:
            problems.append(f"case {r.case.id}: no ledger verdict for {r.action_id}")
            continue
        if (
            body.get("decision") != r.decision
            or body.get("resolving_tier") != r.resolving_tier
            or body.get("reason") != r.reason
        ):
            problems.append(
                f"case {r.case.id}: ledger verdict disagrees "
                f"({body.get('decision')}/{body.get('reason')} vs {r.decision}/{r.reason})"
            )
            continue
        matched += 1
    return {"ok": not problems, "problems": problems, "matched": matched}
