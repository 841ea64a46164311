"""Shared fixtures: a fully built gateway runtime in a temp tree, helpers for
driving the pipeline directly, and a terminal summary that prints one
pass/fail line per acceptance check."""
import pytest

from actiongate.config import GatewayConfig
from actiongate.executors import Mode
from actiongate.gateway import build_runtime
from actiongate.ifc import TaintMap
from actiongate.model import Session, parse_action


# Baseline three-section policy used by the conformance checks: two deny
# rules, two verify rules, one allow rule (the allow rule deliberately has
# no paths key and therefore matches every target).
BASELINE_POLICY = """\
deny:
  - name: block_sensitive_system_paths
    action_types: [read_file, write_file, delete_file]
    paths: ["~/.ssh/**", "~/.aws/**", "/etc/shadow"]
  - name: block_identity_deletion
    action_types: [delete_file]
    paths: ["**/SOUL.md", "**/IDENTITY.md"]

verify:
  - name: evaluate_shell_commands
    action_types: [execute_command]
    tier_override: 1
  - name: evaluate_soul_modification
    action_types: [write_file]
    paths: ["**/SOUL.md", "**/IDENTITY.md"]
    tier_override: 2

allow:
  - name: allow_workspace_reads
    action_types: [read_file, list_directory, search_files]
"""


class GateFixture:
    """A built runtime plus shortcuts for pipeline-level tests."""

    def __init__(self, runtime, base):
        self.runtime = runtime
        self.base = base
        self.ws = str(base / "ws")
        self.state = str(base / "state")
        self._sessions = {}

    def session(self, session_id="t-session"):
        sess = self._sessions.get(session_id)
        if sess is None:
            sess = Session(
                session_id=session_id,
                auth_token="test-token",
                taint_map=TaintMap(),
                created_at=0,
            )
            self._sessions[session_id] = sess
        return sess

    def action(self, session, **raw):
        return parse_action(
            raw, session_id=session.session_id, id_allocator=session.next_action_id
        )

    def propose(self, session, **raw):
        return self.runtime.pipeline.process(session, self.action(session, **raw))


def build_gate(base, **overrides):
    kwargs = dict(
        workspace_root=str(base / "ws"),
        state_dir=str(base / "state"),
        home=str(base / "home"),
        mode=Mode.RECORD_ONLY,
        shield_enabled=True,
        t1_classifier="stub",
        t2_client="mock",
        t3_timeout_s=0.5,
        http_allowlist=(),
    )
    kwargs.update(overrides)
    cfg = GatewayConfig(**kwargs)
    return GateFixture(build_runtime(cfg), base)


@pytest.fixture
def gate(tmp_path):
    fx = build_gate(tmp_path)
    yield fx
    fx.runtime.audit.close()


@pytest.fixture
def live_gate(tmp_path):
    fx = build_gate(tmp_path, mode=Mode.LIVE)
    yield fx
    fx.runtime.audit.close()


# --- acceptance summary -------------------------------------------------

_acceptance_lines = []


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "criterion(label): names the acceptance check a test verifies"
    )


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when != "call":
        return
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        _acceptance_lines.append((marker.args[0], status))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance_lines:
        return
    terminalreporter.write_sep("-", "acceptance checks")
    for label, status in _acceptance_lines:
        terminalreporter.write_line(f"{status}  {label}")
