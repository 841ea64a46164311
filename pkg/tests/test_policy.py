import pytest
from hypothesis import given, strategies as st

from actiongate.config import default_text
from actiongate.model import ActionType, TierId, parse_action
from actiongate.policy import (
    Policy,
    PolicyError,
    T0Kind,
    evaluate_t0,
    load_policy,
)
from conftest import BASELINE_POLICY

HOME = "/home/u"
ROOT = "/home/u/ws"


def act(action_type, target="", payload=""):
    return parse_action(
        {"action_type": action_type, "target": target, "payload": payload},
        session_id="s",
        id_allocator=lambda: "s-0001",
    )


@pytest.fixture(scope="module")
def baseline():
    return load_policy(BASELINE_POLICY, home=HOME, workspace_root=ROOT)


def test_baseline_loads_with_expected_section_counts(baseline):
    by_section = {}
    for r in baseline.rules:
        by_section.setdefault(r.section, []).append(r.name)
    assert by_section == {
        "deny": ["block_sensitive_system_paths", "block_identity_deletion"],
        "verify": ["evaluate_shell_commands", "evaluate_soul_modification"],
        "allow": ["allow_workspace_reads"],
    }


def test_ssh_key_read_is_denied(baseline):
    res = evaluate_t0(baseline, act("read_file", "~/.ssh/id_rsa"))
    assert res.kind is T0Kind.DENY
    assert res.rule == "block_sensitive_system_paths"


def test_shell_command_routes_to_tier1(baseline):
    res = evaluate_t0(baseline, act("execute_command", payload="ls"))
    assert res.kind is T0Kind.VERIFY
    assert res.rule == "evaluate_shell_commands"
    assert res.tier is TierId.T1


def test_identity_write_routes_to_tier2(baseline):
    res = evaluate_t0(baseline, act("write_file", "./notes/SOUL.md", "x"))
    assert res.kind is T0Kind.VERIFY
    assert res.rule == "evaluate_soul_modification"
    assert res.tier is TierId.T2


def test_workspace_listing_is_allowed(baseline):
    res = evaluate_t0(baseline, act("list_directory", "./src"))
    assert res.kind is T0Kind.ALLOW
    assert res.rule == "allow_workspace_reads"


def test_unmатched_type_is_no_match(baseline):
    res = evaluate_t0(baseline, act("send_email", "bob@example.com", "hi"))
    assert res.kind is T0Kind.NO_MATCH


def test_deny_precedes_allow_for_the_same_target():
    policy = load_policy(
        """
deny:
  - name: no_env
    action_types: [read_file]
    paths: ["**/.env"]
allow:
  - name: all_reads
    action_types: [read_file]
""",
        home=HOME,
        workspace_root=ROOT,
    )
    res = evaluate_t0(policy, act("read_file", "./conf/.env"))
    assert res.kind is T0Kind.DENY and res.rule == "no_env"


def test_first_match_wins_within_a_section():
    policy = load_policy(
        """
deny:
  - name: first
    action_types: [delete_file]
    paths: ["/data/**"]
  - name: second
    action_types: [delete_file]
    paths: ["/data/x.txt"]
""",
        home=HOME,
        workspace_root=ROOT,
    )
    res = evaluate_t0(policy, act("delete_file", "/data/x.txt"))
    assert res.rule == "first"


def test_empty_action_types_matches_every_type():
    policy = load_policy(
        """
deny:
  - name: lockdown
    action_types: []
    paths: ["/vault/**"]
""",
        home=HOME,
        workspace_root=ROOT,
    )
    for at in ActionType:
        res = evaluate_t0(policy, act(at.value, "/vault/a", "x"))
        assert res.kind is T0Kind.DENY, at


def test_empty_document_matches_nothing():
    policy = load_policy("", home=HOME, workspace_root=ROOT)
    assert policy.rules == ()
    assert evaluate_t0(policy, act("read_file", "./x")).kind is T0Kind.NO_MATCH


@pytest.mark.parametrize(
    "text,fragment",
    [
        ("deny: {not: a list}", "must be a list"),
        ("deny:\n  - name: x\n    action_types: [fly]", "unknown action type"),
        ("verify:\n  - name: v\n    action_types: [execute_command]", "tier_override"),
        (
            "allow:\n  - name: a\n    tier_override: 1\n    action_types: [read_file]",
            "only valid on verify",
        ),
        ("deny:\n  - name: x\n    frobnicate: true", "unknown rule keys"),
        ("deny:\n  - name: x\n  - name: x", "duplicate rule name"),
        ("badsection: []", "unknown policy sections"),
        ("- just\n- a\n- list", "mapping of sections"),
        ("deny: [[nested]]", "must be mappings"),
        (":\n  - broken yaml::\n -", "not valid YAML"),
    ],
)
def test_malformed_policies_refuse_to_load(text, fragment):
    with pytest.raises(PolicyError) as err:
        load_policy(text, home=HOME, workspace_root=ROOT)
    assert fragment in str(err.value)


def test_shipped_default_policy_loads(tmp_path):
    policy = load_policy(default_text("policy.yaml"), home=HOME, workspace_root=ROOT)
    sections = [r.section for r in policy.rules]
    assert sections == sorted(sections, key=("deny", "verify", "allow").index)
    assert policy.rule_named("block_sensitive_system_paths") is not None
    # gap-closure rules beyond the baseline
    assert policy.rule_named("block_credential_material") is not None
    res = evaluate_t0(policy, act("read_file", "/etc/passwd"))
    assert res.kind is T0Kind.DENY


def test_shipped_allow_rule_is_workspace_scoped():
    policy = load_policy(default_text("policy.yaml"), home=HOME, workspace_root=ROOT)
    inside = evaluate_t0(policy, act("read_file", "./docs/readme.md"))
    assert inside.kind is T0Kind.ALLOW
    outside = evaluate_t0(policy, act("read_file", "/opt/other.txt"))
    assert outside.kind is T0Kind.NO_MATCH


@given(p1=st.text(max_size=80), p2=st.text(max_size=80))
def test_tier0_never_reads_command_content(p1, p2):
    policy = load_policy(BASELINE_POLICY, home=HOME, workspace_root=ROOT)
    r1 = evaluate_t0(policy, act("execute_command", "", p1))
    r2 = evaluate_t0(policy, act("execute_command", "", p2))
    assert (r1.kind, r1.rule, r1.tier) == (r2.kind, r2.rule, r2.tier)


def test_evaluation_is_deterministic(baseline):
    a = act("write_file", "./IDENTITY.md", "x")
    results = {(evaluate_t0(baseline, a).kind, evaluate_t0(baseline, a).rule) for _ in range(5)}
    assert len(results) == 1
