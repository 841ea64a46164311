import base64

import pytest
from hypothesis import given, strategies as st

from actiongate.model import (
    Action,
    ActionType,
    Decision,
    MalformedAction,
    Session,
    TierId,
    Verdict,
    parse_action,
    serialize_action,
)
from actiongate.ifc import TaintMap


def test_parse_action_basic_fields():
    a = parse_action(
        {"action_type": "write_file", "target": "./x.txt", "payload": "hi"},
        session_id="s1",
        id_allocator=lambda: "s1-0001",
    )
    assert a.action_type is ActionType.WRITE_FILE
    assert a.target == "./x.txt"
    assert a.payload == b"hi"
    assert a.id == "s1-0001"
    assert a.session_id == "s1"
    assert a.taint == frozenset()


def test_parse_action_accepts_b64_payload():
    raw = base64.b64encode(b"\x00\x01\xff").decode()
    a = parse_action({"action_type": "write_file", "payload_b64": raw})
    assert a.payload == b"\x00\x01\xff"


def test_parse_action_missing_target_is_empty():
    a = parse_action({"action_type": "execute_command", "payload": "ls"})
    assert a.target == ""


@pytest.mark.parametrize(
    "raw",
    [
        {},
        {"action_type": "launch_missiles"},
        {"action_type": "read_file", "target": 7},
        {"action_type": "read_file", "payload": 7},
        {"action_type": "read_file", "payload_b64": "not base64!!"},
        "not a mapping",
    ],
)
def test_parse_action_rejects_malformed(raw):
    with pytest.raises(MalformedAction):
        parse_action(raw)


def test_serialize_round_trips_text_payload():
    a = parse_action(
        {"action_type": "send_email", "target": "a@b", "payload": "hello"},
        session_id="s",
        id_allocator=lambda: "s-0001",
    )
    again = parse_action(serialize_action(a), session_id="s")
    assert (again.action_type, again.target, again.payload) == (
        a.action_type,
        a.target,
        a.payload,
    )


def test_serialize_uses_b64_for_binary_payload():
    a = Action(
        id="x",
        session_id="s",
        action_type=ActionType.WRITE_FILE,
        target="./f",
        payload=b"\xff\xfe",
    )
    wire = serialize_action(a)
    assert "payload" not in wire and "payload_b64" in wire
    assert parse_action(wire).payload == b"\xff\xfe"


@given(st.binary(max_size=512))
def test_serialize_parse_round_trip_any_payload(blob):
    a = Action(
        id="x", session_id="s", action_type=ActionType.WRITE_FILE, target="./f", payload=blob
    )
    assert parse_action(serialize_action(a)).payload == blob


def test_session_action_ids_are_sequential():
    s = Session(session_id="abc", auth_token="t", taint_map=TaintMap(), created_at=0)
    assert s.next_action_id() == "abc-0001"
    assert s.next_action_id() == "abc-0002"


def test_tier_ordering_matches_escalation():
    assert TierId.GUARDIAN < TierId.T0 < TierId.T1 < TierId.T2 < TierId.T3
    assert TierId.T2.label == "T2"


def test_verdict_wire_shape():
    v = Verdict(
        action_id="a-1",
        decision=Decision.BLOCK,
        resolving_tier=TierId.T1,
        reason="rule_x",
        detail="d",
        latency_ms={"total": 1.0},
    )
    wire = v.to_wire()
    assert wire == {
        "action_id": "a-1",
        "decision": "BLOCK",
        "resolving_tier": "T1",
        "reason": "rule_x",
        "detail": "d",
        "latency_ms": {"total": 1.0},
    }
