"""Append-only audit ledger with a SHA-256 hash chain.

Each JSONL record carries (seq, ts, kind, body, prev_hash, hash) where hash
covers the canonical JSON encoding of everything before it and prev_hash is
the previous record's hash (64 zeros for genesis). Sequence numbers start at
1 and increment by 1, so deleting or reordering records is detectable even
though each record individually still hashes clean.

Appends are durable (flush + fsync) before the caller proceeds. Any append
failure latches the ledger into a failed state that refuses further records;
the gateway turns that into BLOCK("audit_failure") — no unaudited execution.
"""
from __future__ import annotations

import hashlib
import json
import os
import threading
from dataclasses import dataclass
from typing import Iterable, Optional

from .model import now_ms

GENESIS = "0" * 64

KINDS = frozenset(
    {
        "action_proposed",
        "tier_decision",
        "verdict",
        "ifc_event",
        "snapshot",
        "approval_event",
        "session_event",
    }
)


class AuditError(Exception):
    pass


def canonical(obj: object) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode(
        "utf-8"
    )


def record_hash(seq: int, ts: int, kind: str, body: dict, prev_hash: str) -> str:
    material = canonical({"seq": seq, "ts": ts, "kind": kind, "body": body, "prev_hash": prev_hash})
    return hashlib.sha256(material).hexdigest()


@dataclass(frozen=True)
class VerifyResult:
    ok: bool
    first_bad: Optional[int]    # seq position of the first offending record
    total: int

    def describe(self) -> str:
        if self.ok:
            return f"OK ({self.total} records)"
        return f"FIRST_BAD {self.first_bad} ({self.total} records)"


def verify_lines(lines: Iterable[str]) -> VerifyResult:
    prev = GENESIS
    expected_seq = 1
    total = 0
    first_bad: Optional[int] = None
    for raw in lines:
        raw = raw.strip()
        if not raw:
            continue
        total += 1
        if first_bad is not None:
            continue
        try:
            rec = json.loads(raw)
            seq = rec["seq"]
            stored = rec["hash"]
            computed = record_hash(seq, rec["ts"], rec["kind"], rec["body"], rec["prev_hash"])
        except (ValueError, KeyError, TypeError):
            first_bad = expected_seq
            continue
        if seq != expected_seq or rec["prev_hash"] != prev or stored != computed:
            first_bad = expected_seq
            continue
        prev = stored
        expected_seq += 1
    return VerifyResult(ok=first_bad is None, first_bad=first_bad, total=total)


def verify_file(path: str) -> VerifyResult:
    with open(path, encoding="utf-8") as fh:
        return verify_lines(fh)


class AuditLog:
    def __init__(self, path: str):
        self.path = path
        self._lock = threading.Lock()
        self._failed = False
        self._seq = 0
        self._prev = GENESIS
        if os.path.exists(path):
            result = verify_file(path)
            if not result.ok:
                raise AuditError(
                    f"existing ledger fails verification at seq {result.first_bad}"
                )
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        rec = json.loads(line)
                        self._seq = rec["seq"]
                        self._prev = rec["hash"]
        self._fh = open(path, "a", encoding="utf-8")

    @property
    def failed(self) -> bool:
        return self._failed

    @property
    def seq(self) -> int:
        return self._seq

    def append(self, kind: str, body: dict) -> dict:
        with self._lock:
            if self._failed:
                raise AuditError("ledger is in failed state; refusing records")
            if kind not in KINDS:
                self._failed = True
                raise AuditError(f"unknown record kind {kind!r}")
            seq = self._seq + 1
            ts = now_ms()
            try:
                h = record_hash(seq, ts, kind, body, self._prev)
                record = {
                    "seq": seq,
                    "ts": ts,
                    "kind": kind,
                    "body": body,
                    "prev_hash": self._prev,
                    "hash": h,
                }
                self._fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
                self._fh.flush()
                os.fsync(self._fh.fileno())
            except Exception as exc:
                self._failed = True
                raise AuditError(f"append failed: {exc}") from exc
            self._seq = seq
            self._prev = h
            return record

    def tail(self, n: int = 20) -> list[dict]:
        with self._lock:
            try:
                with open(self.path, encoding="utf-8") as fh:
                    lines = [ln for ln in fh if ln.strip()]
            except OSError:
                return []
        return [json.loads(ln) for ln in lines[-n:]]

    def close(self) -> None:
        with self._lock:
            try:
                self._fh.close()
            except OSError:
                pass
