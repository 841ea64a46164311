"""Pre-destruction snapshot store ("what was there before the gate let a
destructive action through").

Blobs are content-addressed by SHA-256, stored under
<state>/chronicle/objects/<first-two-hex>/<digest>, with an append-only
JSONL index mapping (snapshot_id, original path, action id, timestamp).
Identical content dedupes to one blob. Directories snapshot as deterministic
tar archives (sorted entries, zeroed timestamps) so equal trees share a blob.

Capture happens before the destructive operation and a capture failure must
abort that operation (the pipeline maps ChronicleError to a BLOCK).
Rollback first captures whatever is at the destination now, so rollbacks are
themselves undoable, and refuses any destination the caller's guard
predicate rejects — the CLI wires the guardian in here so a rollback can
never be aimed at the gateway's own state.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import tarfile
import threading
from dataclasses import dataclass
from typing import Callable, Optional

from .model import now_ms

DEFAULT_MAX_COUNT = 100
DEFAULT_MAX_AGE_DAYS = 30

_DAY_MS = 86_400_000


class ChronicleError(Exception):
    pass


@dataclass(frozen=True)
class SnapshotRecord:
    snapshot_id: str
    path: str
    action_id: str
    ts: int
    kind: str         # file | dir
    size: int

    def to_json(self) -> dict:
        return {
            "snapshot_id": self.snapshot_id,
            "path": self.path,
            "action_id": self.action_id,
            "ts": self.ts,
            "kind": self.kind,
            "size": self.size,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SnapshotRecord":
        return cls(
            snapshot_id=obj["snapshot_id"],
            path=obj["path"],
            action_id=obj["action_id"],
            ts=obj["ts"],
            kind=obj["kind"],
            size=obj["size"],
        )


@dataclass(frozen=True)
class PruneReport:
    removed_records: int
    removed_blobs: int
    kept: int


def _tar_directory(path: str) -> bytes:
    """Deterministic tar of a directory tree (sorted, times zeroed)."""
    buf = io.BytesIO()
    with tarfile.open(fileobj=buf, mode="w", format=tarfile.PAX_FORMAT) as tar:
        entries: list[str] = []
        for root, dirs, files in os.walk(path):
            dirs.sort()
            for name in sorted(files) + dirs:
                entries.append(os.path.join(root, name))
        for entry in sorted(entries):
            rel = os.path.relpath(entry, path)
            info = tar.gettarinfo(entry, arcname=rel)
            if info is None:
                continue
            info.mtime = 0
            info.uid = info.gid = 0
            info.uname = info.gname = ""
            if info.isfile():
                with open(entry, "rb") as fh:
                    tar.addfile(info, fh)
            else:
                tar.addfile(info)
    return buf.getvalue()


class Chronicle:
    def __init__(self, state_dir: str):
        self.root = os.path.join(state_dir, "chronicle")
        self.objects = os.path.join(self.root, "objects")
        self.index_path = os.path.join(self.root, "index.jsonl")
        os.makedirs(self.objects, exist_ok=True)
        self._lock = threading.Lock()

    # -- blob store ----------------------------------------------------

    def _blob_path(self, snapshot_id: str) -> str:
        return os.path.join(self.objects, snapshot_id[:2], snapshot_id)

    def has_blob(self, snapshot_id: str) -> bool:
        return os.path.exists(self._blob_path(snapshot_id))

    def read_blob(self, snapshot_id: str) -> bytes:
        try:
            with open(self._blob_path(snapshot_id), "rb") as fh:
                return fh.read()
        except OSError as exc:
            raise ChronicleError(f"missing blob {snapshot_id[:12]}: {exc}") from exc

    def _write_blob(self, snapshot_id: str, content: bytes) -> None:
        dest = self._blob_path(snapshot_id)
        if os.path.exists(dest):
            return  # content-addressed dedupe
        os.makedirs(os.path.dirname(dest), exist_ok=True)
        tmp = dest + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(content)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, dest)

    def _append_index(self, record: SnapshotRecord) -> None:
        with open(self.index_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record.to_json(), sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def records(self) -> list[SnapshotRecord]:
        try:
            with open(self.index_path, encoding="utf-8") as fh:
                return [
                    SnapshotRecord.from_json(json.loads(ln)) for ln in fh if ln.strip()
                ]
        except FileNotFoundError:
            return []
        except (OSError, ValueError, KeyError) as exc:
            raise ChronicleError(f"index unreadable: {exc}") from exc

    # -- capture -------------------------------------------------------

    def capture(self, path: str, action_id: str) -> Optional[SnapshotRecord]:
        """Snapshot whatever exists at path; None when nothing does."""
        with self._lock:
            try:
                if not os.path.lexists(path):
                    return None
                if os.path.isdir(path) and not os.path.islink(path):
                    content = _tar_directory(path)
                    kind = "dir"
                else:
                    with open(path, "rb") as fh:
                        content = fh.read()
                    kind = "file"
            except (OSError, ValueError) as exc:
                raise ChronicleError(f"capture failed for {path}: {exc}") from exc
            snapshot_id = hashlib.sha256(content).hexdigest()
            record = SnapshotRecord(
                snapshot_id=snapshot_id,
                path=os.path.abspath(path),
                action_id=action_id,
                ts=now_ms(),
                kind=kind,
                size=len(content),
            )
            try:
                self._write_blob(snapshot_id, content)
                self._append_index(record)
            except OSError as exc:
                raise ChronicleError(f"store write failed: {exc}") from exc
            return record

    # -- rollback ------------------------------------------------------

    def rollback(
        self,
        snapshot_id: str,
        dest: Optional[str] = None,
        refuse: Optional[Callable[[str], str]] = None,
    ) -> SnapshotRecord:
        """Restore a snapshot to dest (default: its original path).

        refuse(path) returns a non-empty reason string to forbid the
        destination. The current destination state is captured first.
        """
        matches = [r for r in self.records() if r.snapshot_id.startswith(snapshot_id)]
        if not matches:
            raise ChronicleError(f"no snapshot matches {snapshot_id!r}")
        record = matches[-1]
        target = dest or record.path
        if refuse is not None:
            why = refuse(target)
            if why:
                raise ChronicleError(f"rollback destination refused: {why}")
        content = self.read_blob(record.snapshot_id)
        self.capture(target, action_id=f"rollback:{record.snapshot_id[:12]}")
        try:
            if record.kind == "dir":
                os.makedirs(target, exist_ok=True)
                with tarfile.open(fileobj=io.BytesIO(content)) as tar:
                    if hasattr(tarfile, "data_filter"):
                        tar.extractall(target, filter="data")
                    else:  # pre-filter Python: members come from our own store
                        tar.extractall(target)
            else:
                os.makedirs(os.path.dirname(target) or ".", exist_ok=True)
                tmp = target + ".rollback-tmp"
                with open(tmp, "wb") as fh:
                    fh.write(content)
                    fh.flush()
                    os.fsync(fh.fileno())
                os.replace(tmp, target)
        except OSError as exc:
            raise ChronicleError(f"rollback write failed: {exc}") from exc
        return record

    # -- retention -----------------------------------------------------

    def prune(
        self,
        max_count: int = DEFAULT_MAX_COUNT,
        max_age_days: int = DEFAULT_MAX_AGE_DAYS,
        now: Optional[int] = None,
    ) -> PruneReport:
        """Drop oldest records beyond max_count or older than max_age_days;
        blobs are removed only once nothing references them."""
        with self._lock:
            records = self.records()
            now_val = now_ms() if now is None else now
            cutoff = now_val - max_age_days * _DAY_MS
            by_age = sorted(records, key=lambda r: r.ts)
            keep: list[SnapshotRecord] = [r for r in by_age if r.ts >= cutoff]
            if len(keep) > max_count:
                keep = keep[-max_count:]
            removed = [r for r in records if r not in keep]
            if not removed:
                return PruneReport(0, 0, len(records))
            kept_ids = {r.snapshot_id for r in keep}
            removed_blobs = 0
            for rid in {r.snapshot_id for r in removed} - kept_ids:
                try:
                    os.unlink(self._blob_path(rid))
                    removed_blobs += 1
                except FileNotFoundError:
                    pass
            # keep original order for the surviving records
            survivors = [r for r in records if r in keep]
            tmp = self.index_path + ".tmp"
            with open(tmp, "w", encoding="utf-8") as fh:
                for r in survivors:
                    fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, self.index_path)
            return PruneReport(len(removed), removed_blobs, len(survivors))
