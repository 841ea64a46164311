"""Self-protection layer that runs before every tier.

The protection table is compiled in: nothing on the wire, in config, or in
policy can change it. Identity-style files are matched by filename anywhere
on disk; the gateway's own state (policy file, canary token, audit ledger,
session/state store) is matched by resolved path, so symlinks and case games
do not evade it.

Write detection goes beyond write_file: deletes, both ends of a move, copy
destinations, directory-overwrite moves, and shell write targets parsed out
of execute_command payloads (``>``, ``>>``, ``tee``, ``sed -i``) all count.
"""
from __future__ import annotations

import os
import re
import shlex
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional

from .model import Action, ActionType, TierId


class ProtectionLevel(Enum):
    READ_ONLY = "ReadOnly"
    ESCALATE_TIER2 = "EscalateTier2"
    WRITE_TIER1_MIN = "WriteTier1Min"
    FULL_BLOCK = "FullBlock"


class GuardKind(Enum):
    PASS = "pass"
    BLOCK = "block"
    FORCE_TIER = "force_tier"


@dataclass(frozen=True)
class GuardResult:
    kind: GuardKind
    tier: Optional[TierId] = None
    reason: str = ""
    detail: str = ""


PASS = GuardResult(GuardKind.PASS)

# Filename-classed protection entries. Compile-time constant by design:
# there is deliberately no way to configure this table.
_NAME_LEVELS: dict[str, ProtectionLevel] = {
    "soul.md": ProtectionLevel.READ_ONLY,
    "identity.md": ProtectionLevel.READ_ONLY,
    "tools.md": ProtectionLevel.READ_ONLY,
    "boot.md": ProtectionLevel.READ_ONLY,
    "agents.md": ProtectionLevel.ESCALATE_TIER2,
    "heartbeat.md": ProtectionLevel.ESCALATE_TIER2,
    "memory.md": ProtectionLevel.WRITE_TIER1_MIN,
    "user.md": ProtectionLevel.WRITE_TIER1_MIN,
}

_URL_RE = re.compile(r"^[a-z][a-z0-9+.\-]*://", re.IGNORECASE)
_SPLIT_RE = re.compile(r"\|\||&&|[|;\n]")
_REDIR_RE = re.compile(r"(?:^|[\s\d])(?:>>|>|&>)\s*([^\s;|&<>]+)")

_READ = "read"
_WRITE = "write"


class _Unresolvable(Exception):
    pass


def shell_write_targets(command: str) -> list[str]:
    """File paths a shell command writes to via redirection, tee, or sed -i."""
    targets: list[str] = []
    for part in _SPLIT_RE.split(command or ""):
        part = part.strip()
        if not part:
            continue
        try:
            toks = shlex.split(part)
        except ValueError:
            # unbalanced quoting: fall back to a raw redirection scan
            targets.extend(m.group(1) for m in _REDIR_RE.finditer(part))
            continue
        i = 0
        prog = toks[0] if toks else ""
        while i < len(toks):
            t = toks[i]
            stripped = t.lstrip("0123456789")
            if stripped in (">", ">>", "&>", "&>>"):
                if i + 1 < len(toks):
                    targets.append(toks[i + 1])
                    i += 2
                    continue
            elif stripped.startswith((">>", ">", "&>")) and len(stripped) > 1:
                cand = stripped.lstrip(">&")
                if cand:
                    targets.append(cand)
            i += 1
        if prog == "tee" or prog.endswith("/tee"):
            targets.extend(t for t in toks[1:] if not t.startswith("-"))
        if (prog == "sed" or prog.endswith("/sed")) and any(
            t == "-i" or t.startswith("-i.") for t in toks[1:]
        ):
            files = [t for t in toks[1:] if not t.startswith("-")]
            if files:
                targets.extend(files[1:] or files[-1:])  # first non-flag is the script
    return targets


class Guardian:
    def __init__(
        self,
        state_dir: str,
        workspace_root: str,
        home: str,
        policy_path: Optional[str] = None,
    ) -> None:
        self._root = os.path.realpath(workspace_root)
        self._home = os.path.realpath(os.path.expanduser(home)) if home else self._root
        self._state = os.path.realpath(state_dir)
        self._policy = os.path.realpath(policy_path) if policy_path else None

    # -- path handling -------------------------------------------------

    def _absolute(self, raw: str) -> str:
        p = raw.strip().replace("\\", "/")
        if p == "~":
            p = self._home
        elif p.startswith("~/"):
            p = os.path.join(self._home, p[2:])
        if not os.path.isabs(p):
            p = os.path.join(self._root, p)
        return os.path.normpath(p)

    def _resolve(self, raw: str) -> str:
        try:
            raw.encode("utf-8")
        except UnicodeEncodeError:
            raise _Unresolvable(f"undecodable path {raw!r}") from None
        p = self._absolute(raw)
        try:
            return os.path.realpath(p, strict=True)
        except FileNotFoundError:
            if os.path.islink(p):
                raise _Unresolvable(f"dangling symlink {raw}") from None
            parent, base = os.path.split(p)
            try:
                return os.path.join(os.path.realpath(parent or "/"), base)
            except (OSError, ValueError) as exc:
                raise _Unresolvable(str(exc)) from None
        except (OSError, ValueError) as exc:
            raise _Unresolvable(str(exc)) from None

    def _level_of(self, resolved: str) -> Optional[ProtectionLevel]:
        low = resolved.lower()
        state_low = self._state.lower()
        if low == state_low or low.startswith(state_low + os.sep):
            return ProtectionLevel.FULL_BLOCK
        if self._policy and low == self._policy.lower():
            return ProtectionLevel.FULL_BLOCK
        return _NAME_LEVELS.get(os.path.basename(low))

    # -- access collection ---------------------------------------------

    def _accesses(self, action: Action) -> Iterable[tuple[str, str]]:
        at = action.action_type
        if at in (ActionType.READ_FILE, ActionType.LIST_DIRECTORY, ActionType.SEARCH_FILES):
            yield action.target, _READ
        elif at in (ActionType.WRITE_FILE, ActionType.DELETE_FILE):
            yield action.target, _WRITE
        elif at in (ActionType.MOVE_FILE, ActionType.COPY_FILE):
            src, dest = action.target, action.payload_text.strip()
            yield src, _WRITE if at is ActionType.MOVE_FILE else _READ
            if dest:
                yield dest, _WRITE
                # moving/copying into an existing directory lands on dir/<basename>
                dest_abs = self._absolute(dest)
                if os.path.isdir(dest_abs):
                    yield os.path.join(dest_abs, os.path.basename(self._absolute(src))), _WRITE
        elif at is ActionType.EXECUTE_COMMAND:
            for t in shell_write_targets(action.payload_text):
                yield t, _WRITE
        # network/message actions carry no filesystem target

    # -- main entry ----------------------------------------------------

    def guard(self, action: Action) -> GuardResult:
        # strongest outcome across all touched paths wins
        worst = PASS
        worst_rank = 0

        def consider(res: GuardResult, rank: int) -> None:
            nonlocal worst, worst_rank
            if rank > worst_rank:
                worst, worst_rank = res, rank

        for raw, access in self._accesses(action):
            if not raw or _URL_RE.match(raw):
                continue
            try:
                resolved = self._resolve(raw)
            except _Unresolvable as exc:
                return GuardResult(
                    GuardKind.BLOCK, reason="guardian_unresolvable", detail=str(exc)
                )
            level = self._level_of(resolved)
            if level is None:
                continue
            if level is ProtectionLevel.FULL_BLOCK:
                return GuardResult(
                    GuardKind.BLOCK,
                    reason="guardian_fullblock",
                    detail=f"protected state file: {os.path.basename(resolved)}",
                )
            if access == _READ:
                continue  # ReadOnly / escalation classes permit reads
            if level is ProtectionLevel.READ_ONLY:
                consider(
                    GuardResult(
                        GuardKind.BLOCK,
                        reason="guardian_readonly",
                        detail=f"identity file is read-only: {os.path.basename(resolved)}",
                    ),
                    3,
                )
            elif level is ProtectionLevel.ESCALATE_TIER2:
                consider(GuardResult(GuardKind.FORCE_TIER, tier=TierId.T2), 2)
            elif level is ProtectionLevel.WRITE_TIER1_MIN:
                consider(GuardResult(GuardKind.FORCE_TIER, tier=TierId.T1), 1)
        return worst

    def restore_refusal(self, path: str) -> str:
        """Why a snapshot restore to `path` must be refused ("" = allowed).

        Restores are writes performed outside the mediated pipeline, so the
        write-protecting classes apply: the gateway's own state and the
        read-only identity files can never be overwritten this way.
        """
        try:
            resolved = self._resolve(path)
        except _Unresolvable as exc:
            return f"unresolvable destination: {exc}"
        level = self._level_of(resolved)
        if level is ProtectionLevel.FULL_BLOCK:
            return "destination is gateway state"
        if level is ProtectionLevel.READ_ONLY:
            return "destination is a read-only identity file"
        return ""
