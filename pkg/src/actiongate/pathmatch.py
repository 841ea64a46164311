"""Path normalization and the minimal glob dialect used by policy and IFC rules.

Dialect: ``*`` matches within a path segment, ``**`` spans segments, ``~``
expands to the configured home directory. No character classes. All matching
is case-insensitive. A trailing ``/**`` also matches the anchor itself, so a
deny on ``~/.ssh/**`` covers listing the directory as well as its contents.

Matching is pure string work with no filesystem access, so rule evaluation
is deterministic regardless of what exists on disk. (The guardian does its
own real resolution with symlinks; see guardian.py.)
"""
from __future__ import annotations

import posixpath
import re
from dataclasses import dataclass
from functools import lru_cache


@dataclass(frozen=True)
class PathContext:
    home: str
    workspace_root: str


_URL_RE = re.compile(r"^[a-z][a-z0-9+.\-]*://", re.IGNORECASE)

# placeholders survive re.escape so glob tokens can be swapped in afterwards
_P_MID = "\x01"   # /**/  -> /(?:.*/)?
_P_LEAD = "\x02"  # **/   -> (?:.*/)?
_P_TAIL = "\x03"  # /**   -> (?:/.*)?
_P_ALL = "\x04"   # **    -> .*
_P_STAR = "\x05"  # *     -> [^/]*


def normalize_target(target: str, ctx: PathContext) -> str:
    """Canonical lowercase form of a target for glob matching.

    URLs are lowercased and left structurally intact. Paths are made
    absolute (relative targets resolve under the workspace root), separators
    unified, and ``.``/``..`` collapsed. An empty target means the workspace
    root itself.
    """
    t = (target or "").strip().replace("\\", "/")
    if _URL_RE.match(t):
        return t.lower()
    if t in ("", "."):
        t = ctx.workspace_root
    elif t == "~":
        t = ctx.home
    elif t.startswith("~/"):
        t = ctx.home.rstrip("/") + t[1:]
    if not t.startswith("/"):
        t = ctx.workspace_root.rstrip("/") + "/" + t
    return posixpath.normpath(t).lower()


@lru_cache(maxsize=4096)
def _compile(pattern: str, home: str, root: str) -> re.Pattern:
    p = pattern.strip().replace("\\", "/")
    if not _URL_RE.match(p):
        if p == "~":
            p = home
        elif p.startswith("~/"):
            p = home.rstrip("/") + p[1:]
        if p.startswith("./"):
            # explicit workspace anchor, even for a ** remainder
            p = root.rstrip("/") + "/" + p[2:]
        elif not p.startswith("/") and not p.startswith("**"):
            p = root.rstrip("/") + "/" + p

    p = p.replace("/**/", _P_MID)
    if p.startswith("**/"):
        p = _P_LEAD + p[3:]
    if p.endswith("/**"):
        p = p[:-3] + _P_TAIL
    if p == "**":
        p = _P_ALL
    p = p.replace("*", _P_STAR)

    rx = re.escape(p)
    rx = rx.replace(re.escape(_P_MID), "/(?:.*/)?")
    rx = rx.replace(re.escape(_P_LEAD), "(?:.*/)?")
    rx = rx.replace(re.escape(_P_TAIL), "(?:/.*)?")
    rx = rx.replace(re.escape(_P_ALL), ".*")
    rx = rx.replace(re.escape(_P_STAR), "[^/]*")
    return re.compile("^" + rx + "$", re.IGNORECASE)


def compile_glob(pattern: str, ctx: PathContext) -> re.Pattern:
    """Compile a glob pattern to a regex over normalized targets."""
    return _compile(pattern, ctx.home, ctx.workspace_root)


def glob_match(pattern: str, target: str, ctx: PathContext) -> bool:
    return compile_glob(pattern, ctx).match(normalize_target(target, ctx)) is not None
