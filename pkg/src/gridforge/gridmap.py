"""Grid-identity to local-account mapping via the grid-mapfile.

Line grammar (bit-exact): optional whitespace, a double-quoted grid identity
(quotes forbidden inside, no escapes), one or more spaces, comma-separated
account names, then an optional ``#`` comment. Blank lines and comment-only
lines are ignored. The first listed account is the default.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import AccountNotPermitted, DuplicateIdentity, NoMapping, ParseError

ACCOUNT_RE = re.compile(r"[a-z_][a-z0-9_-]{0,31}\Z")
_ENTRY_RE = re.compile(r'\s*"([^"]+)"\s+(\S+)\s*(?:#.*)?\Z')


@dataclass(frozen=True)
class GridMap:
    """Immutable after parse; reload by parsing a fresh value."""

    entries: tuple[tuple[str, tuple[str, ...]], ...]

    def accounts_for(self, identity: str) -> tuple[str, ...] | None:
        for entry_identity, accounts in self.entries:
            if entry_identity == identity:
                return accounts
        return None


def parse_gridmap(text: str) -> GridMap:
    entries: list[tuple[str, tuple[str, ...]]] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        match = _ENTRY_RE.match(raw)
        if not match:
            raise ParseError(lineno, f"line {lineno}: not a gridmap entry: {raw.rstrip()!r}")
        identity, accounts_field = match.group(1), match.group(2)
        accounts = tuple(accounts_field.split(","))
        if not all(ACCOUNT_RE.match(a) for a in accounts):
            raise ParseError(lineno, f"line {lineno}: bad account name in {accounts_field!r}")
        if identity in seen:
            raise DuplicateIdentity(lineno, f"line {lineno}: duplicate identity {identity!r}")
        seen.add(identity)
        entries.append((identity, accounts))
    return GridMap(entries=tuple(entries))


def serialize_gridmap(gm: GridMap) -> str:
    lines = [f'"{identity}" {",".join(accounts)}' for identity, accounts in gm.entries]
    return "\n".join(lines) + ("\n" if lines else "")


def load_gridmap(path: str) -> GridMap:
    with open(path, encoding="utf-8") as fh:
        return parse_gridmap(fh.read())


def map_identity(gm: GridMap, who: str, requested_account: str | None = None) -> str:
    """Local account for a grid identity; the first listed account is the default."""
    accounts = gm.accounts_for(who)
    if accounts is None:
        raise NoMapping(f"no gridmap entry for {who!r}")
    if requested_account is None:
        return accounts[0]
    if requested_account not in accounts:
        raise AccountNotPermitted(f"{requested_account!r} not listed for {who!r}")
    return requested_account
