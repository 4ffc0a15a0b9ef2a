"""Hash-chained, append-only audit log.

Each entry's digest covers its index, timestamp, actor, event, and the
previous entry's digest, so mutating any persisted entry breaks the chain at
that point. The log file holds one canonical document per line. Appends from
multiple processes are serialized through a sibling lock file.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

from filelock import FileLock

from . import encoding
from .credstore import now_seconds
from .errors import ChainBroken

GENESIS_DIGEST = bytes(32)

_ENTRY_FIELDS = {"index", "timestamp", "actor", "event", "prev_digest", "digest"}


@dataclass(frozen=True)
class AuditEntry:
    index: int
    timestamp: int
    actor: str
    event: str
    prev_digest: bytes
    digest: bytes

    def to_doc(self) -> dict:
        return {
            "index": self.index,
            "timestamp": self.timestamp,
            "actor": self.actor,
            "event": self.event,
            "prev_digest": self.prev_digest,
            "digest": self.digest,
        }

    @classmethod
    def from_doc(cls, doc: encoding.Value) -> "AuditEntry":
        m = encoding.expect_map(doc, _ENTRY_FIELDS)
        return cls(
            index=int(m["index"]),
            timestamp=int(m["timestamp"]),
            actor=str(m["actor"]),
            event=str(m["event"]),
            prev_digest=bytes(m["prev_digest"]),
            digest=bytes(m["digest"]),
        )


def entry_digest(index: int, timestamp: int, actor: str, event: str, prev_digest: bytes) -> bytes:
    body = encoding.encode({
        "index": index,
        "timestamp": timestamp,
        "actor": actor,
        "event": event,
        "prev_digest": prev_digest,
    })
    return hashlib.sha256(body).digest()


class AuditLog:
    """File-backed audit chain. `append` is cross-process safe via a lock file."""

    def __init__(self, path: str):
        self.path = path
        self._lock = FileLock(path + ".lock")

    def append(self, actor: str, event: str, *, now: int | None = None) -> AuditEntry:
        now = now_seconds() if now is None else now
        # records are newline-delimited; field content must stay single-line
        actor = actor.replace("\n", " ").replace("\r", " ")
        event = event.replace("\n", " ").replace("\r", " ")
        with self._lock:
            last = self._tail()
            index = 0 if last is None else last.index + 1
            prev = GENESIS_DIGEST if last is None else last.digest
            entry = AuditEntry(
                index=index,
                timestamp=now,
                actor=actor,
                event=event,
                prev_digest=prev,
                digest=entry_digest(index, now, actor, event, prev),
            )
            with open(self.path, "a", encoding="ascii") as fh:
                fh.write(encoding.encode_text(entry.to_doc()))
                fh.write("\n")
                fh.flush()
                os.fsync(fh.fileno())
        return entry

    def _tail(self) -> AuditEntry | None:
        if not os.path.exists(self.path):
            return None
        last_line = None
        with open(self.path, "rb") as fh:
            for line in fh:
                if line.strip():
                    last_line = line
        if last_line is None:
            return None
        return AuditEntry.from_doc(encoding.decode(last_line.strip()))

    def entries(self) -> list[AuditEntry]:
        return load_entries(self.path)

    def verify(self) -> int | None:
        return verify_file(self.path)


def load_entries(path: str) -> list[AuditEntry]:
    if not os.path.exists(path):
        return []
    entries = []
    with open(path, "rb") as fh:
        for line in fh:
            line = line.strip()
            if line:
                entries.append(AuditEntry.from_doc(encoding.decode(line)))
    return entries


def verify_file(path: str) -> int | None:
    """Recompute the whole chain; returns the first bad index, or None when intact."""
    if not os.path.exists(path):
        return None
    prev = GENESIS_DIGEST
    index = 0
    with open(path, "rb") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                entry = AuditEntry.from_doc(encoding.decode(line))
            except Exception:
                return index
            if entry.index != index or entry.prev_digest != prev:
                return index
            if entry.digest != entry_digest(
                entry.index, entry.timestamp, entry.actor, entry.event, entry.prev_digest
            ):
                return index
            prev = entry.digest
            index += 1
    return None


def verify_or_raise(path: str) -> int:
    """Entry count when intact; ChainBroken(first_bad_index) otherwise."""
    bad = verify_file(path)
    if bad is not None:
        raise ChainBroken(bad, f"audit chain broken at entry {bad}")
    return len(load_entries(path))
