"""Append-only, hash-chained decision and audit log with tamper verification.

Each entry links to its predecessor via SHA-256(prev_hash || payload); the
genesis link is 32 zero bytes. Exports are a header line plus one JSON object
per entry, so audit artifacts stay greppable and diff-able.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

from .model import (
    AuditEvent,
    DecisionRecord,
    PipekeeperError,
    Verdict,
    parse_payload,
)

GENESIS = b"\x00" * 32
DIGEST_ALGO = "sha256"


class LedgerError(PipekeeperError):
    code = "ledger_error"


def _entry_hash(prev_hash: bytes, payload: bytes) -> bytes:
    return hashlib.sha256(prev_hash + payload).digest()


@dataclass(frozen=True)
class LedgerEntry:
    sequence: int
    prev_hash: bytes
    payload: bytes
    entry_hash: bytes

    def to_dict(self) -> dict[str, Any]:
        return {
            "sequence": self.sequence,
            "prev_hash_hex": self.prev_hash.hex(),
            "payload": self.payload.decode("utf-8"),
            "entry_hash_hex": self.entry_hash.hex(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "LedgerEntry":
        return cls(
            sequence=data["sequence"],
            prev_hash=bytes.fromhex(data["prev_hash_hex"]),
            payload=data["payload"].encode("utf-8"),
            entry_hash=bytes.fromhex(data["entry_hash_hex"]),
        )

    def parsed(self) -> DecisionRecord | AuditEvent:
        return parse_payload(self.payload)


@dataclass(frozen=True)
class LedgerQuery:
    """Conjunctive filters over ledger payloads."""

    stage: str | None = None
    time_from: int | None = None
    time_to: int | None = None
    policy_outcome: str | None = None
    human_overridden: bool | None = None
    agent_id: str | None = None
    trace_id: str | None = None
    kind: str | None = None  # "decision" | "audit" | audit event kind


class Ledger:
    """Single-writer append-only hash chain.

    When constructed with a path, every append is written through to the
    file before returning (write-ahead), so a crashed run leaves a
    verifiable prefix on disk.
    """

    def __init__(self, path: str | Path | None = None):
        self._entries: list[LedgerEntry] = []
        self._head = GENESIS
        self._path = Path(path) if path is not None else None
        self._fh = None
        if self._path is not None:
            self._path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = self._path.open("w", encoding="utf-8")
            self._write_header()

    def _write_header(self) -> None:
        assert self._fh is not None
        header = {"digest_algo": DIGEST_ALGO, "genesis": GENESIS.hex(), "count": 0}
        self._fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        self._fh.flush()

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def head_hash(self) -> bytes:
        return self._head

    def entries(self, since: int = 0) -> list[LedgerEntry]:
        """Consistent snapshot of entries with sequence >= since."""
        return self._entries[since:]

    def append(self, payload: DecisionRecord | AuditEvent | bytes) -> LedgerEntry:
        """Chain a payload onto the current head and persist it."""
        if isinstance(payload, bytes):
            raw = payload
        else:
            from .model import canonical_serialize, serialize_audit_event

            try:
                if isinstance(payload, DecisionRecord):
                    raw = canonical_serialize(payload)
                else:
                    raw = serialize_audit_event(payload)
            except (TypeError, ValueError) as exc:
                raise LedgerError(f"serialization_error: {exc}") from exc
        entry = LedgerEntry(
            sequence=len(self._entries),
            prev_hash=self._head,
            payload=raw,
            entry_hash=_entry_hash(self._head, raw),
        )
        if self._fh is not None:
            self._fh.write(json.dumps(entry.to_dict(), separators=(",", ":"), ensure_ascii=False) + "\n")
            self._fh.flush()
        self._entries.append(entry)
        self._head = entry.entry_hash
        return entry

    def close(self) -> None:
        if self._fh is not None:
            # rewrite header with the final count so file-level verification
            # can detect truncation of the tail
            self._fh.close()
            self._fh = None
            assert self._path is not None
            lines = self._path.read_text(encoding="utf-8").splitlines()
            header = json.loads(lines[0])
            header["count"] = len(self._entries)
            lines[0] = json.dumps(header, separators=(",", ":"))
            self._path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    def query(self, q: LedgerQuery) -> list[LedgerEntry]:
        """All and only entries matching every filter, in sequence order."""
        out = []
        for entry in self._entries:
            if _matches(entry, q):
                out.append(entry)
        return out


def _matches(entry: LedgerEntry, q: LedgerQuery) -> bool:
    obj = entry.parsed()
    is_decision = isinstance(obj, DecisionRecord)
    if q.kind is not None:
        if q.kind == "decision":
            if not is_decision:
                return False
        elif q.kind == "audit":
            if is_decision:
                return False
        elif is_decision or obj.kind != q.kind:
            return False
    if q.stage is not None:
        stage = obj.stage.value if is_decision else obj.data.get("stage")
        if stage != q.stage:
            return False
    if q.time_from is not None and obj.timestamp < q.time_from:
        return False
    if q.time_to is not None and obj.timestamp > q.time_to:
        return False
    if q.policy_outcome is not None:
        if not is_decision or obj.policy_outcome != Verdict(q.policy_outcome):
            return False
    if q.human_overridden is not None:
        if not is_decision or obj.human_overridden != q.human_overridden:
            return False
    if q.agent_id is not None:
        agent = obj.inputs.get("agent_id") if is_decision else obj.data.get("agent_id")
        if agent != q.agent_id:
            return False
    if q.trace_id is not None and q.trace_id not in obj.trace_ids:
        return False
    return True


def verify_chain(entries: Iterable[LedgerEntry]) -> int | None:
    """Recompute every link; return None if intact, else the sequence index
    of the first violated entry."""
    prev = GENESIS
    for i, entry in enumerate(entries):
        if entry.sequence != i:
            return i
        if entry.prev_hash != prev:
            return i
        if _entry_hash(entry.prev_hash, entry.payload) != entry.entry_hash:
            return i
        prev = entry.entry_hash
    return None


def read_export(path: str | Path) -> tuple[dict[str, Any], list[LedgerEntry]]:
    """Parse an exported ledger file into (header, entries)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise LedgerError("empty ledger file")
    header = json.loads(lines[0])
    entries = [LedgerEntry.from_dict(json.loads(line)) for line in lines[1:] if line.strip()]
    return header, entries


def verify_file(path: str | Path) -> int | None:
    """Verify an exported ledger, including header count, so deletions at
    the tail are detected. Returns None if intact, else first bad sequence."""
    header, entries = read_export(path)
    if header.get("digest_algo") != DIGEST_ALGO:
        return 0
    bad = verify_chain(entries)
    if bad is not None:
        return bad
    expected = header.get("count")
    if expected is not None and expected != len(entries):
        return min(expected, len(entries))
    return None


def query_file(path: str | Path, q: LedgerQuery) -> list[LedgerEntry]:
    _, entries = read_export(path)
    return [e for e in entries if _matches(e, q)]
