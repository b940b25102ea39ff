"""Durable case storage with an append-only, hash-chained audit trail.

Layout, one directory per case under ``<root>/cases``:

    c3/
      case.json             current casefile document
      audit.jsonl           hash chain, one entry per line
      bookmarks/b1.json     sealed query extracts
      analysis/a2/meta.json
      analysis/a2/rows.json

Every write follows the same discipline: serialize the new document,
append an audit entry carrying its SHA-256, then move the document into
place with an atomic rename.  The audit line lands first, so a crash can
leave a promised-but-missing write (which verification reports) but never
an unexplained document.  :meth:`CaseStore.verify_chain` re-derives every
entry digest, walks the prev links, and compares the newest recorded hash
of each object against the bytes on disk; that last check is what catches
after-the-fact edits to a sealed bookmark.

Writes are serialized per case through :meth:`CaseStore.case_lock`; cross
case traffic never contends.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

GENESIS = "0" * 64

#: fields hashed into an entry digest, in canonical form
AUDIT_FIELDS = ("seq", "ts", "account", "action", "object", "content_hash", "prev")

_CASE_ID_RE = re.compile(r"^c[1-9][0-9]*$")


class StoreError(Exception):
    pass


def canonical_json(value) -> str:
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def content_digest(value) -> str:
    """SHA-256 of a JSON value in canonical form; the bookmark seal."""
    return hashlib.sha256(canonical_json(value).encode("utf-8")).hexdigest()


def serialize_doc(value) -> bytes:
    """Stored-document bytes.  Deterministic, so the audited hash equals
    the hash of the file at rest."""
    return (json.dumps(value, indent=1, sort_keys=True, ensure_ascii=False) + "\n").encode("utf-8")


def _entry_digest(core: dict) -> str:
    return hashlib.sha256(canonical_json(core).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ChainReport:
    """Outcome of an audit verification pass; ``problems`` is empty iff ok."""

    ok: bool
    entries: int
    problems: tuple[str, ...]


class CaseStore:
    """Filesystem document store for casework, one lock per case."""

    def __init__(self, root: Union[str, Path], clock: Callable[[], float] = time.time):
        self.root = Path(root)
        (self.root / "cases").mkdir(parents=True, exist_ok=True)
        self._clock = clock
        self._guard = threading.Lock()
        self._locks: dict[str, threading.RLock] = {}

    # -- paths ------------------------------------------------------------

    def case_dir(self, case_id: str) -> Path:
        return self.root / "cases" / case_id

    def _audit_path(self, case_id: str) -> Path:
        return self.case_dir(case_id) / "audit.jsonl"

    def object_path(self, case_id: str, object_name: str) -> Optional[Path]:
        """Resolve an audit object name to its document file."""
        base = self.case_dir(case_id)
        if object_name == "case":
            return base / "case.json"
        kind, _, ident = object_name.partition(":")
        if not ident:
            return None
        if kind == "bookmark":
            return base / "bookmarks" / f"{ident}.json"
        if kind == "analysis":
            return base / "analysis" / ident / "meta.json"
        if kind == "rows":
            return base / "analysis" / ident / "rows.json"
        return None

    # -- locking and ids ---------------------------------------------------

    def case_lock(self, case_id: str) -> threading.RLock:
        with self._guard:
            return self._locks.setdefault(case_id, threading.RLock())

    def list_cases(self) -> list[str]:
        ids = [
            p.name
            for p in (self.root / "cases").iterdir()
            if p.is_dir() and _CASE_ID_RE.match(p.name)
        ]
        return sorted(ids, key=lambda c: int(c[1:]))

    def _allocate_case_id(self) -> str:
        existing = self.list_cases()
        n = int(existing[-1][1:]) + 1 if existing else 1
        return f"c{n}"

    # -- audit chain --------------------------------------------------------

    def _append_audit(
        self,
        case_id: str,
        account: str,
        action: str,
        object_name: Optional[str],
        content_hash: Optional[str],
    ) -> dict:
        """Append one chain entry.  Caller holds the case lock."""
        path = self._audit_path(case_id)
        entries = self.read_audit(case_id) if path.exists() else []
        prev = entries[-1]["digest"] if entries else GENESIS
        core = {
            "seq": len(entries) + 1,
            "ts": round(self._clock(), 3),
            "account": account,
            "action": action,
            "object": object_name,
            "content_hash": content_hash,
            "prev": prev,
        }
        entry = dict(core)
        entry["digest"] = _entry_digest(core)
        with open(path, "a", encoding="utf-8") as f:
            f.write(canonical_json(entry) + "\n")
        return entry

    def read_audit(self, case_id: str) -> list[dict]:
        path = self._audit_path(case_id)
        if not path.exists():
            return []
        with open(path, "r", encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]

    def record_denied(self, case_id: str, account: str, action: str) -> None:
        """Audit a rejected mutation attempt; nothing else is written."""
        with self.case_lock(case_id):
            self._append_audit(case_id, account, action + ".denied", None, None)

    def verify_chain(self, case_id: str) -> ChainReport:
        problems: list[str] = []
        entries = self.read_audit(case_id)
        prev = GENESIS
        for i, e in enumerate(entries, start=1):
            if set(e) != set(AUDIT_FIELDS) | {"digest"}:
                problems.append(f"entry {i}: unexpected field set")
                prev = e.get("digest", prev)
                continue
            if e["seq"] != i:
                problems.append(f"entry {i}: sequence number is {e['seq']}")
            if e["prev"] != prev:
                problems.append(f"entry {i}: broken link to entry {i - 1}")
            core = {k: e[k] for k in AUDIT_FIELDS}
            if _entry_digest(core) != e["digest"]:
                problems.append(f"entry {i}: digest does not match entry content")
            prev = e["digest"]

        # newest audited hash per object must match the file at rest
        latest: dict[str, str] = {}
        for e in entries:
            if e.get("content_hash") is not None and e.get("object"):
                latest[e["object"]] = e["content_hash"]
        for obj in sorted(latest):
            path = self.object_path(case_id, obj)
            if path is None:
                problems.append(f"{obj}: unresolvable object name")
            elif not path.exists():
                problems.append(f"{obj}: document missing from disk")
            elif hashlib.sha256(path.read_bytes()).hexdigest() != latest[obj]:
                problems.append(f"{obj}: bytes on disk do not match the audited hash")
        return ChainReport(ok=not problems, entries=len(entries), problems=tuple(problems))

    # -- documents ----------------------------------------------------------

    def _write_bytes_atomic(self, path: Path, data: bytes) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "wb") as f:
            f.write(data)
        os.replace(tmp, path)

    def commit(
        self,
        case_id: str,
        account: str,
        action: str,
        documents: Sequence[tuple[str, object]],
    ) -> None:
        """Write documents under one action, audit line first for each."""
        with self.case_lock(case_id):
            for object_name, doc in documents:
                path = self.object_path(case_id, object_name)
                if path is None:
                    raise StoreError(f"unresolvable object name: {object_name}")
                data = serialize_doc(doc)
                digest = hashlib.sha256(data).hexdigest()
                self._append_audit(case_id, account, action, object_name, digest)
                self._write_bytes_atomic(path, data)

    def create_case(self, title: str, creator: str) -> dict:
        with self._guard:
            case_id = self._allocate_case_id()
            self.case_dir(case_id).mkdir(parents=True)
        doc = {
            "schema_version": 1,
            "case_id": case_id,
            "title": title,
            "created_by": creator,
            "created_at": round(self._clock(), 3),
            "participants": [{"account": creator, "role": "ADMIN"}],
            "datasets": [],
            "models": [],
            "analyses": [],
            "bookmarks": [],
        }
        self.commit(case_id, creator, "case.create", [("case", doc)])
        return doc

    def _read_doc(self, path: Path) -> Optional[dict]:
        if not path.exists():
            return None
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)

    def read_case(self, case_id: str) -> Optional[dict]:
        if not _CASE_ID_RE.match(case_id):
            return None
        return self._read_doc(self.case_dir(case_id) / "case.json")

    def read_bookmark(self, case_id: str, bookmark_id: str) -> Optional[dict]:
        return self._read_doc(self.case_dir(case_id) / "bookmarks" / f"{bookmark_id}.json")

    def read_analysis_meta(self, case_id: str, analysis_id: str) -> Optional[dict]:
        return self._read_doc(self.case_dir(case_id) / "analysis" / analysis_id / "meta.json")

    def read_analysis_rows(self, case_id: str, analysis_id: str) -> Optional[list]:
        return self._read_doc(self.case_dir(case_id) / "analysis" / analysis_id / "rows.json")

    def latest_done_analysis(self, case_id: str) -> Optional[tuple[str, dict]]:
        """Newest analysis whose job finished; queries are served from it."""
        case = self.read_case(case_id)
        if case is None:
            return None
        for analysis_id in reversed(case["analyses"]):
            meta = self.read_analysis_meta(case_id, analysis_id)
            if meta is not None and meta["status"] == "done":
                return analysis_id, meta
        return None


def case_report(store: CaseStore, case_id: str) -> Optional[dict]:
    """The shareable case report: casefile, analysis metadata, sealed
    bookmarks and the audit verification verdict.  Deliberately carries no
    generation timestamp, so an unchanged case re-renders byte-identically."""
    case = store.read_case(case_id)
    if case is None:
        return None
    chain = store.verify_chain(case_id)
    return {
        "schema_version": 1,
        "case": case,
        "analyses": [store.read_analysis_meta(case_id, a) for a in case["analyses"]],
        "bookmarks": [store.read_bookmark(case_id, b) for b in case["bookmarks"]],
        "audit": {
            "entries": chain.entries,
            "verified": chain.ok,
            "problems": list(chain.problems),
        },
    }
