"""Query kinds over a materialized analysis.

Every query reads frozen attribution rows; none of them retrains or
rescores anything.  Results are deterministically ordered so the same
spec against the same analysis always yields byte-identical extracts,
which is what makes bookmark digests meaningful.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from netident.model import Interaction

QUERY_KINDS = (
    "USER_TIMELINE",
    "SERVICE_USERS",
    "IP_PIVOT",
    "INTERACTION_DETAIL",
    "OVERVIEW_MATRIX",
)

MAX_LIMIT = 1000


class QueryError(Exception):
    """Rejected query; ``status`` is the HTTP code the caller should map to."""

    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


@dataclass(frozen=True)
class QuerySpec:
    kind: str
    user: Optional[str] = None
    service: Optional[str] = None
    ip: Optional[str] = None
    interaction_id: Optional[int] = None
    start: Optional[float] = None
    end: Optional[float] = None
    min_confidence: Optional[float] = None
    offset: int = 0
    limit: int = 100

    _REQUIRED = {
        "USER_TIMELINE": "user",
        "SERVICE_USERS": "service",
        "IP_PIVOT": "ip",
        "INTERACTION_DETAIL": "interaction_id",
    }

    @classmethod
    def from_dict(cls, doc) -> "QuerySpec":
        if not isinstance(doc, dict):
            raise QueryError(422, "query spec must be an object")
        allowed = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - allowed
        if unknown:
            raise QueryError(422, f"unknown query field(s): {sorted(unknown)}")
        try:
            spec = cls(**doc)
        except TypeError as e:
            raise QueryError(422, str(e)) from None
        spec.validate()
        return spec

    def validate(self) -> None:
        if self.kind not in QUERY_KINDS:
            raise QueryError(422, f"unknown query kind: {self.kind!r}")
        required = self._REQUIRED.get(self.kind)
        if required is not None and getattr(self, required) is None:
            raise QueryError(422, f"{self.kind} requires {required!r}")
        for name in ("start", "end", "min_confidence"):
            v = getattr(self, name)
            if v is not None and not isinstance(v, (int, float)):
                raise QueryError(422, f"{name} must be a number")
        if self.start is not None and self.end is not None and self.start > self.end:
            raise QueryError(422, "start must not exceed end")
        if self.min_confidence is not None and not 0.0 <= self.min_confidence <= 1.0:
            raise QueryError(422, "min_confidence must be in [0, 1]")
        if self.interaction_id is not None and not isinstance(self.interaction_id, int):
            raise QueryError(422, "interaction_id must be an integer")
        if not isinstance(self.offset, int) or self.offset < 0:
            raise QueryError(422, "offset must be a non-negative integer")
        if not isinstance(self.limit, int) or not 1 <= self.limit <= MAX_LIMIT:
            raise QueryError(422, f"limit must be in [1, {MAX_LIMIT}]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class QueryContext:
    """Frozen world a query runs against: one analysis plus its dataset."""

    rows: Sequence[dict]
    users: Sequence[str]
    services: Sequence[str]
    interaction_lookup: Callable[[int], Optional[Interaction]]


def _in_range(spec: QuerySpec, t: float) -> bool:
    if spec.start is not None and t < spec.start:
        return False
    if spec.end is not None and t >= spec.end:
        return False
    return True


def _confidence(row: dict) -> float:
    c = row["anchor_confidence"] if row["anchor_id"] is not None else row["base_confidence"]
    return c if c is not None else 0.0


def _filtered(spec: QuerySpec, rows: Sequence[dict]) -> list[dict]:
    out = [r for r in rows if _in_range(spec, r["start"])]
    if spec.min_confidence is not None:
        out = [r for r in out if _confidence(r) >= spec.min_confidence]
    return out


def execute(spec: QuerySpec, ctx: QueryContext) -> tuple[list[dict], int]:
    """Run a validated spec; returns (page, total matches before paging)."""
    rows = _dispatch(spec, ctx)
    return rows[spec.offset : spec.offset + spec.limit], len(rows)


def _dispatch(spec: QuerySpec, ctx: QueryContext) -> list[dict]:
    if spec.kind == "USER_TIMELINE":
        if spec.user not in ctx.users:
            raise QueryError(404, f"unknown user: {spec.user!r}")
        rows = [r for r in _filtered(spec, ctx.rows) if r["user"] == spec.user]
        rows.sort(key=lambda r: (r["start"], r["interaction_id"]))
        return rows

    if spec.kind == "SERVICE_USERS":
        if spec.service not in ctx.services:
            raise QueryError(404, f"unknown service: {spec.service!r}")
        per_user: dict[str, list[dict]] = {}
        for r in _filtered(spec, ctx.rows):
            if r["service"] == spec.service and r["user"] is not None:
                per_user.setdefault(r["user"], []).append(r)
        out = [
            {
                "user": user,
                "interactions": len(rs),
                "first_seen": min(r["start"] for r in rs),
                "last_seen": max(r["end"] for r in rs),
            }
            for user, rs in per_user.items()
        ]
        out.sort(key=lambda r: (-r["interactions"], r["user"]))
        return out

    if spec.kind == "IP_PIVOT":
        # an address nobody used is an empty result, not an error
        rows = [r for r in _filtered(spec, ctx.rows) if r["src_ip"] == spec.ip]
        rows.sort(key=lambda r: (r["start"], r["interaction_id"]))
        return rows

    if spec.kind == "INTERACTION_DETAIL":
        row = next(
            (r for r in ctx.rows if r["interaction_id"] == spec.interaction_id), None
        )
        if row is None:
            raise QueryError(404, f"unknown interaction: {spec.interaction_id}")
        detail = dict(row)
        inter = ctx.interaction_lookup(spec.interaction_id)
        detail["packet_lines"] = _packet_lines(inter) if inter is not None else []
        return [detail]

    # OVERVIEW_MATRIX: every known user, every service, zeros included
    counts: dict[str, dict[str, int]] = {
        u: {s: 0 for s in ctx.services} for u in ctx.users
    }
    for r in _filtered(spec, ctx.rows):
        if r["user"] in counts and r["service"] in counts[r["user"]]:
            counts[r["user"]][r["service"]] += 1
    return [{"user": u, "counts": counts[u]} for u in sorted(counts)]


def _packet_lines(inter: Interaction) -> list[str]:
    from netident.model import format_record_line

    return [format_record_line(p) for p in inter.packets]
