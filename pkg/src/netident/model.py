"""Core domain types shared by every stage of the toolkit.

The atomic evidence unit is a :class:`PacketRecord` (one IP-header metadata
observation).  Bursts of packets attributed to one service form an
:class:`Interaction`; a :class:`Dataset` bundles records, interactions and
the time-ranged IP-to-user ground truth used for enrollment and evaluation.

All types here are immutable value objects.  Construction performs no
semantic validation: malformed data is representable so that
:func:`validate_dataset` can report rule violations as data instead of
raising mid-pipeline.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

DATASET_SCHEMA_VERSION = 1

#: Default monitored service set; a configuration may override it.
DEFAULT_SERVICES = (
    "YouTube",
    "Facebook",
    "Google",
    "Twitter",
    "Wikipedia",
    "Hotmail",
    "Dropbox",
    "BBC",
    "Skype",
)


class Protocol(Enum):
    TCP = "TCP"
    UDP = "UDP"
    OTHER = "OTHER"


class Direction(Enum):
    """Packet flow direction relative to the monitored host."""

    UPSTREAM = "UP"
    DOWNSTREAM = "DOWN"


@dataclass(frozen=True, slots=True)
class PacketRecord:
    """One IP-header metadata observation, in wire orientation.

    ``src_ip``/``dst_ip`` are the addresses as they appeared on the wire;
    ``direction`` says which side is the monitored host (UPSTREAM means the
    monitored host sent the packet).  ``length`` is the IP total length,
    ``tcp_flags`` the raw 8-bit flag mask (0 for non-TCP traffic).
    """

    timestamp: float
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    length: int
    protocol: Protocol
    tcp_flags: int
    direction: Direction

    def local_ip(self) -> str:
        """Address of the monitored endpoint for this packet."""
        return self.src_ip if self.direction is Direction.UPSTREAM else self.dst_ip

    def remote_ip(self) -> str:
        """Address of the far endpoint for this packet."""
        return self.dst_ip if self.direction is Direction.UPSTREAM else self.src_ip

    def remote_port(self) -> int:
        return self.dst_port if self.direction is Direction.UPSTREAM else self.src_port


@dataclass(frozen=True, slots=True)
class UserId:
    label: str
    numeric_id: int


@dataclass(frozen=True, slots=True)
class Interaction:
    """A signature-matched, gap-segmented burst of packets from one host.

    ``src_ip`` is the monitored (user-side) address shared by every packet
    in the burst; the packets themselves keep wire orientation, so a
    downstream packet's own ``src_ip`` field is the remote endpoint.
    """

    interaction_id: int
    service: str
    src_ip: str
    start: float
    end: float
    packets: tuple[PacketRecord, ...]


@dataclass(frozen=True, slots=True)
class GroundTruthSpan:
    """One validity interval of an IP-to-user assignment.  ``end`` is
    exclusive; ``None`` means open-ended."""

    src_ip: str
    start: float
    end: Optional[float]
    user: UserId


class GroundTruth:
    """Time-ranged mapping from source IP to user.

    A static capture (constant addresses) is the degenerate case of a single
    open-ended span per IP.
    """

    def __init__(self, users: Sequence[UserId], spans: Sequence[GroundTruthSpan]):
        self.users = tuple(users)
        self.spans = tuple(spans)
        self._by_ip: dict[str, list[GroundTruthSpan]] = {}
        for s in self.spans:
            self._by_ip.setdefault(s.src_ip, []).append(s)
        for lst in self._by_ip.values():
            lst.sort(key=lambda s: s.start)

    def user_at(self, src_ip: str, t: float) -> Optional[UserId]:
        """User assigned to ``src_ip`` at time ``t``, or None."""
        for s in self._by_ip.get(src_ip, ()):
            if s.start <= t and (s.end is None or t < s.end):
                return s.user
        return None

    def to_dict(self) -> dict:
        return {
            "schema_version": DATASET_SCHEMA_VERSION,
            "users": [
                {"label": u.label, "numeric_id": u.numeric_id} for u in self.users
            ],
            "spans": [
                {
                    "src_ip": s.src_ip,
                    "start": s.start,
                    "end": s.end,
                    "numeric_id": s.user.numeric_id,
                }
                for s in self.spans
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GroundTruth":
        users = [UserId(u["label"], int(u["numeric_id"])) for u in doc["users"]]
        by_id = {u.numeric_id: u for u in users}
        spans = [
            GroundTruthSpan(
                s["src_ip"],
                float(s["start"]),
                None if s["end"] is None else float(s["end"]),
                by_id[int(s["numeric_id"])],
            )
            for s in doc["spans"]
        ]
        return cls(users, spans)


@dataclass
class Dataset:
    """Investigation input: packet records, derived interactions and the
    ground-truth IP ownership map."""

    records: list[PacketRecord]
    interactions: list[Interaction]
    ground_truth: GroundTruth
    n_users: int


@dataclass(frozen=True)
class Violation:
    """One broken invariant, naming the offending object and the rule."""

    rule: str
    subject: str
    detail: str

    def __str__(self) -> str:
        return f"{self.rule}: {self.subject}: {self.detail}"


class DomainError(ValueError):
    """Raised when an operation is called outside its stated domain."""


class LineFormatError(ValueError):
    """Malformed canonical metadata line; carries the zero-based index of the
    offending field (-1 when the field structure itself is wrong)."""

    def __init__(self, message: str, field_index: int = -1):
        super().__init__(message)
        self.field_index = field_index


def data_reduction_pct(packet_count: int, interaction_count: int) -> float:
    """Percentage of raw packets eliminated by interaction extraction.

    Returns ``(1 - interaction_count/packet_count) * 100`` rounded to one
    decimal place for display.
    """
    if packet_count < 1:
        raise DomainError("packet_count must be >= 1")
    if interaction_count < 0:
        raise DomainError("interaction_count must be >= 0")
    if interaction_count > packet_count:
        raise DomainError(
            f"interaction_count {interaction_count} exceeds packet_count {packet_count}"
        )
    return round((1.0 - interaction_count / packet_count) * 100.0, 1)


# ---------------------------------------------------------------------------
# Canonical metadata line codec
# ---------------------------------------------------------------------------

#: Field order of the canonical metadata record format.
CANONICAL_FIELDS = (
    "timestamp",
    "src_ip",
    "dst_ip",
    "src_port",
    "dst_port",
    "length",
    "protocol",
    "tcp_flags",
    "direction",
)

_PROTOCOL_BY_NAME = {p.value: p for p in Protocol}
_DIRECTION_BY_NAME = {d.value: d for d in Direction}


def ip_to_int(ip: str) -> int:
    """Dotted-quad IPv4 to integer; raises ValueError for anything else."""
    parts = ip.split(".")
    if len(parts) != 4:
        raise ValueError(f"not an IPv4 address: {ip!r}")
    value = 0
    for p in parts:
        if not p.isdigit() or (len(p) > 1 and p[0] == "0") or len(p) > 3:
            raise ValueError(f"not an IPv4 address: {ip!r}")
        octet = int(p)
        if octet > 255:
            raise ValueError(f"not an IPv4 address: {ip!r}")
        value = (value << 8) | octet
    return value


def int_to_ip(value: int) -> str:
    return ".".join(str((value >> s) & 0xFF) for s in (24, 16, 8, 0))


def format_record_line(p: PacketRecord) -> str:
    """Render one record as a canonical metadata line.

    The timestamp uses the shortest decimal form that round-trips the exact
    float value, so write-then-parse is lossless for any record.
    """
    return (
        f"{p.timestamp!r},{p.src_ip},{p.dst_ip},{p.src_port},{p.dst_port},"
        f"{p.length},{p.protocol.value},{p.tcp_flags},{p.direction.value}"
    )


def parse_record_line(line: str) -> PacketRecord:
    """Parse one canonical metadata line.

    Raises ValueError naming the bad field; the stream-level parser in the
    ingest module attaches line numbers.
    """
    parts = line.split(",")
    if len(parts) != len(CANONICAL_FIELDS):
        raise LineFormatError(
            f"expected {len(CANONICAL_FIELDS)} comma-separated fields, got {len(parts)}"
        )

    def bad(idx: int, why: str) -> LineFormatError:
        return LineFormatError(f"field {idx + 1} ({CANONICAL_FIELDS[idx]}): {why}", idx)

    try:
        timestamp = float(parts[0])
    except ValueError:
        raise bad(0, f"not a number: {parts[0]!r}") from None
    if not (timestamp >= 0.0) or timestamp != timestamp or timestamp == float("inf"):
        raise bad(0, f"timestamp must be finite and non-negative: {parts[0]!r}")

    for idx in (1, 2):
        try:
            ip_to_int(parts[idx])
        except ValueError as e:
            raise bad(idx, str(e)) from None

    ports = []
    for idx in (3, 4):
        try:
            port = int(parts[idx])
        except ValueError:
            raise bad(idx, f"not an integer: {parts[idx]!r}") from None
        if not 0 <= port <= 65535:
            raise bad(idx, f"port out of range 0-65535: {port}")
        ports.append(port)

    try:
        length = int(parts[5])
    except ValueError:
        raise bad(5, f"not an integer: {parts[5]!r}") from None
    if length < 0:
        raise bad(5, f"length must be >= 0: {length}")

    protocol = _PROTOCOL_BY_NAME.get(parts[6])
    if protocol is None:
        raise bad(6, f"unknown protocol {parts[6]!r} (expected TCP, UDP or OTHER)")

    try:
        tcp_flags = int(parts[7])
    except ValueError:
        raise bad(7, f"not an integer: {parts[7]!r}") from None
    if not 0 <= tcp_flags <= 255:
        raise bad(7, f"tcp_flags out of range 0-255: {tcp_flags}")

    direction = _DIRECTION_BY_NAME.get(parts[8])
    if direction is None:
        raise bad(8, f"unknown direction {parts[8]!r} (expected UP or DOWN)")

    return PacketRecord(
        timestamp=timestamp,
        src_ip=parts[1],
        dst_ip=parts[2],
        src_port=ports[0],
        dst_port=ports[1],
        length=length,
        protocol=protocol,
        tcp_flags=tcp_flags,
        direction=direction,
    )


# ---------------------------------------------------------------------------
# Record-level invariants
# ---------------------------------------------------------------------------


def packet_violations(p: PacketRecord, subject: str) -> list[Violation]:
    """Invariant check for one record; empty list when well-formed."""
    out: list[Violation] = []
    ts = p.timestamp
    if not (ts == ts and ts != float("inf") and ts >= 0.0):
        out.append(
            Violation("timestamp-finite-non-negative", subject, f"timestamp={ts!r}")
        )
    for label, ip in (("src_ip", p.src_ip), ("dst_ip", p.dst_ip)):
        try:
            ip_to_int(ip)
        except ValueError:
            out.append(Violation("ipv4-address", subject, f"{label}={ip!r}"))
    for label, port in (("src_port", p.src_port), ("dst_port", p.dst_port)):
        if not 0 <= port <= 65535:
            out.append(Violation("port-range", subject, f"{label}={port}"))
    if p.length < 0:
        out.append(Violation("length-non-negative", subject, f"length={p.length}"))
    if p.protocol is Protocol.OTHER and (p.src_port != 0 or p.dst_port != 0):
        out.append(
            Violation(
                "ports-zero-for-other-protocol",
                subject,
                f"src_port={p.src_port} dst_port={p.dst_port}",
            )
        )
    if p.protocol is not Protocol.TCP and p.tcp_flags != 0:
        out.append(
            Violation(
                "tcp-flags-zero-for-non-tcp", subject, f"tcp_flags={p.tcp_flags}"
            )
        )
    if not 0 <= p.tcp_flags <= 255:
        out.append(Violation("tcp-flags-range", subject, f"tcp_flags={p.tcp_flags}"))
    return out


def validate_dataset(d: Dataset, signatures: Optional[Sequence] = None) -> list[Violation]:
    """Check every type invariant over a dataset.

    Returns an empty list iff the dataset is well-formed.  When a signature
    table is supplied, packets inside each interaction are additionally
    checked against their service's signature.
    """
    out: list[Violation] = []

    for i, p in enumerate(d.records):
        out.extend(packet_violations(p, f"record[{i}]"))

    seen_ids: set[int] = set()
    sig_by_service = {}
    if signatures is not None:
        sig_by_service = {s.service: s for s in signatures}

    for inter in d.interactions:
        subject = f"interaction[{inter.interaction_id}]"
        if inter.interaction_id in seen_ids:
            out.append(
                Violation("interaction-id-unique", subject, "duplicate identifier")
            )
        seen_ids.add(inter.interaction_id)
        if inter.end < inter.start:
            out.append(
                Violation(
                    "interaction-end-after-start",
                    subject,
                    f"start={inter.start!r} end={inter.end!r}",
                )
            )
        if not inter.packets:
            out.append(Violation("interaction-non-empty", subject, "no packets"))
            continue
        last_ts = None
        for j, p in enumerate(inter.packets):
            out.extend(packet_violations(p, f"{subject}.packets[{j}]"))
            if last_ts is not None and p.timestamp < last_ts:
                out.append(
                    Violation(
                        "interaction-packets-time-ordered",
                        f"{subject}.packets[{j}]",
                        f"{p.timestamp!r} < {last_ts!r}",
                    )
                )
            last_ts = p.timestamp
            if p.local_ip() != inter.src_ip:
                out.append(
                    Violation(
                        "interaction-single-source",
                        f"{subject}.packets[{j}]",
                        f"monitored endpoint {p.local_ip()} != {inter.src_ip}",
                    )
                )
        sig = sig_by_service.get(inter.service)
        if signatures is not None:
            if sig is None:
                out.append(
                    Violation(
                        "interaction-service-configured",
                        subject,
                        f"no signature for service {inter.service!r}",
                    )
                )
            else:
                for j, p in enumerate(inter.packets):
                    if not sig.matches(p):
                        out.append(
                            Violation(
                                "interaction-packets-match-signature",
                                f"{subject}.packets[{j}]",
                                f"packet does not match signature of {inter.service!r}",
                            )
                        )

    # Ground truth: overlapping assignment spans would make an interaction's
    # source resolve to more than one user.
    by_ip: dict[str, list[GroundTruthSpan]] = {}
    for s in d.ground_truth.spans:
        by_ip.setdefault(s.src_ip, []).append(s)
    for ip, spans in by_ip.items():
        spans = sorted(spans, key=lambda s: s.start)
        for a, b in zip(spans, spans[1:]):
            if a.end is None or b.start < a.end:
                out.append(
                    Violation(
                        "ground-truth-spans-disjoint",
                        f"ground_truth[{ip}]",
                        f"span starting {b.start!r} overlaps span starting {a.start!r}",
                    )
                )

    distinct = {u.numeric_id for u in d.ground_truth.users}
    if len(distinct) != len(d.ground_truth.users):
        out.append(
            Violation(
                "user-numeric-id-unique", "ground_truth.users", "duplicate numeric_id"
            )
        )
    for u in d.ground_truth.users:
        if u.numeric_id < 1:
            out.append(
                Violation(
                    "user-numeric-id-positive",
                    f"user[{u.label}]",
                    f"numeric_id={u.numeric_id}",
                )
            )
    if d.n_users != len(distinct):
        out.append(
            Violation(
                "n-users-matches-distinct",
                "dataset",
                f"n_users={d.n_users}, distinct={len(distinct)}",
            )
        )

    return out


# ---------------------------------------------------------------------------
# Dataset directory persistence
# ---------------------------------------------------------------------------

RECORDS_FILE = "records.csv"
GROUND_TRUTH_FILE = "ground_truth.json"
INTERACTIONS_FILE = "interactions.json"


def interaction_to_dict(inter: Interaction) -> dict:
    return {
        "interaction_id": inter.interaction_id,
        "service": inter.service,
        "src_ip": inter.src_ip,
        "start": inter.start,
        "end": inter.end,
        "packets": [format_record_line(p) for p in inter.packets],
    }


def interaction_from_dict(doc: dict) -> Interaction:
    return Interaction(
        interaction_id=int(doc["interaction_id"]),
        service=doc["service"],
        src_ip=doc["src_ip"],
        start=float(doc["start"]),
        end=float(doc["end"]),
        packets=tuple(parse_record_line(line) for line in doc["packets"]),
    )


def write_json_atomic(path: Path, doc) -> None:
    """Serialize to JSON deterministically and rename into place."""
    path = Path(path)
    tmp = path.with_name(path.name + f".tmp-{os.getpid()}")
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True, indent=1)
        f.write("\n")
    os.replace(tmp, path)


def write_text_atomic(path: Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + f".tmp-{os.getpid()}")
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)


def write_records(path: Path, records: Iterable[PacketRecord]) -> None:
    write_text_atomic(
        Path(path), "".join(format_record_line(p) + "\n" for p in records)
    )


def save_dataset(d: Dataset, directory: Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_records(directory / RECORDS_FILE, d.records)
    write_json_atomic(directory / GROUND_TRUTH_FILE, d.ground_truth.to_dict())
    write_json_atomic(
        directory / INTERACTIONS_FILE,
        {
            "schema_version": DATASET_SCHEMA_VERSION,
            "interactions": [interaction_to_dict(i) for i in d.interactions],
        },
    )


def load_dataset(directory: Path) -> Dataset:
    from netident.ingest import parse_metadata  # local import avoids a cycle

    directory = Path(directory)
    with open(directory / RECORDS_FILE, "r", encoding="utf-8") as f:
        records = parse_metadata(f)
    with open(directory / GROUND_TRUTH_FILE, "r", encoding="utf-8") as f:
        gt = GroundTruth.from_dict(json.load(f))
    interactions: list[Interaction] = []
    ipath = directory / INTERACTIONS_FILE
    if ipath.exists():
        with open(ipath, "r", encoding="utf-8") as f:
            doc = json.load(f)
        interactions = [interaction_from_dict(x) for x in doc["interactions"]]
    return Dataset(
        records=records,
        interactions=interactions,
        ground_truth=gt,
        n_users=len(gt.users),
    )
