"""Service matching, burst segmentation and feature extraction.

Packets are attributed to services by endpoint signatures (CIDR blocks and
ports of the service side).  Within each (monitored host, service) stream,
consecutive packets closer than the signature's idle gap form one
Interaction; short bursts are discarded.  Each interaction reduces to a
10-dimensional FeatureVector.

Signatures test the remote endpoint of a packet, not the literal wire
destination, so upstream and downstream packets of one conversation land in
the same interaction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from netident.model import (
    Interaction,
    PacketRecord,
    Protocol,
    data_reduction_pct,
    ip_to_int,
    write_json_atomic,
)

SIGNATURE_SCHEMA_VERSION = 1

TCP_PSH = 0x08


def parse_cidr(cidr: str) -> tuple[int, int]:
    """'a.b.c.d/n' -> (network int, mask int); a bare address means /32."""
    if "/" in cidr:
        addr, _, prefix_s = cidr.partition("/")
        if not prefix_s.isdigit():
            raise ValueError(f"bad CIDR prefix: {cidr!r}")
        prefix = int(prefix_s)
        if prefix > 32:
            raise ValueError(f"bad CIDR prefix: {cidr!r}")
    else:
        addr, prefix = cidr, 32
    mask = 0 if prefix == 0 else (0xFFFFFFFF << (32 - prefix)) & 0xFFFFFFFF
    net = ip_to_int(addr) & mask
    return net, mask


@dataclass(frozen=True)
class ServiceSignature:
    """Endpoint rule attributing packets to one service.

    An empty dst_cidrs or dst_ports acts as a wildcard for that dimension;
    at least one of the two must constrain.
    """

    service: str
    dst_cidrs: tuple[str, ...] = ()
    dst_ports: frozenset[int] = frozenset()
    min_packets: int = 2
    idle_gap_s: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "dst_cidrs", tuple(self.dst_cidrs))
        object.__setattr__(self, "dst_ports", frozenset(self.dst_ports))
        if not self.dst_cidrs and not self.dst_ports:
            raise ValueError(f"signature for {self.service!r} constrains nothing")
        if self.min_packets < 1:
            raise ValueError("min_packets must be >= 1")
        if not self.idle_gap_s > 0:
            raise ValueError("idle_gap_s must be > 0")
        for c in self.dst_cidrs:
            parse_cidr(c)

    def matches(self, p: PacketRecord) -> bool:
        return self._matches_endpoint(ip_to_int(p.remote_ip()), p.remote_port())

    def _matches_endpoint(self, remote_int: int, remote_port: int) -> bool:
        if self.dst_ports and remote_port not in self.dst_ports:
            return False
        if self.dst_cidrs:
            for c in self.dst_cidrs:
                net, mask = parse_cidr(c)
                if remote_int & mask == net:
                    return True
            return False
        return True


class _CompiledSignature:
    """Precomputed CIDR ints so stream scans avoid string parsing."""

    __slots__ = ("service", "nets", "ports", "min_packets", "idle_gap_s")

    def __init__(self, sig: ServiceSignature):
        self.service = sig.service
        self.nets = [parse_cidr(c) for c in sig.dst_cidrs]
        self.ports = sig.dst_ports
        self.min_packets = sig.min_packets
        self.idle_gap_s = sig.idle_gap_s

    def matches(self, remote_int: int, remote_port: int) -> bool:
        if self.ports and remote_port not in self.ports:
            return False
        if self.nets:
            for net, mask in self.nets:
                if remote_int & mask == net:
                    return True
            return False
        return True


def match_service(
    p: PacketRecord, signatures: Sequence[ServiceSignature]
) -> Optional[str]:
    """First signature (in list order) matching the packet's remote endpoint."""
    for sig in signatures:
        if sig.matches(p):
            return sig.service
    return None


def segment_interactions(
    records: Sequence[PacketRecord], signatures: Sequence[ServiceSignature]
) -> list[Interaction]:
    """Split matched packets into idle-gap-bounded interactions.

    Records are sorted by timestamp first (stable, so equal timestamps keep
    input order).  Within each (monitored host, service) substream, a gap
    strictly greater than the signature's idle_gap_s closes the current
    interaction; interactions shorter than min_packets are dropped.  Output
    is sorted by start time and identifiers are assigned in that order, so
    equal inputs always produce identical output.
    """
    compiled = [_CompiledSignature(s) for s in signatures]
    ordered = sorted(records, key=lambda r: r.timestamp)

    open_runs: dict[tuple[str, str], list[PacketRecord]] = {}
    finished: list[tuple[str, str, list[PacketRecord]]] = []

    for p in ordered:
        try:
            remote_int = ip_to_int(p.remote_ip())
        except ValueError:
            continue
        service = None
        for sig in compiled:
            if sig.matches(remote_int, p.remote_port()):
                service = sig.service
                gap = sig.idle_gap_s
                min_packets = sig.min_packets
                break
        if service is None:
            continue
        key = (p.local_ip(), service)
        run = open_runs.get(key)
        if run is not None and p.timestamp - run[-1].timestamp > gap:
            if len(run) >= min_packets:
                finished.append((key[0], service, run))
            run = None
        if run is None:
            open_runs[key] = [p]
        else:
            run.append(p)

    min_by_service = {c.service: c.min_packets for c in compiled}
    for (local, service), run in open_runs.items():
        if len(run) >= min_by_service[service]:
            finished.append((local, service, run))

    finished.sort(key=lambda t: (t[2][0].timestamp, t[0], t[1]))
    return [
        Interaction(
            interaction_id=i + 1,
            service=service,
            src_ip=local,
            start=run[0].timestamp,
            end=run[-1].timestamp,
            packets=tuple(run),
        )
        for i, (local, service, run) in enumerate(finished)
    ]


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------

FEATURE_NAMES = (
    "packet_count",
    "total_bytes",
    "mean_pkt_len",
    "std_pkt_len",
    "duration_s",
    "mean_inter_arrival_s",
    "upstream_byte_fraction",
    "push_flag_fraction",
    "hod_sin",
    "hod_cos",
)

FEATURE_DIM = len(FEATURE_NAMES)


@dataclass(frozen=True)
class FeatureVector:
    packet_count: float
    total_bytes: float
    mean_pkt_len: float
    std_pkt_len: float
    duration_s: float
    mean_inter_arrival_s: float
    upstream_byte_fraction: float
    push_flag_fraction: float
    hod_sin: float
    hod_cos: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [getattr(self, name) for name in FEATURE_NAMES], dtype=np.float64
        )

    @classmethod
    def from_array(cls, a) -> "FeatureVector":
        values = [float(v) for v in a]
        if len(values) != FEATURE_DIM:
            raise ValueError(f"expected {FEATURE_DIM} features, got {len(values)}")
        return cls(*values)


def featurize(inter: Interaction) -> FeatureVector:
    """Summarize an interaction as 10 floats.

    Byte quantities use the IP total length; the clock features encode the
    UTC hour of day of the interaction start on the unit circle so 23:00 and
    01:00 are near each other.
    """
    n = len(inter.packets)
    lengths = [p.length for p in inter.packets]
    total = float(sum(lengths))
    mean_len = total / n
    var = sum((x - mean_len) ** 2 for x in lengths) / n
    std_len = math.sqrt(var)
    duration = inter.end - inter.start
    mean_iat = duration / (n - 1) if n > 1 else 0.0

    up_bytes = sum(
        p.length for p in inter.packets if p.local_ip() == p.src_ip
    )
    up_frac = up_bytes / total if total > 0 else 0.0

    tcp_n = 0
    push_n = 0
    for p in inter.packets:
        if p.protocol is Protocol.TCP:
            tcp_n += 1
            if p.tcp_flags & TCP_PSH:
                push_n += 1
    push_frac = push_n / tcp_n if tcp_n else 0.0

    hour = (inter.start % 86400.0) / 3600.0
    angle = 2.0 * math.pi * hour / 24.0

    return FeatureVector(
        packet_count=float(n),
        total_bytes=total,
        mean_pkt_len=mean_len,
        std_pkt_len=std_len,
        duration_s=duration,
        mean_inter_arrival_s=mean_iat,
        upstream_byte_fraction=up_frac,
        push_flag_fraction=push_frac,
        hod_sin=math.sin(angle),
        hod_cos=math.cos(angle),
    )


def features_matrix(interactions: Sequence[Interaction]) -> np.ndarray:
    """Stack featurize() over interactions into an (n, 10) array."""
    if not interactions:
        return np.empty((0, FEATURE_DIM), dtype=np.float64)
    return np.stack([featurize(i).as_array() for i in interactions])


# ---------------------------------------------------------------------------
# Reduction report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReductionRow:
    service: str
    packets: int
    interactions: int
    reduction_pct: Optional[float]  # None when no packets matched


@dataclass(frozen=True)
class ReductionReport:
    rows: tuple[ReductionRow, ...]
    overall: ReductionRow
    unmatched_packets: int


def reduction_report(
    records: Sequence[PacketRecord],
    interactions: Sequence[Interaction],
    signatures: Sequence[ServiceSignature],
) -> ReductionReport:
    """Per-service packet and interaction counts with reduction percentages.

    The overall row aggregates matched packets only; packets matching no
    signature are reported separately.
    """
    compiled = [_CompiledSignature(s) for s in signatures]
    pkt_counts = {s.service: 0 for s in signatures}
    unmatched = 0
    for p in records:
        try:
            remote_int = ip_to_int(p.remote_ip())
        except ValueError:
            unmatched += 1
            continue
        for sig in compiled:
            if sig.matches(remote_int, p.remote_port()):
                pkt_counts[sig.service] += 1
                break
        else:
            unmatched += 1

    inter_counts = {s.service: 0 for s in signatures}
    for i in interactions:
        if i.service in inter_counts:
            inter_counts[i.service] += 1

    rows = []
    for s in signatures:
        pk, ic = pkt_counts[s.service], inter_counts[s.service]
        pct = data_reduction_pct(pk, ic) if pk > 0 else None
        rows.append(ReductionRow(s.service, pk, ic, pct))

    tot_p = sum(pkt_counts.values())
    tot_i = sum(inter_counts.values())
    overall = ReductionRow(
        "overall", tot_p, tot_i, data_reduction_pct(tot_p, tot_i) if tot_p else None
    )
    return ReductionReport(tuple(rows), overall, unmatched)


# ---------------------------------------------------------------------------
# Signature configuration file
# ---------------------------------------------------------------------------


def load_signatures(path: Union[str, Path]) -> list[ServiceSignature]:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    version = doc.get("schema_version")
    if version != SIGNATURE_SCHEMA_VERSION:
        raise ValueError(
            f"unsupported signature schema_version {version!r} "
            f"(expected {SIGNATURE_SCHEMA_VERSION})"
        )
    out = []
    for entry in doc["signatures"]:
        out.append(
            ServiceSignature(
                service=entry["service"],
                dst_cidrs=tuple(entry.get("dst_cidrs", ())),
                dst_ports=frozenset(entry.get("dst_ports", ())),
                min_packets=int(entry.get("min_packets", 2)),
                idle_gap_s=float(entry.get("idle_gap_s", 1.0)),
            )
        )
    return out


def save_signatures(path: Union[str, Path], signatures: Sequence[ServiceSignature]) -> None:
    write_json_atomic(
        Path(path),
        {
            "schema_version": SIGNATURE_SCHEMA_VERSION,
            "signatures": [
                {
                    "service": s.service,
                    "dst_cidrs": list(s.dst_cidrs),
                    "dst_ports": sorted(s.dst_ports),
                    "min_packets": s.min_packets,
                    "idle_gap_s": s.idle_gap_s,
                }
                for s in signatures
            ],
        },
    )


def default_signatures() -> list[ServiceSignature]:
    """Signature table matching the bundled synthetic traffic layout."""
    path = Path(__file__).parent / "data" / "default_signatures.json"
    return load_signatures(path)
