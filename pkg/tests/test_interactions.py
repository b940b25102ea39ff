"""Segmentation and feature tests.

The segmentation oracle below is a second implementation built from the
stated rule (sort, group, split on gap, drop short runs) using the stdlib
ipaddress module, sharing no code with the package.
"""

import ipaddress
import math

import pytest
from hypothesis import given, settings, strategies as st

from netident.interactions import (
    FEATURE_NAMES,
    FeatureVector,
    ServiceSignature,
    default_signatures,
    featurize,
    features_matrix,
    load_signatures,
    match_service,
    parse_cidr,
    reduction_report,
    save_signatures,
    segment_interactions,
)
from netident.model import Direction, Interaction, PacketRecord, Protocol

LOCALS = ("192.168.1.10", "192.168.1.11")

SIGS = [
    ServiceSignature("SvcA", dst_cidrs=("10.101.0.0/16",), dst_ports=frozenset({443})),
    ServiceSignature(
        "SvcB",
        dst_cidrs=("10.109.0.0/16",),
        dst_ports=frozenset({443, 3478}),
        min_packets=3,
        idle_gap_s=0.5,
    ),
]


def pkt(ts, local="192.168.1.10", remote="10.101.0.5", rport=443, up=True,
        length=100, proto=Protocol.TCP, flags=0, lport=50000):
    if up:
        return PacketRecord(ts, local, remote, lport, rport, length, proto, flags,
                            Direction.UPSTREAM)
    return PacketRecord(ts, remote, local, rport, lport, length, proto, flags,
                        Direction.DOWNSTREAM)


# ---------------------------------------------------------------------------
# match_service
# ---------------------------------------------------------------------------


def test_match_direct_containment():
    sig = ServiceSignature("S", dst_cidrs=("93.184.216.0/24",), dst_ports=frozenset({443}))
    assert match_service(pkt(0, remote="93.184.216.34"), [sig]) == "S"
    assert match_service(pkt(0, remote="93.184.217.34"), [sig]) is None
    assert match_service(pkt(0, remote="93.184.216.34", rport=80), [sig]) is None


def test_match_first_signature_wins():
    sigs = [
        ServiceSignature("First", dst_ports=frozenset({443})),
        ServiceSignature("Second", dst_cidrs=("10.101.0.0/16",)),
    ]
    assert match_service(pkt(0), sigs) == "First"


def test_match_none_when_uncovered():
    assert match_service(pkt(0, rport=22), SIGS) is None


def test_match_uses_remote_endpoint_for_downstream_packets():
    down = pkt(0, up=False)
    assert down.src_ip == "10.101.0.5"
    assert match_service(down, SIGS) == "SvcA"


def test_empty_constraint_is_wildcard():
    port_only = ServiceSignature("P", dst_ports=frozenset({3478}))
    assert match_service(pkt(0, remote="172.16.5.5", rport=3478), [port_only]) == "P"
    cidr_only = ServiceSignature("C", dst_cidrs=("10.0.0.0/8",))
    assert match_service(pkt(0, remote="10.200.0.1", rport=9999), [cidr_only]) == "C"


def test_signature_must_constrain_something():
    with pytest.raises(ValueError):
        ServiceSignature("X")
    with pytest.raises(ValueError):
        ServiceSignature("X", dst_ports=frozenset({443}), idle_gap_s=0)
    with pytest.raises(ValueError):
        ServiceSignature("X", dst_ports=frozenset({443}), min_packets=0)


@given(st.integers(min_value=0, max_value=0xFFFFFFFF), st.integers(min_value=0, max_value=32))
def test_parse_cidr_agrees_with_stdlib(addr_int, prefix):
    addr = str(ipaddress.IPv4Address(addr_int))
    net = ipaddress.IPv4Network(f"{addr}/{prefix}", strict=False)
    got_net, got_mask = parse_cidr(f"{addr}/{prefix}")
    assert got_net == int(net.network_address)
    assert got_mask == int(net.netmask)


# ---------------------------------------------------------------------------
# segment_interactions: stated examples
# ---------------------------------------------------------------------------


def test_gap_rule_hand_trace():
    times = [0.0, 0.2, 0.5, 2.0, 2.1]
    records = [pkt(t) for t in times]
    out = segment_interactions(records, SIGS)
    assert [len(i.packets) for i in out] == [3, 2]
    assert [p.timestamp for p in out[0].packets] == [0.0, 0.2, 0.5]
    assert [p.timestamp for p in out[1].packets] == [2.0, 2.1]
    assert out[0].interaction_id == 1 and out[1].interaction_id == 2
    assert out[0].start == 0.0 and out[0].end == 0.5


def test_single_packet_dropped():
    assert segment_interactions([pkt(1.0)], SIGS) == []


def test_gap_exactly_equal_joins():
    out = segment_interactions([pkt(0.0), pkt(1.0)], SIGS)
    assert len(out) == 1 and len(out[0].packets) == 2


def test_groups_never_merge_across_ips():
    records = [
        pkt(0.0, local=LOCALS[0]),
        pkt(0.1, local=LOCALS[1]),
        pkt(0.2, local=LOCALS[0]),
        pkt(0.3, local=LOCALS[1]),
    ]
    out = segment_interactions(records, SIGS)
    assert len(out) == 2
    assert {i.src_ip for i in out} == set(LOCALS)
    for i in out:
        assert all(p.local_ip() == i.src_ip for p in i.packets)


def test_mixed_direction_packets_share_an_interaction():
    records = [pkt(0.0, up=True), pkt(0.1, up=False), pkt(0.2, up=True)]
    out = segment_interactions(records, SIGS)
    assert len(out) == 1
    assert len(out[0].packets) == 3
    assert out[0].src_ip == "192.168.1.10"


def test_unsorted_input_is_sorted_first():
    records = [pkt(2.1), pkt(0.0), pkt(2.0), pkt(0.2), pkt(0.5)]
    out = segment_interactions(records, SIGS)
    assert [len(i.packets) for i in out] == [3, 2]


def test_per_service_gap_parameters():
    # SvcB uses gap 0.5 and min_packets 3
    records = [pkt(t, remote="10.109.0.2") for t in (0.0, 0.4, 0.8, 2.0, 2.4)]
    out = segment_interactions(records, SIGS)
    assert len(out) == 1
    assert [p.timestamp for p in out[0].packets] == [0.0, 0.4, 0.8]


# ---------------------------------------------------------------------------
# Oracle comparison on randomized streams
# ---------------------------------------------------------------------------


def oracle_segment(records, signatures):
    """Reference segmentation assembled from the rule text."""
    def svc_of(p):
        rip = ipaddress.IPv4Address(p.dst_ip if p.direction is Direction.UPSTREAM else p.src_ip)
        rport = p.dst_port if p.direction is Direction.UPSTREAM else p.src_port
        for s in signatures:
            if s.dst_ports and rport not in s.dst_ports:
                continue
            if s.dst_cidrs and not any(
                rip in ipaddress.IPv4Network(c, strict=False) for c in s.dst_cidrs
            ):
                continue
            return s
        return None

    groups = {}
    for p in sorted(records, key=lambda r: r.timestamp):
        s = svc_of(p)
        if s is None:
            continue
        local = p.src_ip if p.direction is Direction.UPSTREAM else p.dst_ip
        groups.setdefault((local, s.service, s.idle_gap_s, s.min_packets), []).append(p)

    bursts = []
    for (local, service, gap, minp), plist in groups.items():
        cur = [plist[0]]
        for prev, nxt in zip(plist, plist[1:]):
            if nxt.timestamp - prev.timestamp > gap:
                if len(cur) >= minp:
                    bursts.append((local, service, cur))
                cur = []
            cur.append(nxt)
        if len(cur) >= minp:
            bursts.append((local, service, cur))
    bursts.sort(key=lambda b: (b[2][0].timestamp, b[0], b[1]))
    return [
        (local, service, [p.timestamp for p in run]) for local, service, run in bursts
    ]


@st.composite
def packet_stream(draw):
    n = draw(st.integers(min_value=0, max_value=60))
    out = []
    for _ in range(n):
        ts = draw(st.floats(min_value=0, max_value=20, allow_nan=False, allow_infinity=False))
        local = draw(st.sampled_from(LOCALS))
        remote = draw(st.sampled_from(
            ["10.101.0.5", "10.101.200.9", "10.109.0.2", "172.16.0.9"]))
        rport = draw(st.sampled_from([443, 3478, 80]))
        up = draw(st.booleans())
        proto = draw(st.sampled_from([Protocol.TCP, Protocol.UDP]))
        flags = draw(st.integers(min_value=0, max_value=255)) if proto is Protocol.TCP else 0
        out.append(pkt(ts, local=local, remote=remote, rport=rport, up=up,
                       length=draw(st.integers(min_value=40, max_value=1500)),
                       proto=proto, flags=flags))
    return out


@settings(max_examples=120, deadline=None)
@given(packet_stream())
def test_segmentation_matches_oracle(records):
    got = segment_interactions(records, SIGS)
    simplified = [(i.src_ip, i.service, [p.timestamp for p in i.packets]) for i in got]
    assert simplified == oracle_segment(records, SIGS)


@settings(max_examples=120, deadline=None)
@given(packet_stream())
def test_gap_soundness_and_partition(records):
    out = segment_interactions(records, SIGS)
    gaps = {s.service: s.idle_gap_s for s in SIGS}

    seen = set()
    for inter in out:
        gap = gaps[inter.service]
        for a, b in zip(inter.packets, inter.packets[1:]):
            assert b.timestamp - a.timestamp <= gap
        for p in inter.packets:
            key = id(p)
            assert key not in seen  # each packet in at most one interaction
            seen.add(key)

    # neighbor gaps: consecutive interactions of one (src_ip, service) stream
    # are separated by more than the idle gap
    by_group = {}
    for inter in out:
        by_group.setdefault((inter.src_ip, inter.service), []).append(inter)
    for (ip, service), inters in by_group.items():
        inters.sort(key=lambda i: i.start)
        for a, b in zip(inters, inters[1:]):
            assert b.start - a.end > gaps[service]

    # determinism, including identifiers
    again = segment_interactions(records, SIGS)
    assert again == out


# ---------------------------------------------------------------------------
# featurize
# ---------------------------------------------------------------------------


def make_interaction(packets, service="SvcA"):
    plist = tuple(sorted(packets, key=lambda p: p.timestamp))
    return Interaction(1, service, plist[0].local_ip(), plist[0].timestamp,
                       plist[-1].timestamp, plist)


def test_featurize_hand_arithmetic():
    inter = make_interaction([
        pkt(0.0, length=100),
        pkt(2.0, length=300),
    ])
    f = featurize(inter)
    assert f.packet_count == 2
    assert f.total_bytes == 400
    assert f.mean_pkt_len == 200
    assert f.std_pkt_len == 100  # population std of {100, 300}
    assert f.duration_s == 2
    assert f.mean_inter_arrival_s == 2
    assert f.upstream_byte_fraction == 1.0
    assert f.push_flag_fraction == 0.0


def test_featurize_all_downstream():
    inter = make_interaction([pkt(0.0, up=False), pkt(0.5, up=False)])
    assert featurize(inter).upstream_byte_fraction == 0.0


def test_featurize_hour_encoding_at_0600():
    inter = make_interaction([pkt(6 * 3600.0), pkt(6 * 3600.0 + 0.5)])
    f = featurize(inter)
    assert f.hod_sin == pytest.approx(1.0, abs=1e-12)
    assert f.hod_cos == pytest.approx(0.0, abs=1e-12)


def test_featurize_push_fraction_counts_tcp_only():
    inter = make_interaction([
        pkt(0.0, flags=0x18),                        # TCP with PSH
        pkt(0.1, flags=0x10),                        # TCP without
        pkt(0.2, proto=Protocol.UDP, flags=0),       # ignored
    ])
    assert featurize(inter).push_flag_fraction == pytest.approx(0.5)


def test_featurize_non_tcp_interaction_zero_push():
    inter = make_interaction([
        pkt(0.0, proto=Protocol.UDP, rport=3478, remote="10.109.0.2"),
        pkt(0.2, proto=Protocol.UDP, rport=3478, remote="10.109.0.2"),
    ], service="SvcB")
    assert featurize(inter).push_flag_fraction == 0.0


@settings(max_examples=100, deadline=None)
@given(packet_stream())
def test_feature_bounds_over_generated_interactions(records):
    for inter in segment_interactions(records, SIGS):
        f = featurize(inter)
        assert 0.0 <= f.upstream_byte_fraction <= 1.0
        assert 0.0 <= f.push_flag_fraction <= 1.0
        assert f.duration_s >= 0.0
        assert abs(f.hod_sin ** 2 + f.hod_cos ** 2 - 1.0) <= 1e-9
        assert f.packet_count >= 2
        assert f.mean_pkt_len > 0


def test_features_matrix_shape_and_order():
    inter = make_interaction([pkt(0.0, length=100), pkt(2.0, length=300)])
    m = features_matrix([inter, inter])
    assert m.shape == (2, 10)
    f = featurize(inter)
    for col, name in enumerate(FEATURE_NAMES):
        assert m[0, col] == getattr(f, name)
    assert features_matrix([]).shape == (0, 10)


def test_feature_vector_array_round_trip():
    f = FeatureVector(2, 400, 200, 100, 2, 2, 1, 0, 0.5, math.sqrt(3) / 2)
    assert FeatureVector.from_array(f.as_array()) == f
    with pytest.raises(ValueError):
        FeatureVector.from_array([1.0, 2.0])


# ---------------------------------------------------------------------------
# Reduction report
# ---------------------------------------------------------------------------


def test_reduction_report_hand_counts():
    records = [pkt(t) for t in (0.0, 0.2, 0.5, 2.0, 2.1)]          # 5 SvcA packets
    records += [pkt(10.0, rport=22), pkt(11.0, remote="172.16.0.1")]  # unmatched
    inters = segment_interactions(records, SIGS)
    rep = reduction_report(records, inters, SIGS)
    by_service = {r.service: r for r in rep.rows}
    assert by_service["SvcA"].packets == 5
    assert by_service["SvcA"].interactions == 2
    assert by_service["SvcA"].reduction_pct == 60.0  # (1 - 2/5) * 100
    assert by_service["SvcB"].packets == 0
    assert by_service["SvcB"].reduction_pct is None
    assert rep.overall.packets == 5
    assert rep.overall.interactions == 2
    assert rep.unmatched_packets == 2


# ---------------------------------------------------------------------------
# Signature file
# ---------------------------------------------------------------------------


def test_signature_file_round_trip(tmp_path):
    path = tmp_path / "sigs.json"
    save_signatures(path, SIGS)
    assert load_signatures(path) == SIGS


def test_signature_file_requires_schema_version(tmp_path):
    path = tmp_path / "sigs.json"
    path.write_text('{"signatures": []}')
    with pytest.raises(ValueError):
        load_signatures(path)
    path.write_text('{"schema_version": 99, "signatures": []}')
    with pytest.raises(ValueError):
        load_signatures(path)


def test_default_signatures_cover_nine_services():
    sigs = default_signatures()
    assert len(sigs) == 9
    names = [s.service for s in sigs]
    assert names == ["YouTube", "Facebook", "Google", "Twitter", "Wikipedia",
                     "Hotmail", "Dropbox", "BBC", "Skype"]
    for s in sigs:
        assert s.min_packets == 2
        assert s.idle_gap_s == 1.0
