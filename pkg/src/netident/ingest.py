"""Capture ingestion: classic pcap files and canonical metadata text.

Both parsers produce :class:`~netident.model.PacketRecord` streams in file
order.  Direction is derived from a declared monitored-host address set:
a packet is UPSTREAM iff its wire source address belongs to that set.

Only the classic pcap container is supported (magic 0xa1b2c3d4, microsecond
timestamps, Ethernet link layer).  The per-packet ``length`` is the IP total
length header field, not the captured length, so snaplen truncation does not
distort byte counts.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import BinaryIO, Iterable, Optional, TextIO, Union

from netident.model import (
    Direction,
    LineFormatError,
    PacketRecord,
    Protocol,
    parse_record_line,
)

PCAP_MAGIC = 0xA1B2C3D4
PCAP_MAGIC_SWAPPED = 0xD4C3B2A1
GLOBAL_HEADER_LEN = 24
RECORD_HEADER_LEN = 16
LINKTYPE_ETHERNET = 1
ETHERTYPE_IPV4 = 0x0800
ETHERTYPE_IPV6 = 0x86DD


class InputKind(Enum):
    PCAP = "PCAP"
    METADATA = "METADATA"


@dataclass(frozen=True)
class IngestConfig:
    monitored_hosts: frozenset[str]
    input_kind: InputKind
    max_records: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "monitored_hosts", frozenset(self.monitored_hosts))
        if self.input_kind is InputKind.PCAP and not self.monitored_hosts:
            raise ValueError("monitored_hosts must be non-empty for PCAP input")
        if self.max_records is not None and self.max_records < 0:
            raise ValueError("max_records must be >= 0")


class PcapParseError(Exception):
    """Structurally broken pcap input; ``byte_offset`` locates the fault."""

    def __init__(self, message: str, byte_offset: int):
        super().__init__(f"{message} (byte offset {byte_offset})")
        self.byte_offset = byte_offset


class UnsupportedFormatError(Exception):
    """Recognizably not a classic pcap stream (bad magic or link type)."""


class MetadataParseError(Exception):
    """Malformed canonical metadata line; carries 1-based line and column."""

    def __init__(self, message: str, line_no: int, column: int):
        super().__init__(f"line {line_no}, column {column}: {message}")
        self.line_no = line_no
        self.column = column


@dataclass
class PcapResult:
    """Parsed records plus the bookkeeping needed to account for every frame:
    len(records) + skipped_non_ip + skipped_ipv6 + skipped_short equals
    frame_count."""

    records: list[PacketRecord] = field(default_factory=list)
    frame_count: int = 0
    skipped_non_ip: int = 0
    skipped_ipv6: int = 0
    skipped_short: int = 0

    @property
    def skipped_total(self) -> int:
        return self.skipped_non_ip + self.skipped_ipv6 + self.skipped_short


def _decode_frame(data: bytes, monitored: frozenset[str]) -> Union[PacketRecord, str]:
    """Decode one Ethernet frame; returns a record or a skip-reason key."""
    if len(data) < 14:
        return "short"
    ethertype = (data[12] << 8) | data[13]
    if ethertype == ETHERTYPE_IPV6:
        return "ipv6"
    if ethertype != ETHERTYPE_IPV4:
        return "non_ip"

    ip = data[14:]
    if len(ip) < 20:
        return "short"
    version = ip[0] >> 4
    if version != 4:
        return "non_ip"
    ihl = (ip[0] & 0x0F) * 4
    if ihl < 20 or len(ip) < ihl:
        return "short"
    total_length = (ip[2] << 8) | ip[3]
    frag_field = (ip[6] << 8) | ip[7]
    frag_offset = frag_field & 0x1FFF
    proto_num = ip[9]
    src_ip = ".".join(str(b) for b in ip[12:16])
    dst_ip = ".".join(str(b) for b in ip[16:20])

    protocol = Protocol.OTHER
    src_port = dst_port = 0
    tcp_flags = 0
    if frag_offset == 0:
        # Ports and flags only exist in the first fragment.
        payload = ip[ihl:]
        if proto_num == 6:
            protocol = Protocol.TCP
            if len(payload) >= 14:
                src_port = (payload[0] << 8) | payload[1]
                dst_port = (payload[2] << 8) | payload[3]
                tcp_flags = payload[13]
        elif proto_num == 17:
            protocol = Protocol.UDP
            if len(payload) >= 4:
                src_port = (payload[0] << 8) | payload[1]
                dst_port = (payload[2] << 8) | payload[3]

    direction = Direction.UPSTREAM if src_ip in monitored else Direction.DOWNSTREAM
    return PacketRecord(
        timestamp=0.0,  # caller fills in from the record header
        src_ip=src_ip,
        dst_ip=dst_ip,
        src_port=src_port,
        dst_port=dst_port,
        length=total_length,
        protocol=protocol,
        tcp_flags=tcp_flags,
        direction=direction,
    )


def parse_pcap(stream: BinaryIO, cfg: IngestConfig) -> PcapResult:
    """Parse a classic pcap byte stream.

    Emits one record per IPv4 frame; ARP and other non-IP frames, IPv6
    frames, and frames captured too short to decode are counted and skipped.
    Raises :class:`PcapParseError` with the byte offset on truncation and
    :class:`UnsupportedFormatError` on an unrecognized magic or link type.
    """
    header = stream.read(GLOBAL_HEADER_LEN)
    if len(header) < 4:
        raise PcapParseError("truncated global header", len(header))
    magic = struct.unpack("<I", header[:4])[0]
    if magic == PCAP_MAGIC:
        endian = "<"
    elif magic == PCAP_MAGIC_SWAPPED:
        endian = ">"
    else:
        raise UnsupportedFormatError(
            f"not a classic pcap stream (magic 0x{magic:08x})"
        )
    if len(header) < GLOBAL_HEADER_LEN:
        raise PcapParseError("truncated global header", len(header))
    _vmaj, _vmin, _zone, _sigfigs, _snaplen, network = struct.unpack(
        endian + "HHiIII", header[4:]
    )
    if network != LINKTYPE_ETHERNET:
        raise UnsupportedFormatError(f"unsupported link type {network}")

    result = PcapResult()
    offset = GLOBAL_HEADER_LEN
    rec_fmt = endian + "IIII"
    while True:
        if cfg.max_records is not None and len(result.records) >= cfg.max_records:
            break
        rh = stream.read(RECORD_HEADER_LEN)
        if not rh:
            break
        if len(rh) < RECORD_HEADER_LEN:
            raise PcapParseError("truncated record header", offset)
        ts_sec, ts_usec, incl_len, _orig_len = struct.unpack(rec_fmt, rh)
        offset += RECORD_HEADER_LEN
        data = stream.read(incl_len)
        if len(data) < incl_len:
            raise PcapParseError("truncated packet data", offset)
        result.frame_count += 1
        decoded = _decode_frame(data, cfg.monitored_hosts)
        if decoded == "non_ip":
            result.skipped_non_ip += 1
        elif decoded == "ipv6":
            result.skipped_ipv6 += 1
        elif decoded == "short":
            result.skipped_short += 1
        else:
            record = PacketRecord(
                timestamp=ts_sec + ts_usec / 1e6,
                src_ip=decoded.src_ip,
                dst_ip=decoded.dst_ip,
                src_port=decoded.src_port,
                dst_port=decoded.dst_port,
                length=decoded.length,
                protocol=decoded.protocol,
                tcp_flags=decoded.tcp_flags,
                direction=decoded.direction,
            )
            result.records.append(record)
        offset += incl_len
    return result


def parse_pcap_file(path: Union[str, Path], cfg: IngestConfig) -> PcapResult:
    with open(path, "rb") as f:
        return parse_pcap(f, cfg)


def parse_metadata(
    stream: Union[TextIO, Iterable[str]], max_records: Optional[int] = None
) -> list[PacketRecord]:
    """Parse canonical metadata text, one record per non-blank line.

    Raises :class:`MetadataParseError` naming the 1-based line and column of
    the first malformed field.
    """
    records: list[PacketRecord] = []
    for line_no, raw in enumerate(stream, start=1):
        line = raw.strip()
        if not line:
            continue
        if max_records is not None and len(records) >= max_records:
            break
        try:
            records.append(parse_record_line(line))
        except LineFormatError as e:
            column = 1
            if e.field_index > 0:
                parts = line.split(",")
                column = sum(len(p) + 1 for p in parts[: e.field_index]) + 1
            raise MetadataParseError(str(e), line_no, column) from None
    return records


def parse_metadata_file(
    path: Union[str, Path], max_records: Optional[int] = None
) -> list[PacketRecord]:
    with open(path, "r", encoding="utf-8") as f:
        return parse_metadata(f, max_records)
