"""Capture and flow-record input, plus stratified dataset splits.

Flow-record files are JSON lines. The first line is an optional header::

    {"format": "segmatch-flows", "version": 1}

and every further line is one flow::

    {"label": 2, "key": [src, dst, sport, dport, proto], "first_src": src,
     "packets": [[timestamp_ms, signed_feature], ...]}

``label`` may be null. Addresses are unsigned 32-bit integers.
"""
from __future__ import annotations

import collections
import dataclasses
import json
import logging
import struct
from typing import Iterable, Optional, Sequence

import numpy as np

from .flows import (ADMITTED_PROTOCOLS, BidiFlow, FiveTuple, PacketRecord,
                    canonical_key)

log = logging.getLogger(__name__)

FLOW_FORMAT = "segmatch-flows"
FLOW_FORMAT_VERSION = 1

PCAP_MAGIC_US = 0xA1B2C3D4
PCAP_MAGIC_NS = 0xA1B23C4D
LINKTYPE_ETHERNET = 1
ETH_IPV4 = 0x0800
ETH_IPV6 = 0x86DD


class PcapError(ValueError):
    pass


class PcapFormatError(PcapError):
    pass


class PcapTruncatedError(PcapError):
    def __init__(self, message, offset):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class FlowRecordError(ValueError):
    def __init__(self, message, line_no):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def _pcap_header(data: bytes):
    if len(data) < 24:
        raise PcapTruncatedError("global header shorter than 24 bytes", len(data))
    for endian in ("<", ">"):
        (magic,) = struct.unpack(endian + "I", data[:4])
        if magic in (PCAP_MAGIC_US, PCAP_MAGIC_NS):
            break
    else:
        raise PcapFormatError(f"bad pcap magic {data[:4].hex()}")
    _, _, _, _, _, linktype = struct.unpack(endian + "HHiIII", data[4:24])
    if linktype != LINKTYPE_ETHERNET:
        raise PcapFormatError(f"unsupported link type {linktype}")
    return endian, magic == PCAP_MAGIC_NS


def _decode_frame(frame: bytes, counters):
    """Return ``(FiveTuple, ip_total_length)`` or None for skipped frames."""
    if len(frame) < 14:
        counters["skipped_short_frame"] += 1
        return None
    ethertype = struct.unpack("!H", frame[12:14])[0]
    if ethertype == ETH_IPV6:
        counters["skipped_ipv6"] += 1
        return None
    if ethertype != ETH_IPV4:
        counters["skipped_non_ip"] += 1
        return None
    ip = frame[14:]
    if len(ip) < 20 or ip[0] >> 4 != 4:
        counters["skipped_bad_ip"] += 1
        return None
    ihl = (ip[0] & 0x0F) * 4
    total_len, frag = struct.unpack("!H2xH", ip[2:8])
    proto = ip[9]
    if ihl < 20 or total_len < 20:
        counters["skipped_bad_ip"] += 1
        return None
    if proto not in ADMITTED_PROTOCOLS:
        counters["skipped_protocol"] += 1
        return None
    if frag & 0x1FFF:
        counters["skipped_fragment"] += 1
        return None
    if len(ip) < ihl + 4:
        counters["skipped_truncated_l4"] += 1
        return None
    src, dst = struct.unpack("!II", ip[12:20])
    sport, dport = struct.unpack("!HH", ip[ihl:ihl + 4])
    return FiveTuple(src, dst, sport, dport, proto), total_len


def read_pcap(data: bytes, counters: Optional[collections.Counter] = None) -> list[PacketRecord]:
    """Decode Ethernet/IPv4/{TCP,UDP} packets from a classic pcap capture.

    Timestamps are rebased so the first record is at 0 ms. Skipped frames are
    tallied in ``counters`` by reason.
    """
    if counters is None:
        counters = collections.Counter()
    endian, nanos = _pcap_header(data)
    rec = struct.Struct(endian + "IIII")
    per_ms = 1_000_000 if nanos else 1_000
    off = 24
    first = None
    out = []
    while off < len(data):
        if off + 16 > len(data):
            raise PcapTruncatedError("truncated record header", off)
        sec, frac, incl, orig = rec.unpack_from(data, off)
        if incl > orig:
            raise PcapFormatError(f"captured length {incl} exceeds original {orig} at byte offset {off}")
        if off + 16 + incl > len(data):
            raise PcapTruncatedError("truncated record body", off)
        frame = data[off + 16:off + 16 + incl]
        ts = sec * per_ms * 1000 + frac
        if first is None:
            first = ts
        off += 16 + incl
        decoded = _decode_frame(frame, counters)
        if decoded is None:
            continue
        tup, length = decoded
        out.append(PacketRecord(max(0, (ts - first) // per_ms), tup, length))
    return out


def write_pcap(packets: Iterable[PacketRecord]) -> bytes:
    """Encode packet records as a little-endian microsecond pcap.

    Payload bytes are zero and only headers are captured, so the file stays
    small while IP total length carries the real size.
    """
    parts = [struct.pack("<IHHiIII", PCAP_MAGIC_US, 2, 4, 0, 0, 65535, LINKTYPE_ETHERNET)]
    for p in packets:
        t = p.tuple
        l4 = struct.pack("!HH", t.src_port, t.dst_port) + bytes(16 if t.protocol == 6 else 4)
        ip = struct.pack("!BBHHHBBHII", 0x45, 0, p.length, 0, 0, 64, t.protocol, 0,
                         t.src_addr, t.dst_addr)
        frame = bytes(12) + struct.pack("!H", ETH_IPV4) + ip + l4
        ms = p.timestamp_ms
        parts.append(struct.pack("<IIII", ms // 1000, (ms % 1000) * 1000,
                                 len(frame), max(len(frame), 14 + p.length)))
        parts.append(frame)
    return b"".join(parts)


def flow_to_record(flow: BidiFlow) -> dict:
    return {"label": flow.label, "key": flow.key.as_list(), "first_src": flow.first_src,
            "packets": [list(p) for p in flow.packets]}


def write_flow_records(flows: Iterable[BidiFlow]) -> str:
    lines = [json.dumps({"format": FLOW_FORMAT, "version": FLOW_FORMAT_VERSION})]
    lines += [json.dumps(flow_to_record(f), separators=(",", ":")) for f in flows]
    return "\n".join(lines) + "\n"


def _parse_flow(obj, line_no) -> BidiFlow:
    try:
        label = obj["label"]
        key = FiveTuple(*[int(x) for x in obj["key"]])
        first_src = int(obj["first_src"])
        packets = [(int(t), int(v)) for t, v in obj["packets"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise FlowRecordError(f"malformed flow record ({exc!r})", line_no) from None
    if label is not None and (not isinstance(label, int) or label < 0):
        raise FlowRecordError(f"label must be a non-negative integer or null, got {label!r}", line_no)
    if canonical_key(key) != key:
        raise FlowRecordError("key is not canonical", line_no)
    if first_src not in (key.src_addr, key.dst_addr):
        raise FlowRecordError("first_src is not an endpoint of the key", line_no)
    prev = None
    for i, (t, v) in enumerate(packets):
        if v == 0:
            raise FlowRecordError(f"packet {i} has feature 0", line_no)
        if abs(v) > 32767:
            raise FlowRecordError(f"packet {i} feature {v} exceeds 16 bits", line_no)
        if t < 0 or (prev is not None and t < prev):
            raise FlowRecordError(f"packet {i} timestamp goes backwards", line_no)
        prev = t
    if packets and packets[0][1] < 0:
        raise FlowRecordError("first packet must be forward (positive)", line_no)
    return BidiFlow(key=key, first_src=first_src, packets=tuple(packets), label=label)


def read_flow_records(text: str) -> list[BidiFlow]:
    flows = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FlowRecordError(f"invalid JSON ({exc.msg})", line_no) from None
        if not isinstance(obj, dict):
            raise FlowRecordError("record is not an object", line_no)
        if "format" in obj:
            if obj["format"] != FLOW_FORMAT or obj.get("version") != FLOW_FORMAT_VERSION:
                raise FlowRecordError(
                    f"unsupported format {obj.get('format')!r} version {obj.get('version')!r}", line_no)
            continue
        flows.append(_parse_flow(obj, line_no))
    return flows


@dataclasses.dataclass
class DatasetSplit:
    train: list[BidiFlow]
    validation: list[BidiFlow]
    test: list[BidiFlow]
    ratios: tuple[float, float, float]
    seed: int


def split_dataset(flows: Sequence[BidiFlow], ratios=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    """Stratified train/validation/test split.

    Each part keeps the input order. Classes with fewer than 3 flows go to
    train entirely, with a warning.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    by_class: dict = collections.defaultdict(list)
    for i, f in enumerate(flows):
        by_class[f.label].append(i)
    part = np.zeros(len(flows), dtype=int)
    for label in sorted(by_class, key=lambda x: (x is None, x)):
        idx = np.array(by_class[label])
        if len(idx) < 3:
            log.warning("class %s has %d flows; assigning all to train", label, len(idx))
            continue
        idx = idx[rng.permutation(len(idx))]
        n_val = int(np.floor(ratios[1] * len(idx) + 0.5))
        n_test = min(int(np.floor(ratios[2] * len(idx) + 0.5)), len(idx) - n_val)
        n_train = len(idx) - n_val - n_test
        part[idx[n_train:n_train + n_val]] = 1
        part[idx[n_train + n_val:]] = 2
    parts = [[f for f, p in zip(flows, part) if p == k] for k in range(3)]
    return DatasetSplit(parts[0], parts[1], parts[2], tuple(ratios), seed)
