import collections
import json
import struct

import pytest
from hypothesis import given, settings, strategies as st

from segmatch.flows import BidiFlow, FiveTuple, SynthConfig, canonical_key, generate_synthetic, flows_to_trace
from segmatch.ingest import (FlowRecordError, PcapFormatError, PcapError, PcapTruncatedError,
                             read_flow_records, read_pcap, split_dataset, write_flow_records, write_pcap)
from support import eth_ipv4_frame, pcap_global_header, pcap_record

SRC, DST = 0xC0A80001, 0xC0A80002


class TestReadPcap:
    def test_header_only(self):
        assert read_pcap(pcap_global_header()) == []

    def test_single_udp_packet(self):
        data = pcap_global_header() + pcap_record(eth_ipv4_frame(SRC, DST, 5000, 53, 17, 512), sec=3, frac=250_000)
        (rec,) = read_pcap(data)
        assert rec.length == 512
        assert rec.tuple == FiveTuple(SRC, DST, 5000, 53, 17)
        assert rec.timestamp_ms == 0

    def test_arp_and_udp(self):
        arp = b"\xff" * 6 + b"\x11" * 6 + struct.pack("!H", 0x0806) + bytes(28)
        data = (pcap_global_header() + pcap_record(arp)
                + pcap_record(eth_ipv4_frame(SRC, DST, 1, 2, 17, 100), frac=5000))
        counters = collections.Counter()
        recs = read_pcap(data, counters)
        assert len(recs) == 1 and counters["skipped_non_ip"] == 1
        assert recs[0].timestamp_ms == 5

    def test_ipv6_and_fragments_and_icmp_skipped(self):
        v6 = bytes(12) + struct.pack("!H", 0x86DD) + bytes(40)
        frag = eth_ipv4_frame(SRC, DST, 1, 2, 6, 200, frag=0x0010)
        icmp = eth_ipv4_frame(SRC, DST, 0, 0, 1, 84)
        counters = collections.Counter()
        data = pcap_global_header() + b"".join(pcap_record(f) for f in (v6, frag, icmp))
        assert read_pcap(data, counters) == []
        assert counters == {"skipped_ipv6": 1, "skipped_fragment": 1, "skipped_protocol": 1}

    def test_big_endian_and_nanosecond_magic(self):
        frame = eth_ipv4_frame(SRC, DST, 7, 8, 6, 60)
        be = pcap_global_header(endian=">") + pcap_record(frame, 1, 0, ">") + pcap_record(frame, 1, 2000, ">")
        assert [r.timestamp_ms for r in read_pcap(be)] == [0, 2]
        ns = pcap_global_header(magic=0xA1B23C4D) + pcap_record(frame, 0, 0) + pcap_record(frame, 0, 7_000_000)
        assert [r.timestamp_ms for r in read_pcap(ns)] == [0, 7]

    def test_bad_magic(self):
        with pytest.raises(PcapFormatError):
            read_pcap(b"\x00" * 24)

    def test_non_ethernet_link(self):
        with pytest.raises(PcapFormatError):
            read_pcap(pcap_global_header(linktype=101))

    def test_truncated_record_reports_offset(self):
        data = pcap_global_header() + pcap_record(eth_ipv4_frame(SRC, DST, 1, 2))
        with pytest.raises(PcapTruncatedError) as exc:
            read_pcap(data[:-3])
        assert exc.value.offset == 24
        with pytest.raises(PcapTruncatedError) as exc:
            read_pcap(data + b"\x00" * 5)
        assert exc.value.offset == len(data)

    def test_captured_longer_than_original(self):
        frame = eth_ipv4_frame(SRC, DST, 1, 2)
        with pytest.raises(PcapFormatError):
            read_pcap(pcap_global_header() + pcap_record(frame, orig=len(frame) - 1))

    @settings(max_examples=300, deadline=None)
    @given(st.binary(max_size=200))
    def test_fuzz_never_crashes(self, tail):
        for data in (tail, pcap_global_header() + tail):
            try:
                read_pcap(data)
            except PcapError:
                pass

    @settings(max_examples=100, deadline=None)
    @given(st.data())
    def test_mutation_fuzz(self, data):
        base = bytearray(pcap_global_header() + b"".join(
            pcap_record(eth_ipv4_frame(SRC, DST, i, 80, 6, 60 + i), frac=i * 1000) for i in range(4)))
        for _ in range(data.draw(st.integers(1, 6))):
            i = data.draw(st.integers(0, len(base) - 1))
            base[i] = data.draw(st.integers(0, 255))
        try:
            read_pcap(bytes(base))
        except PcapError:
            pass

    def test_writer_round_trip(self):
        flows, _ = generate_synthetic(SynthConfig(num_classes=2, flows_per_class=3, seed=4))
        trace = flows_to_trace(flows)
        back = read_pcap(write_pcap(trace))
        first = trace[0].timestamp_ms
        assert [(r.timestamp_ms, r.tuple, r.length) for r in back] == \
               [(r.timestamp_ms - first, r.tuple, r.length) for r in trace]


class TestFlowRecords:
    def test_round_trip(self):
        flows, _ = generate_synthetic(SynthConfig(num_classes=3, flows_per_class=10, seed=2))
        text = write_flow_records(flows)
        assert read_flow_records(text) == flows
        assert write_flow_records(read_flow_records(text)) == text

    def test_empty(self):
        assert read_flow_records("") == []

    def _line(self, **over):
        rec = {"label": 1, "key": [1, 2, 10, 20, 6], "first_src": 1, "packets": [[0, 100], [5, -40]]}
        rec.update(over)
        return json.dumps(rec)

    def test_valid_line(self):
        (f,) = read_flow_records(self._line())
        assert f.features == (100, -40) and f.label == 1

    @pytest.mark.parametrize("over", [
        {"packets": [[0, 100], [1, 0]]},
        {"packets": [[0, -100]]},
        {"packets": [[5, 100], [4, 10]]},
        {"key": [2, 1, 20, 10, 6]},
        {"first_src": 9},
        {"label": -1},
        {"packets": "nope"},
    ])
    def test_invalid_lines(self, over):
        text = self._line() + "\n" + self._line(**over)
        with pytest.raises(FlowRecordError) as exc:
            read_flow_records(text)
        assert exc.value.line_no == 2

    def test_bad_json_and_version(self):
        with pytest.raises(FlowRecordError):
            read_flow_records("{not json")
        with pytest.raises(FlowRecordError):
            read_flow_records(json.dumps({"format": "segmatch-flows", "version": 99}))


def _labeled(counts):
    out = []
    for label, n in enumerate(counts):
        for i in range(n):
            t = canonical_key(FiveTuple(label + 1, 1000 + i, 1, 2, 6))
            out.append(BidiFlow(t, t.src_addr, ((0, 10 + i),), label))
    return out


class TestSplit:
    def test_single_class_sizes(self):
        s = split_dataset(_labeled([100]), seed=0)
        assert (len(s.train), len(s.validation), len(s.test)) == (80, 10, 10)

    def test_deterministic(self):
        flows = _labeled([30, 40])
        assert split_dataset(flows, seed=3) == split_dataset(flows, seed=3)

    def test_tiny_class_goes_to_train(self, caplog):
        s = split_dataset(_labeled([2, 50]), seed=0)
        assert sum(f.label == 0 for f in s.train) == 2
        assert "assigning all to train" in caplog.text

    def test_bad_ratios(self):
        with pytest.raises(ValueError):
            split_dataset(_labeled([10]), ratios=(0.5, 0.2, 0.2))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(3, 60), min_size=1, max_size=5), st.integers(0, 1000))
    def test_partition_and_proportions(self, counts, seed):
        flows = _labeled(counts)
        s = split_dataset(flows, seed=seed)
        parts = [s.train, s.validation, s.test]
        keys = [f.key for p in parts for f in p]
        assert sorted(keys) == sorted(f.key for f in flows) and len(set(keys)) == len(keys)
        for label, n in enumerate(counts):
            for part, r in zip(parts, (0.8, 0.1, 0.1)):
                assert abs(sum(f.label == label for f in part) - r * n) <= 1
