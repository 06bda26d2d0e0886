import numpy as np
import pytest

from segmatch.backup import BackupTree, Leaf, Split
from segmatch.dataplane import (Cause, SimConfig, SimConfigError, Simulator, _oracle_lookup, oracle_classify,
                                read_verdicts, resource_report, run_trace, write_verdicts)
from segmatch.flows import BidiFlow, FiveTuple, PacketRecord, canonical_key, flow_packets, flows_to_trace
from segmatch.keyseg import KeySegment
from segmatch.tables import compile_tables
from support import member_flow, member_pool, random_flow, random_tables

A, B = 0x0A000001, 0x0A000002
FWD = FiveTuple(A, B, 40000, 443, 6)
REV = FWD.reverse()
LEAF = BackupTree(Leaf(9), 4, 0)


def seg(cls, ranges, score=5.0):
    slots = tuple(ranges) + (None,) * (4 - len(ranges))
    vals = tuple(tuple(sorted({lo, hi})) for lo, hi in ranges) + ((),) * (4 - len(ranges))
    return KeySegment(cls, slots, score, vals)


def sim_for(segs, variant="tcam", tree=LEAF, **kw):
    tables = compile_tables(segs, strict=False)
    return Simulator(tables, tree, SimConfig(variant=variant, **kw))


def packets(values, gaps=None, start=0, fwd=FWD):
    out, t = [], start
    for i, v in enumerate(values):
        if i:
            t += 10 if gaps is None else gaps[i - 1]
        out.append(PacketRecord(t, fwd if v > 0 else fwd.reverse(), abs(v)))
    return out


class TestWalkthrough:
    @pytest.mark.parametrize("variant", ["tcam", "sram"])
    def test_register_evolution_and_class_6_at_packet_4(self, variant):
        segs = [seg(6, [(512, 512), (-253, -253), (443, 443), (-890, -890)], 9.0),
                seg(1, [(100, 120), (-300, -280)], 4.0)]
        sim = sim_for(segs, variant)
        key = canonical_key(FWD)
        windows, events = [], []
        for p in packets([512, -253, 443, -890, 700]):
            events.append(sim.process_packet(p))
            windows.append(list(sim.states[key].window))
        assert windows[:4] == [[0, 0, 0, 512], [0, 0, 512, -253], [0, 512, -253, 443], [512, -253, 443, -890]]
        assert events[:3] == [None, None, None]
        ev = events[3]
        assert (ev.verdict, ev.cause, ev.index, ev.provenance) == (6, Cause.SEGMENT, 4, 0)
        assert events[4] is None and sim.counters["bypassed"] == 1


class TestTriggers:
    def test_short_segment_uses_rightmost_slots(self):
        sim = sim_for([seg(3, [(10, 20), (-40, -30)])])
        evs = [sim.process_packet(p) for p in packets([500, 700, 15, -35])]
        assert evs[3].cause == Cause.SEGMENT and evs[3].index == 4

    def test_short_segment_waits_for_enough_packets(self):
        # the zero padding must not satisfy a real slot
        sim = sim_for([seg(3, [(-5, 5), (10, 20)])])
        assert sim.process_packet(packets([15])[0]) is None

    def test_packet_count_trigger_on_packet_31(self):
        sim = sim_for([seg(0, [(1, 2), (3, 4)])])
        evs = [sim.process_packet(p) for p in packets([700] * 35)]
        (i,) = [k for k, e in enumerate(evs) if e is not None]
        assert i == 30 and evs[i].cause == Cause.BACKUP_PKT and evs[i].verdict == 9 and evs[i].index == 31

    def test_segment_beats_count_trigger_on_the_same_packet(self):
        sim = sim_for([seg(2, [(700, 700), (-60, -60)])])
        evs = [sim.process_packet(p) for p in packets([700] * 30 + [-60])]
        assert evs[30].cause == Cause.SEGMENT

    def test_time_trigger_uses_stored_tree_verdict(self):
        tree = BackupTree(Split(0, 100, Leaf(1), Leaf(2)), 4, 1)
        sim = sim_for([seg(0, [(1, 2), (3, 4)])], tree=tree)
        evs = [sim.process_packet(p) for p in packets([700, 50, 50, 50, 50], gaps=[5, 5, 5, 300])]
        assert evs[4].cause == Cause.BACKUP_TIME and evs[4].index == 5
        # verdict from the window at packet 4 ([700, 50, 50, 50] -> feature 0 is 700)
        assert evs[4].verdict == 2
        assert sim.counters.get("dt_fallback", 0) == 0

    def test_time_trigger_before_l_max_falls_back(self):
        tree = BackupTree(Split(0, 0, Leaf(1), Leaf(2)), 4, 1)
        sim = sim_for([seg(0, [(1, 2), (3, 4)])], tree=tree)
        evs = [sim.process_packet(p) for p in packets([700, 50], gaps=[1000])]
        assert evs[1].cause == Cause.BACKUP_TIME and evs[1].verdict == 1
        assert sim.counters["dt_fallback"] == 1

    def test_unresolved_short_flow(self):
        sim = sim_for([seg(0, [(1, 2), (3, 4)])])
        res = run_trace(sim, packets([700, 800, -900]))
        assert res.verdicts == {} and res.unresolved == [canonical_key(FWD)]
        assert res.counters["unresolved"] == 1 and res.resolved == 0

    def test_direction_from_first_source(self):
        sim = sim_for([seg(4, [(-300, -300), (200, 200)])])
        first = PacketRecord(0, REV, 100)
        evs = [sim.process_packet(p) for p in (first, PacketRecord(1, FWD, 300), PacketRecord(2, REV, 200))]
        assert evs[2].verdict == 4

    def test_install_delay(self):
        sim = sim_for([seg(5, [(10, 10), (20, 20)])], install_delay=2)
        evs = [sim.process_packet(p) for p in packets([10, 20, 30, 40, 50, 60])]
        assert evs[1].verdict == 5 and evs[2:] == [None] * 4
        assert sim.counters["pending_packets"] == 2 and sim.counters["bypassed"] == 2
        assert len(sim.events) == 1

    def test_counter_saturates(self):
        sim = sim_for([seg(0, [(1, 2), (3, 4)])], pkt_max=300)
        for p in packets([700] * 300):
            sim.process_packet(p)
        assert sim.states[canonical_key(FWD)].pkt_count == 255


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(pkt_max=3), dict(variant="dram"), dict(fidelity="fuzzy"),
                                    dict(slots=1000), dict(l_min=5), dict(install_delay=-1), dict(time_max_ms=0)])
    def test_invalid(self, kw):
        with pytest.raises(SimConfigError):
            SimConfig(**kw).validate()

    def test_table_mismatches(self):
        tables = compile_tables([seg(0, [(1, 2), (3, 4)])], variants=("tcam",))
        with pytest.raises(SimConfigError):
            Simulator(tables, LEAF, SimConfig(variant="sram"))
        with pytest.raises(SimConfigError):
            Simulator(tables, BackupTree(Leaf(0), 3, 0), SimConfig())
        with pytest.raises(SimConfigError):
            Simulator(tables, LEAF, SimConfig(l_max=5, l_min=2))


class TestResources:
    @pytest.mark.parametrize("l_max,bits", [(2, 104), (4, 136), (8, 200)])
    def test_bits_per_flow(self, l_max, bits):
        assert resource_report(SimConfig(l_max=l_max, l_min=2))["bits_per_flow"] == bits

    def test_entry_counts(self):
        tables = compile_tables([seg(0, [(1, 2), (3, 4)])])
        r = resource_report(SimConfig(), tables)
        assert r["tcam_entries"] == 1 and r["sram_entries"] == 4


def _oracle_agrees(rng, n_flows, variant):
    pool = [int(v) for v in rng.integers(-1400, 1401, size=12) if v]
    segs, tables = random_tables(rng, 20, pool=pool)
    tree = BackupTree(Split(3, 0, Leaf(0), Leaf(1)), 4, 1)
    cfg = SimConfig(variant=variant)
    flows = [random_flow(rng, pool, gap_ms=(1, 300)) for _ in range(n_flows // 2)]
    flows += [member_flow(rng, segs) for _ in range(n_flows - len(flows))]
    res = run_trace(Simulator(tables, tree, cfg), flows_to_trace(flows))
    for f in flows:
        want = oracle_classify(f, tables, tree, cfg)
        got = res.verdicts.get(f.key)
        if want is None:
            assert got is None and f.key in res.unresolved
        else:
            assert (got.verdict, got.cause, got.index, got.provenance) == \
                   (want.verdict, want.cause, want.index, want.provenance)
    return res


class TestOracle:
    @pytest.mark.parametrize("variant", ["tcam", "sram"])
    @pytest.mark.parametrize("seed", range(4))
    def test_streaming_matches_oracle(self, variant, seed):
        res = _oracle_agrees(np.random.default_rng(seed), 150, variant)
        causes = {e.cause for e in res.verdicts.values()}
        assert Cause.SEGMENT in causes and len(causes) >= 2

    def test_sram_hit_implies_tcam_hit(self):
        rng = np.random.default_rng(7)
        pool = [int(v) for v in rng.integers(-1400, 1401, size=10) if v]
        segs, tables = random_tables(rng, 30, pool=pool)
        hits = 0
        members = member_pool(segs)
        for _ in range(2000):
            w = [int(rng.choice(members)) for _ in range(4)]
            if _oracle_lookup(tables, "sram", w, 4, 2) is not None:
                hits += 1
                assert _oracle_lookup(tables, "tcam", w, 4, 2) is not None
        for s in segs:
            w = [0] * (4 - s.effective_len) + [int(rng.choice(v)) for v in s.member_values[:s.effective_len]]
            hits += 1
            assert _oracle_lookup(tables, "sram", w, 4, 2) is not None
            assert _oracle_lookup(tables, "tcam", w, 4, 2) is not None
        assert hits > 30


class TestHashed:
    def test_divergence_only_on_colliding_flows(self):
        rng = np.random.default_rng(11)
        pool = [int(v) for v in rng.integers(-1400, 1401, size=12) if v]
        _, tables = random_tables(rng, 20, pool=pool)
        tree = BackupTree(Split(3, 0, Leaf(0), Leaf(1)), 4, 1)
        flows = [random_flow(rng, pool, min_len=5, max_len=20, gap_ms=(1, 50)) for _ in range(300)]
        # spread flows over an overlapping time window so they interleave
        trace = flows_to_trace(flows)
        exact = run_trace(Simulator(tables, tree, SimConfig()), trace)
        hashed = run_trace(Simulator(tables, tree, SimConfig(fidelity="hashed", slots=64)), trace)
        assert hashed.collisions
        touched = {k for _, a, b in hashed.collisions for k in (a, b)}
        differ = {k for k in exact.verdicts.keys() | hashed.verdicts.keys()
                  if exact.verdicts.get(k) != hashed.verdicts.get(k)}
        assert differ <= touched

    def test_large_array_matches_exact_without_collisions(self):
        rng = np.random.default_rng(12)
        pool = [int(v) for v in rng.integers(-1400, 1401, size=12) if v]
        _, tables = random_tables(rng, 20, pool=pool)
        flows = [random_flow(rng, pool) for _ in range(50)]
        trace = flows_to_trace(flows)
        exact = run_trace(Simulator(tables, LEAF, SimConfig()), trace)
        hashed = run_trace(Simulator(tables, LEAF, SimConfig(fidelity="hashed", slots=1 << 20)), trace)
        if not hashed.collisions:
            assert exact.verdicts == hashed.verdicts


class TestVerdictFile:
    def test_round_trip_and_order(self):
        rng = np.random.default_rng(3)
        pool = [int(v) for v in rng.integers(-1400, 1401, size=12) if v]
        _, tables = random_tables(rng, 10, pool=pool)
        flows = [random_flow(rng, pool, max_len=8, gap_ms=(1, 20)) for _ in range(60)]
        res = run_trace(Simulator(tables, LEAF, SimConfig()), flows_to_trace(flows))
        assert res.unresolved
        text = write_verdicts(res)
        verdicts, unresolved = read_verdicts(text)
        assert verdicts == res.verdicts and sorted(unresolved) == sorted(res.unresolved)
        lines = text.splitlines()
        assert '"UNRESOLVED"' not in "".join(lines[1:1 + len(verdicts)])

    def test_rejects_bad_header(self):
        with pytest.raises(ValueError):
            read_verdicts('{"format": "other", "version": 1}\n')
        with pytest.raises(ValueError):
            read_verdicts("")
