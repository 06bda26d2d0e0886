"""Packet-by-packet simulator of the stateful matching pipeline.

Per packet:

1. canonicalise the five-tuple into a flow key;
2. flows already in the classification table are bypassed;
3. the signed feature is formed from length and direction, where direction
   compares the source address with the flow's first source;
4. the flow's ``l_max`` window register shifts left and takes the new
   feature on the right;
5. the window is looked up in the Key Segment table (TCAM or SRAM variant);
6. a hit classifies the flow and installs it in the classification table.

Without a hit, the backup tree's verdict (computed when packet ``l_max``
arrives) becomes the label once the packet count exceeds ``pkt_max`` or the
gap since the flow's previous packet exceeds ``time_max_ms``.

A segment of effective length ``l`` is compared with the rightmost ``l``
window slots and is only eligible once the flow has seen ``l`` packets.
"""
from __future__ import annotations

import collections
import dataclasses
import enum
import json
import struct
import zlib
from typing import Iterable, Optional, Sequence

import numpy as np

from .backup import BackupTree, dt_predict
from .flows import BidiFlow, FiveTuple, PacketRecord, canonical_key, combined_feature
from .tables import CompiledTables

COUNTER_MAX = 255


class SimConfigError(ValueError):
    pass


class Cause(str, enum.Enum):
    SEGMENT = "SEGMENT"
    BACKUP_PKT = "BACKUP_PKT"
    BACKUP_TIME = "BACKUP_TIME"


@dataclasses.dataclass(frozen=True)
class SimConfig:
    l_min: int = 2
    l_max: int = 4
    pkt_max: int = 30
    time_max_ms: int = 256
    variant: str = "tcam"
    fidelity: str = "exact"       # or "hashed"
    slots: int = 1 << 16          # hashed-array size
    install_delay: int = 0        # packets between decision and bypass

    def validate(self) -> None:
        if min(self.l_min, self.l_max, self.pkt_max, self.time_max_ms) <= 0:
            raise SimConfigError("l_min, l_max, pkt_max and time_max_ms must be positive")
        if self.l_min > self.l_max:
            raise SimConfigError("l_min exceeds l_max")
        if self.pkt_max < self.l_max:
            raise SimConfigError("pkt_max < l_max: the backup verdict would not exist when it fires")
        if self.variant not in ("tcam", "sram"):
            raise SimConfigError(f"unknown table variant {self.variant!r}")
        if self.fidelity not in ("exact", "hashed"):
            raise SimConfigError(f"unknown fidelity mode {self.fidelity!r}")
        if self.slots <= 0 or self.slots & (self.slots - 1):
            raise SimConfigError("hashed-array slot count must be a power of two")
        if self.install_delay < 0:
            raise SimConfigError("install_delay must be >= 0")


@dataclasses.dataclass
class FlowState:
    first_src: int
    last_ts: int
    pkt_count: int
    window: list[int]
    dt_verdict: Optional[int] = None
    final_label: Optional[int] = None
    owner: Optional[FiveTuple] = None


@dataclasses.dataclass(frozen=True)
class ClassificationEvent:
    key: FiveTuple
    verdict: int
    cause: Cause
    index: int
    provenance: Optional[int] = None


def resource_report(cfg: SimConfig, tables: Optional[CompiledTables] = None) -> dict:
    """Per-flow register bits and table sizes.

    Bits per flow: 32 (first source) + 32 (last timestamp) + 8 (packet
    counter) + 16 per window slot.
    """
    out = {"bits_per_flow": 32 + 32 + 8 + 16 * cfg.l_max, "window_width": cfg.l_max}
    if tables is not None:
        out["tcam_entries"] = len(tables.tcam) if tables.tcam is not None else None
        out["sram_entries"] = sum(len(t) for t in tables.sram.values()) if tables.sram is not None else None
    return out


class _TcamIndex:
    """Entries sorted by priority, matched with one vectorised compare."""

    def __init__(self, entries, l_max):
        entries = sorted(entries, key=lambda e: -e.priority)
        self.entries = entries
        self.lo = np.array([[r[0] for r in e.key] for e in entries], dtype=np.int64).reshape(-1, l_max)
        self.hi = np.array([[r[1] for r in e.key] for e in entries], dtype=np.int64).reshape(-1, l_max)
        self.eff = np.array([e.effective_len for e in entries], dtype=np.int64)

    def lookup(self, window, count):
        if not self.entries:
            return None
        w = np.asarray(window)
        ok = np.all((self.lo <= w) & (w <= self.hi), axis=1) & (self.eff <= count)
        i = int(np.argmax(ok))
        return self.entries[i] if ok[i] else None


def _slot_of(key: FiveTuple, slots: int) -> int:
    return zlib.crc32(struct.pack(">IIHHB", *key.as_list())) & (slots - 1)


class Simulator:
    def __init__(self, tables: CompiledTables, dt: BackupTree, cfg: SimConfig = SimConfig()):
        cfg.validate()
        if cfg.l_max != tables.l_max:
            raise SimConfigError(f"config l_max {cfg.l_max} != table l_max {tables.l_max}")
        if getattr(tables, cfg.variant) is None:
            raise SimConfigError(f"tables carry no {cfg.variant} variant")
        if dt.n_features != cfg.l_max:
            raise SimConfigError("backup tree width differs from l_max")
        self.cfg = cfg
        self.tables = tables
        self.dt = dt
        self._tcam = _TcamIndex(tables.tcam, cfg.l_max) if cfg.variant == "tcam" else None
        self.states: dict = {}
        self.classified: dict[FiveTuple, ClassificationEvent] = {}
        self.pending: dict[FiveTuple, list] = {}
        self.events: list[ClassificationEvent] = []
        self.seen: dict[FiveTuple, None] = {}
        self.collisions: list[tuple[int, FiveTuple, FiveTuple]] = []
        self.counters: collections.Counter = collections.Counter()

    @property
    def num_flows(self) -> int:
        return len(self.seen)

    def _lookup(self, window, count):
        if self.cfg.variant == "tcam":
            e = self._tcam.lookup(window, count)
            return None if e is None else (e.action_class, e.provenance)
        for ell in range(min(count, self.cfg.l_max), self.cfg.l_min - 1, -1):
            hit = self.tables.sram.get(ell, {}).get(tuple(window[self.cfg.l_max - ell:]))
            if hit is not None:
                return hit.action_class, hit.provenance
        return None

    def _state(self, key: FiveTuple, pkt: PacketRecord) -> FlowState:
        if self.cfg.fidelity == "exact":
            st = self.states.get(key)
            if st is None:
                st = self.states[key] = FlowState(pkt.tuple.src_addr, pkt.timestamp_ms, 0,
                                                  [0] * self.cfg.l_max, owner=key)
            return st
        slot = _slot_of(key, self.cfg.slots)
        st = self.states.get(slot)
        if st is None:
            st = self.states[slot] = FlowState(pkt.tuple.src_addr, pkt.timestamp_ms, 0,
                                               [0] * self.cfg.l_max, owner=key)
        elif st.owner != key:
            # registers are shared without a tag check
            self.collisions.append((slot, st.owner, key))
            self.counters["collisions"] += 1
            st.owner = key
        return st

    def _decide(self, key, st, verdict, cause, provenance=None):
        ev = ClassificationEvent(key, int(verdict), cause, st.pkt_count, provenance)
        st.final_label = ev.verdict
        self.events.append(ev)
        self.counters[f"events_{cause.value.lower()}"] += 1
        if self.cfg.install_delay == 0:
            self.classified[key] = ev
        else:
            self.pending[key] = [ev, self.cfg.install_delay]
        return ev

    def process_packet(self, pkt: PacketRecord) -> Optional[ClassificationEvent]:
        cfg = self.cfg
        key = canonical_key(pkt.tuple)
        self.seen.setdefault(key, None)
        self.counters["packets"] += 1
        if key in self.classified:
            self.counters["bypassed"] += 1
            return None
        pend = self.pending.get(key)
        if pend is not None:
            pend[1] -= 1
            self.counters["pending_packets"] += 1
            if pend[1] <= 0:
                self.classified[key] = pend[0]
                del self.pending[key]
            return None

        st = self._state(key, pkt)
        gap = pkt.timestamp_ms - st.last_ts if st.pkt_count > 0 else 0
        direction = 1 if pkt.tuple.src_addr == st.first_src else -1
        feature = combined_feature(pkt.length, direction)
        st.window = st.window[1:] + [feature]
        st.pkt_count = min(st.pkt_count + 1, COUNTER_MAX)
        st.last_ts = pkt.timestamp_ms
        if st.pkt_count == cfg.l_max:
            st.dt_verdict = dt_predict(self.dt, st.window)

        if st.pkt_count >= cfg.l_min:
            hit = self._lookup(st.window, st.pkt_count)
            if hit is not None:
                return self._decide(key, st, hit[0], Cause.SEGMENT, hit[1])
        if st.pkt_count > cfg.pkt_max:
            return self._decide(key, st, self._backup_verdict(st), Cause.BACKUP_PKT)
        if gap > cfg.time_max_ms:
            return self._decide(key, st, self._backup_verdict(st), Cause.BACKUP_TIME)
        return None

    def _backup_verdict(self, st: FlowState) -> int:
        if st.dt_verdict is not None:
            return st.dt_verdict
        # fewer than l_max packets so far: classify the zero-padded window
        self.counters["dt_fallback"] += 1
        return dt_predict(self.dt, st.window)


def new_simulator(tables: CompiledTables, dt: BackupTree, cfg: SimConfig = SimConfig()) -> Simulator:
    return Simulator(tables, dt, cfg)


@dataclasses.dataclass
class TraceResult:
    verdicts: dict[FiveTuple, ClassificationEvent]
    unresolved: list[FiveTuple]
    counters: dict
    collisions: list

    @property
    def resolved(self) -> int:
        return len(self.verdicts)

    @property
    def segment_rate(self) -> float:
        if not self.verdicts:
            return 0.0
        return sum(e.cause == Cause.SEGMENT for e in self.verdicts.values()) / len(self.verdicts)

    @property
    def backup_rate(self) -> float:
        return 1.0 - self.segment_rate if self.verdicts else 0.0

    @property
    def decision_positions(self) -> list[int]:
        return [e.index for e in self.verdicts.values()]


def run_trace(sim: Simulator, packets: Iterable[PacketRecord]) -> TraceResult:
    for pkt in packets:
        sim.process_packet(pkt)
    verdicts = {e.key: e for e in sim.events}
    unresolved = [k for k in sim.seen if k not in verdicts]
    counters = dict(sim.counters)
    counters["flows"] = sim.num_flows
    counters["unresolved"] = len(unresolved)
    return TraceResult(verdicts, unresolved, counters, list(sim.collisions))


def _oracle_lookup(tables: CompiledTables, variant: str, window: Sequence[int], count: int, l_min: int):
    l_max = len(window)
    if variant == "tcam":
        best = None
        for e in tables.tcam:
            if e.effective_len > count:
                continue
            if all(lo <= v <= hi for (lo, hi), v in zip(e.key, window)):
                if best is None or e.priority > best.priority:
                    best = e
        return None if best is None else (best.action_class, best.provenance)
    for ell in range(l_max, l_min - 1, -1):
        if ell > count:
            continue
        suffix = tuple(window[l_max - ell:])
        for key, hit in tables.sram.get(ell, {}).items():
            if key == suffix:
                return hit.action_class, hit.provenance
    return None


def oracle_classify(flow: BidiFlow, tables: CompiledTables, dt: BackupTree,
                    cfg: SimConfig = SimConfig()) -> Optional[ClassificationEvent]:
    """Reference verdict from the materialised flow; None when unresolved.

    Scans every prefix of the flow with brute-force table lookups and the
    same backup triggers as the streaming pipeline.
    """
    feats = flow.features
    times = flow.timestamps
    dt_verdict = None
    for p in range(1, len(feats) + 1):
        window = [0] * max(0, cfg.l_max - p) + list(feats[max(0, p - cfg.l_max):p])
        count = min(p, COUNTER_MAX)
        if p == cfg.l_max:
            dt_verdict = dt_predict(dt, window)
        if p >= cfg.l_min:
            hit = _oracle_lookup(tables, cfg.variant, window, count, cfg.l_min)
            if hit is not None:
                return ClassificationEvent(flow.key, hit[0], Cause.SEGMENT, count, hit[1])
        backup = dt_verdict if dt_verdict is not None else dt_predict(dt, window)
        if count > cfg.pkt_max:
            return ClassificationEvent(flow.key, backup, Cause.BACKUP_PKT, count)
        if p > 1 and times[p - 1] - times[p - 2] > cfg.time_max_ms:
            return ClassificationEvent(flow.key, backup, Cause.BACKUP_TIME, count)
    return None


VERDICT_FORMAT = "segmatch-verdicts"
VERDICT_VERSION = 1


def write_verdicts(result: TraceResult) -> str:
    """JSONL verdict file: header, one line per flow in key order, unresolved flows last."""
    lines = [json.dumps({"format": VERDICT_FORMAT, "version": VERDICT_VERSION})]
    for key in sorted(result.verdicts):
        e = result.verdicts[key]
        lines.append(json.dumps({"key": key.as_list(), "verdict": e.verdict, "cause": e.cause.value,
                                 "index": e.index, "provenance": e.provenance}, separators=(",", ":")))
    for key in sorted(result.unresolved):
        lines.append(json.dumps({"key": key.as_list(), "verdict": None, "cause": "UNRESOLVED",
                                 "index": None, "provenance": None}, separators=(",", ":")))
    return "\n".join(lines) + "\n"


def read_verdicts(text: str) -> tuple[dict[FiveTuple, ClassificationEvent], list[FiveTuple]]:
    verdicts: dict[FiveTuple, ClassificationEvent] = {}
    unresolved: list[FiveTuple] = []
    rows = [line for line in text.splitlines() if line.strip()]
    if not rows:
        raise ValueError("empty verdict file")
    head = json.loads(rows[0])
    if head.get("format") != VERDICT_FORMAT or head.get("version") != VERDICT_VERSION:
        raise ValueError(f"unsupported verdict file {head.get('format')!r} v{head.get('version')!r}")
    for row in rows[1:]:
        o = json.loads(row)
        key = FiveTuple(*o["key"])
        if o["cause"] == "UNRESOLVED":
            unresolved.append(key)
        else:
            verdicts[key] = ClassificationEvent(key, int(o["verdict"]), Cause(o["cause"]),
                                                int(o["index"]), o.get("provenance"))
    return verdicts, unresolved
