"""Packets, bidirectional flows and signed length features.

Also hosts the seedable synthetic traffic generator used by the tests and
the demo scripts: every flow of a class carries one of the class's planted
motifs, jittered, at a random offset inside random noise packets.
"""
from __future__ import annotations

import collections
import dataclasses
import logging
from typing import Iterable, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

TCP = 6
UDP = 17
ADMITTED_PROTOCOLS = (TCP, UDP)

MTU = 1500
DEFAULT_IDLE_TIMEOUT_MS = 64_000


class InvalidPacketError(ValueError):
    pass


class SynthConfigError(ValueError):
    pass


@dataclasses.dataclass(frozen=True, order=True)
class FiveTuple:
    src_addr: int
    dst_addr: int
    src_port: int
    dst_port: int
    protocol: int

    def reverse(self) -> "FiveTuple":
        return FiveTuple(self.dst_addr, self.src_addr, self.dst_port, self.src_port, self.protocol)

    def as_list(self) -> list[int]:
        return [self.src_addr, self.dst_addr, self.src_port, self.dst_port, self.protocol]


@dataclasses.dataclass(frozen=True)
class PacketRecord:
    timestamp_ms: int
    tuple: FiveTuple
    length: int


@dataclasses.dataclass(frozen=True)
class BidiFlow:
    """A bidirectional flow.

    ``packets`` holds ``(timestamp_ms, signed_feature)`` pairs in arrival
    order; the sign is +1 for packets sent by ``first_src``.
    """

    key: FiveTuple
    first_src: int
    packets: tuple[tuple[int, int], ...]
    label: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "packets", tuple((int(t), int(v)) for t, v in self.packets))

    @property
    def features(self) -> tuple[int, ...]:
        return tuple(v for _, v in self.packets)

    @property
    def timestamps(self) -> tuple[int, ...]:
        return tuple(t for t, _ in self.packets)

    def __len__(self):
        return len(self.packets)


def combined_feature(length: int, direction: int) -> int:
    """Signed packet feature: length (clamped to the MTU) times direction."""
    if length < 1:
        raise InvalidPacketError(f"packet length must be >= 1, got {length}")
    if direction not in (1, -1):
        raise InvalidPacketError(f"direction must be +1 or -1, got {direction}")
    return min(int(length), MTU) * direction


def canonical_key(t: FiveTuple) -> FiveTuple:
    """Direction-independent flow key: the lower (addr, port) endpoint goes first."""
    if (t.src_addr, t.src_port) <= (t.dst_addr, t.dst_port):
        return t
    return t.reverse()


def assemble_flows(
    packets: Iterable[PacketRecord],
    idle_timeout_ms: int = DEFAULT_IDLE_TIMEOUT_MS,
    counters: Optional[collections.Counter] = None,
) -> list[BidiFlow]:
    """Group time-ordered packets into bidirectional flows.

    A gap longer than ``idle_timeout_ms`` between consecutive packets of the
    same key closes the current flow and opens a new one. Packets whose
    protocol is neither TCP nor UDP are skipped and counted under
    ``"skipped_protocol"`` in ``counters``.

    Flows are returned in order of their first packet.
    """
    if counters is None:
        counters = collections.Counter()
    open_flows: dict[FiveTuple, int] = {}
    done: list[tuple[FiveTuple, int, list]] = []
    last_seen: dict[FiveTuple, int] = {}

    for pkt in packets:
        if pkt.tuple.protocol not in ADMITTED_PROTOCOLS:
            counters["skipped_protocol"] += 1
            continue
        key = canonical_key(pkt.tuple)
        idx = open_flows.get(key)
        if idx is not None and pkt.timestamp_ms - last_seen[key] > idle_timeout_ms:
            idx = None
        if idx is None:
            idx = len(done)
            done.append((key, pkt.tuple.src_addr, []))
            open_flows[key] = idx
        _, first_src, pkts = done[idx]
        # same-host flows (src == dst address) read as all-forward, as on the switch
        direction = 1 if pkt.tuple.src_addr == first_src else -1
        pkts.append((pkt.timestamp_ms, combined_feature(pkt.length, direction)))
        last_seen[key] = pkt.timestamp_ms
        counters["admitted"] += 1

    return [BidiFlow(key=k, first_src=src, packets=tuple(p)) for k, src, p in done]


@dataclasses.dataclass
class SynthConfig:
    """Parameters of the planted-motif traffic generator.

    ``planted_motifs[c]`` is a list of motifs for class ``c``; each flow picks
    one uniformly. When ``planted_motifs`` is None, one random motif per class
    is drawn with a length in ``motif_len_range``.
    """

    num_classes: int = 5
    flows_per_class: int = 100
    planted_motifs: Optional[list[list[list[int]]]] = None
    motif_len_range: tuple[int, int] = (2, 4)
    noise_value_range: tuple[int, int] = (40, 1500)
    noise_len_range: tuple[int, int] = (30, 40)
    max_offset: Optional[int] = 20
    motif_jitter: int = 32
    iat_range_ms: tuple[int, int] = (1, 100)
    trace_span_ms: int = 60_000
    seed: int = 0


def _random_motifs(cfg: SynthConfig, rng: np.random.Generator) -> list[list[list[int]]]:
    lo, hi = 60, MTU - cfg.motif_jitter
    spacing = 2 * cfg.motif_jitter + 1
    used: list[int] = []
    motifs = []
    for _ in range(cfg.num_classes):
        length = int(rng.integers(cfg.motif_len_range[0], cfg.motif_len_range[1] + 1))
        motif = []
        while len(motif) < length:
            value = int(rng.integers(lo, hi + 1)) * (1 if rng.random() < 0.5 else -1)
            if all(abs(value - u) >= spacing for u in used):
                used.append(value)
                motif.append(value)
        motifs.append([motif])
    return motifs


def validate_motifs(motifs: Sequence[Sequence[Sequence[int]]], jitter: int) -> None:
    values = []
    for per_class in motifs:
        if not per_class:
            raise SynthConfigError("every class needs at least one motif")
        for motif in per_class:
            if not 2 <= len(motif) <= 4:
                raise SynthConfigError(f"motif length must be in [2, 4], got {list(motif)}")
            for v in motif:
                if v == 0 or abs(v) > MTU:
                    raise SynthConfigError(f"motif value out of range: {v}")
                if abs(v) - jitter < 1:
                    raise SynthConfigError(f"jitter {jitter} can flip the sign of {v}")
            values.append((id(motif), list(motif)))
    for i in range(len(values)):
        for j in range(i + 1, len(values)):
            a, b = values[i][1], values[j][1]
            for u in a:
                for v in b:
                    if abs(u - v) <= 2 * jitter:
                        raise SynthConfigError(
                            f"motifs {a} and {b} overlap after +-{jitter} jitter")


def generate_synthetic(cfg: SynthConfig) -> tuple[list[BidiFlow], list[list[list[int]]]]:
    """Generate labeled flows; returns ``(flows, motifs)``.

    Flows are ordered class by class. Every flow gets a distinct five-tuple.
    """
    rng = np.random.default_rng(cfg.seed)
    motifs = cfg.planted_motifs if cfg.planted_motifs is not None else _random_motifs(cfg, rng)
    if len(motifs) != cfg.num_classes:
        raise SynthConfigError("need one motif list per class")
    validate_motifs(motifs, cfg.motif_jitter)

    nlo, nhi = cfg.noise_len_range
    vlo, vhi = cfg.noise_value_range
    flows = []
    seen_tuples: set[FiveTuple] = set()
    for label in range(cfg.num_classes):
        for _ in range(cfg.flows_per_class):
            motif = motifs[label][int(rng.integers(len(motifs[label])))]
            n_noise = int(rng.integers(nlo, nhi + 1))
            if n_noise == 0 and motif[0] < 0:
                raise SynthConfigError("a motif starting with a reverse packet needs noise before it")
            max_off = n_noise if cfg.max_offset is None else min(n_noise, cfg.max_offset)
            first_off = 1 if motif[0] < 0 else 0
            if first_off > max_off:
                raise SynthConfigError("max_offset leaves no room before a reverse-first motif")
            offset = int(rng.integers(first_off, max_off + 1))
            jitter = rng.integers(-cfg.motif_jitter, cfg.motif_jitter + 1, size=len(motif))
            planted = [int(v + j) for v, j in zip(motif, jitter)]
            mags = rng.integers(vlo, vhi + 1, size=n_noise)
            signs = np.where(rng.random(n_noise) < 0.5, 1, -1)
            noise = [int(m * s) for m, s in zip(mags, signs)]
            if noise and offset > 0:
                noise[0] = abs(noise[0])
            feats = noise[:offset] + planted + noise[offset:]

            start = int(rng.integers(0, cfg.trace_span_ms + 1))
            iats = rng.integers(cfg.iat_range_ms[0], cfg.iat_range_ms[1] + 1, size=len(feats))
            iats[0] = 0
            times = (start + np.cumsum(iats)).tolist()

            while True:
                a = int(rng.integers(0x0A000001, 0x0AFFFFFF))
                b = int(rng.integers(0xC0A80001, 0xC0A8FFFF))
                proto = TCP if rng.random() < 0.7 else UDP
                t = FiveTuple(a, b, int(rng.integers(1024, 65536)), int(rng.choice([53, 80, 443, 8443])), proto)
                if canonical_key(t) not in seen_tuples:
                    break
            seen_tuples.add(canonical_key(t))
            flows.append(BidiFlow(key=canonical_key(t), first_src=a,
                                  packets=tuple(zip(times, feats)), label=label))
    return flows, [[list(m) for m in per] for per in motifs]


def flow_packets(flow: BidiFlow, tuple_: Optional[FiveTuple] = None) -> list[PacketRecord]:
    """Materialise a flow back into packet records.

    ``tuple_`` is the forward (first-sender) five-tuple; by default it is
    reconstructed from the canonical key and ``first_src``.
    """
    if tuple_ is None:
        k = flow.key
        tuple_ = k if k.src_addr == flow.first_src else k.reverse()
    rev = tuple_.reverse()
    return [PacketRecord(t, tuple_ if v > 0 else rev, abs(v)) for t, v in flow.packets]


def flows_to_trace(flows: Sequence[BidiFlow]) -> list[PacketRecord]:
    """Interleave the packets of many flows into one time-ordered trace."""
    tagged = []
    for i, f in enumerate(flows):
        for j, pkt in enumerate(flow_packets(f)):
            tagged.append((pkt.timestamp_ms, i, j, pkt))
    tagged.sort(key=lambda x: x[:3])
    return [x[3] for x in tagged]
