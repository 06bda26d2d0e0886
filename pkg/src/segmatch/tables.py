"""Compile Key Segments into switch match tables.

Two variants are produced from the same priority-ordered segment list:

* TCAM: one range entry per segment. Entry keys are laid out the way the
  per-flow window register is read, newest packet last, so a segment of
  effective length ``l`` occupies the rightmost ``l`` fields and the leading
  fields are full-range wildcards.
* SRAM: one exact-match table per segment length, filled with the Cartesian
  product of the values observed at each slot of the segment's cluster.

Binary layout (all integers big-endian)::

    b"SEGT" | u16 version | u8 l_min | u8 l_max | u8 flags (1=tcam, 2=sram)
    tcam: u32 count, then per entry
          u32 priority | u16 class | u32 provenance | u8 effective_len
          | l_max x (i16 lo, i16 hi)
    sram: u8 number of length tables, then per table
          u8 length | u32 count, then per entry
          length x i16 value | u16 class | u32 priority | u32 provenance
    u32 stats-json length | stats json (utf-8)
    u32 crc32 of everything above
"""
from __future__ import annotations

import dataclasses
import itertools
import json
import logging
import struct
import zlib
from typing import Optional, Sequence

from .keyseg import KeySegment

log = logging.getLogger(__name__)

FULL_RANGE = (-32768, 32767)
TCAM_BUDGET = 2048
SRAM_BUDGET = 8192
EXPANSION_CAP = 1024
TABLE_MAGIC = b"SEGT"
TABLE_VERSION = 1


class TableBudgetError(ValueError):
    def __init__(self, message, dropped=()):
        super().__init__(message)
        self.dropped = list(dropped)


class ExpansionError(ValueError):
    def __init__(self, message, segment_index):
        super().__init__(message)
        self.segment_index = segment_index


class TableFormatError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class TcamEntry:
    key: tuple[tuple[int, int], ...]
    priority: int
    action_class: int
    provenance: int
    effective_len: int


@dataclasses.dataclass(frozen=True)
class SramHit:
    action_class: int
    priority: int
    provenance: int


@dataclasses.dataclass
class CompiledTables:
    l_min: int
    l_max: int
    tcam: Optional[list[TcamEntry]] = None
    sram: Optional[dict[int, dict[tuple[int, ...], SramHit]]] = None
    stats: dict = dataclasses.field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, CompiledTables):
            return NotImplemented
        return (self.l_min, self.l_max, self.tcam, self.sram, self.stats) == \
               (other.l_min, other.l_max, other.tcam, other.sram, other.stats)


def _priorities(n: int) -> list[int]:
    # rank 0 (best) gets the highest priority
    return [n - i for i in range(n)]


def to_tcam(segments: Sequence[KeySegment], budget: int = TCAM_BUDGET, strict: bool = True) -> list[TcamEntry]:
    """One range entry per segment; ``segments`` must already be in priority order."""
    prios = _priorities(len(segments))
    entries = []
    for i, (seg, prio) in enumerate(zip(segments, prios)):
        ranges = seg.ranges
        key = (FULL_RANGE,) * (seg.l_max - len(ranges)) + tuple(ranges)
        entries.append(TcamEntry(key, prio, seg.class_id, i, len(ranges)))
    if len(entries) > budget:
        dropped = entries[budget:]
        msg = f"{len(entries)} TCAM entries exceed the budget of {budget}; dropping {len(dropped)}"
        if strict:
            raise TableBudgetError(msg, dropped)
        log.warning(msg)
        entries = entries[:budget]
    return entries


def expansion_size(seg: KeySegment) -> int:
    size = 1
    for vals in seg.member_values[:seg.effective_len]:
        size *= len(vals)
    return size


def to_sram(segments: Sequence[KeySegment], l_min: int = 2, l_max: int = 4, cap: int = EXPANSION_CAP,
            budget: int = SRAM_BUDGET, strict: bool = True,
            stats: Optional[dict] = None) -> dict[int, dict[tuple[int, ...], SramHit]]:
    """Exact-match tables keyed by segment length.

    Identical keys from different segments keep the higher-priority one; a
    class conflict is logged and counted in ``stats["sram_conflicts"]``.
    With ``strict=False`` over-cap segments are skipped instead of raising.
    """
    if stats is None:
        stats = {}
    stats.setdefault("sram_conflicts", 0)
    stats.setdefault("sram_skipped", [])
    tables: dict[int, dict[tuple[int, ...], SramHit]] = {ell: {} for ell in range(l_min, l_max + 1)}
    prios = _priorities(len(segments))
    total = 0
    for i, (seg, prio) in enumerate(zip(segments, prios)):
        ell = seg.effective_len
        vals = seg.member_values[:ell]
        if len(vals) < ell or any(len(v) == 0 for v in vals):
            raise ExpansionError(f"segment {i} has no recorded member values", i)
        size = expansion_size(seg)
        if size > cap:
            msg = f"segment {i} expands to {size} exact entries (cap {cap})"
            if strict:
                raise ExpansionError(msg, i)
            log.warning(msg + "; skipped")
            stats["sram_skipped"].append(i)
            continue
        table = tables.setdefault(ell, {})
        for key in itertools.product(*vals):
            old = table.get(key)
            if old is not None:
                if old.action_class != seg.class_id:
                    stats["sram_conflicts"] += 1
                    log.info("SRAM key %s: class %d (prio %d) vs class %d (prio %d)",
                             key, old.action_class, old.priority, seg.class_id, prio)
                if old.priority >= prio:
                    continue
            else:
                total += 1
            table[key] = SramHit(seg.class_id, prio, i)
    if total > budget:
        msg = f"{total} SRAM entries exceed the budget of {budget}"
        if strict:
            raise TableBudgetError(msg)
        log.warning(msg)
    return tables


def compile_tables(segments: Sequence[KeySegment], l_min: int = 2, l_max: int = 4,
                   variants: Sequence[str] = ("tcam", "sram"), tcam_budget: int = TCAM_BUDGET,
                   sram_budget: int = SRAM_BUDGET, expansion_cap: int = EXPANSION_CAP,
                   strict: bool = True) -> CompiledTables:
    for seg in segments:
        if seg.l_max != l_max:
            raise ValueError(f"segment has {seg.l_max} slots, expected {l_max}")
    out = CompiledTables(l_min, l_max)
    stats: dict = {}
    if "tcam" in variants:
        out.tcam = to_tcam(segments, tcam_budget, strict)
    if "sram" in variants:
        out.sram = to_sram(segments, l_min, l_max, expansion_cap, sram_budget, strict, stats)
    out.stats = table_stats(out, stats)
    return out


def table_stats(tables: CompiledTables, extra: Optional[dict] = None) -> dict:
    n_tcam = len(tables.tcam) if tables.tcam is not None else None
    n_sram = sum(len(t) for t in tables.sram.values()) if tables.sram is not None else None
    classes = {e.action_class for e in tables.tcam} if tables.tcam else set()
    stats = {
        "tcam_entries": n_tcam,
        "sram_entries": n_sram,
        "sram_entries_by_length": ({str(k): len(v) for k, v in sorted(tables.sram.items())}
                                   if tables.sram is not None else None),
        "rules_per_class": (n_tcam / len(classes)) if classes else 0.0,
        "avg_splits_per_rule": (n_sram / n_tcam) if n_tcam and n_sram is not None else None,
    }
    if extra:
        stats["sram_conflicts"] = extra.get("sram_conflicts", 0)
        stats["sram_skipped"] = list(extra.get("sram_skipped", []))
    return stats


def serialize(tables: CompiledTables) -> bytes:
    flags = (1 if tables.tcam is not None else 0) | (2 if tables.sram is not None else 0)
    parts = [TABLE_MAGIC, struct.pack(">HBBB", TABLE_VERSION, tables.l_min, tables.l_max, flags)]
    if tables.tcam is not None:
        parts.append(struct.pack(">I", len(tables.tcam)))
        for e in tables.tcam:
            parts.append(struct.pack(">IHIB", e.priority, e.action_class, e.provenance, e.effective_len))
            for lo, hi in e.key:
                parts.append(struct.pack(">hh", lo, hi))
    if tables.sram is not None:
        parts.append(struct.pack(">B", len(tables.sram)))
        for ell in sorted(tables.sram):
            table = tables.sram[ell]
            parts.append(struct.pack(">BI", ell, len(table)))
            for key in sorted(table):
                hit = table[key]
                parts.append(struct.pack(f">{ell}hHII", *key, hit.action_class, hit.priority, hit.provenance))
    blob = json.dumps(tables.stats, sort_keys=True).encode()
    parts.append(struct.pack(">I", len(blob)))
    parts.append(blob)
    body = b"".join(parts)
    return body + struct.pack(">I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.off = data, 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.off + size > len(self.data):
            raise TableFormatError(f"unexpected end of table data at offset {self.off}")
        vals = struct.unpack_from(fmt, self.data, self.off)
        self.off += size
        return vals


def deserialize(data: bytes) -> CompiledTables:
    if len(data) < 13 or data[:4] != TABLE_MAGIC:
        raise TableFormatError("not a compiled-table file")
    body, (crc,) = data[:-4], struct.unpack(">I", data[-4:])
    if zlib.crc32(body) != crc:
        raise TableFormatError("checksum mismatch")
    r = _Reader(body)
    r.off = 4
    version, l_min, l_max, flags = r.take(">HBBB")
    if version != TABLE_VERSION:
        raise TableFormatError(f"unsupported table version {version}")
    out = CompiledTables(l_min, l_max)
    if flags & 1:
        (count,) = r.take(">I")
        out.tcam = []
        for _ in range(count):
            prio, cls, prov, eff = r.take(">IHIB")
            key = tuple(r.take(">hh") for _ in range(l_max))
            out.tcam.append(TcamEntry(key, prio, cls, prov, eff))
    if flags & 2:
        (ntables,) = r.take(">B")
        out.sram = {}
        for _ in range(ntables):
            ell, count = r.take(">BI")
            table = {}
            for _ in range(count):
                vals = r.take(f">{ell}hHII")
                table[tuple(vals[:ell])] = SramHit(*vals[ell:])
            out.sram[ell] = table
    (n,) = r.take(">I")
    if r.off + n != len(body):
        raise TableFormatError("trailing or missing bytes after stats")
    try:
        out.stats = json.loads(body[r.off:r.off + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TableFormatError(f"bad stats blob: {exc}") from None
    return out


def dump_text(tables: CompiledTables) -> str:
    """Human-readable table listing, one entry per line."""
    lines = [f"# l_min={tables.l_min} l_max={tables.l_max}"]
    if tables.tcam is not None:
        lines.append(f"[tcam] entries={len(tables.tcam)}")
        for e in tables.tcam:
            fields = " ".join("*" if r == FULL_RANGE else f"{r[0]}..{r[1]}" for r in e.key)
            lines.append(f"prio={e.priority} class={e.action_class} seg={e.provenance} key={fields}")
    if tables.sram is not None:
        for ell in sorted(tables.sram):
            lines.append(f"[sram len={ell}] entries={len(tables.sram[ell])}")
            for key in sorted(tables.sram[ell]):
                h = tables.sram[ell][key]
                lines.append(f"key={','.join(map(str, key))} class={h.action_class} "
                             f"prio={h.priority} seg={h.provenance}")
    lines.append("stats " + json.dumps(tables.stats, sort_keys=True))
    return "\n".join(lines) + "\n"
