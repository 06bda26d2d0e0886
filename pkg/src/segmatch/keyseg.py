"""Key Segments: clustering candidate segments into range templates and
scoring them on held-out flows.

A Key Segment has ``l_max`` slots. The first ``effective_len`` slots are
inclusive ``(min, max)`` ranges over signed features; the rest are
wildcards. A flow matches a segment when some run of ``effective_len``
consecutive features falls inside the ranges.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from typing import Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .explain import CandidateSegment
from .flows import BidiFlow

log = logging.getLogger(__name__)

PAD_VALUE = 0
NOISE = -1
SCORE_EPSILON = 1e-6
KEYSEG_FORMAT = "segmatch-keysegments"
KEYSEG_VERSION = 1


class ScoringError(ValueError):
    pass


class TemplateError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class KeySegment:
    class_id: int
    slots: tuple[Optional[tuple[int, int]], ...]
    score: float = 0.0
    member_values: tuple[tuple[int, ...], ...] = ()
    c_in: float = 0.0
    c_out: float = 0.0

    @property
    def effective_len(self) -> int:
        return sum(1 for s in self.slots if s is not None)

    @property
    def l_max(self) -> int:
        return len(self.slots)

    @property
    def ranges(self) -> list[tuple[int, int]]:
        return [s for s in self.slots if s is not None]

    def with_score(self, score: float, c_in: float = 0.0, c_out: float = 0.0) -> "KeySegment":
        return dataclasses.replace(self, score=float(score), c_in=float(c_in), c_out=float(c_out))

    def sort_key(self):
        """Priority order: score desc, length desc, then slots, then class."""
        slots = tuple((0, s[0], s[1]) if s is not None else (1, 0, 0) for s in self.slots)
        return (-self.score, -self.effective_len, slots, self.class_id)


def pad_segment(values: Sequence[int], l_max: int) -> np.ndarray:
    if len(values) > l_max:
        raise ValueError(f"segment longer than l_max={l_max}")
    out = np.full(l_max, PAD_VALUE, dtype=np.int64)
    out[:len(values)] = values
    return out


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Density clustering under Euclidean distance.

    Neighbourhoods are closed balls (distance <= eps) that include the point
    itself; a point is core when its neighbourhood has at least ``min_pts``
    members. Points are scanned in input order, clusters are numbered from 0
    in order of discovery, and a border point belongs to the first cluster
    that reaches it. Noise is labelled -1.
    """
    if eps <= 0 or min_pts < 1:
        raise ValueError("need eps > 0 and min_pts >= 1")
    pts = np.asarray(points)
    n = len(pts)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    pts = pts.reshape(n, -1)
    exact = np.issubdtype(pts.dtype, np.integer) and float(eps).is_integer()
    pts = pts.astype(np.int64 if exact else np.float64)
    eps2 = int(eps) ** 2 if exact else float(eps) ** 2

    def ball(i):
        d = pts - pts[i]
        return np.flatnonzero(np.einsum("ij,ij->i", d, d) <= eps2)

    counts = np.empty(n, dtype=np.int64)
    block = 1024
    sq = np.einsum("ij,ij->i", pts, pts)
    for s in range(0, n, block):
        if exact:
            d2 = sq[s:s + block, None] + sq[None, :] - 2 * (pts[s:s + block] @ pts.T)
        else:
            diff = pts[s:s + block, None, :] - pts[None, :, :]
            d2 = np.einsum("ijk,ijk->ij", diff, diff)
        counts[s:s + block] = (d2 <= eps2).sum(axis=1)
    core = counts >= min_pts

    unvisited = -2
    labels = np.full(n, unvisited, dtype=np.int64)
    cluster = 0
    for p in range(n):
        if labels[p] != unvisited:
            continue
        if not core[p]:
            labels[p] = NOISE
            continue
        labels[p] = cluster
        stack = [p]
        while stack:
            q = stack.pop()
            nb = ball(q)
            fresh = nb[labels[nb] == unvisited]
            labels[nb[labels[nb] == NOISE]] = cluster
            labels[fresh] = cluster
            stack.extend(fresh[core[fresh]].tolist())
        cluster += 1
    return labels


def templateize(members: Sequence[CandidateSegment], l_max: int = 4) -> KeySegment:
    """Range template of a cluster: per-slot min/max, wildcard where any member is padding."""
    if not members:
        raise TemplateError("cannot template an empty cluster")
    classes = {m.class_id for m in members}
    if len(classes) != 1:
        raise TemplateError(f"cluster mixes classes {sorted(classes)}")
    eff = min(len(m.values) for m in members)
    slots: list[Optional[tuple[int, int]]] = []
    values: list[tuple[int, ...]] = []
    for i in range(l_max):
        if i < eff:
            col = [m.values[i] for m in members]
            slots.append((int(min(col)), int(max(col))))
            values.append(tuple(sorted(set(int(v) for v in col))))
        else:
            slots.append(None)
            values.append(())
    return KeySegment(classes.pop(), tuple(slots), 0.0, tuple(values))


def segment_matches(features: Sequence[int], seg: KeySegment) -> bool:
    ranges = seg.ranges
    ell = len(ranges)
    f = np.asarray(features, dtype=np.int64)
    if ell == 0 or len(f) < ell:
        return False
    lo = np.array([r[0] for r in ranges])
    hi = np.array([r[1] for r in ranges])
    win = sliding_window_view(f, ell)
    return bool(np.any(np.all((win >= lo) & (win <= hi), axis=1)))


def feature_matrix(flows: Sequence[BidiFlow], n: int) -> tuple[np.ndarray, np.ndarray]:
    mat = np.zeros((len(flows), n), dtype=np.int64)
    lens = np.zeros(len(flows), dtype=np.int64)
    for i, f in enumerate(flows):
        feats = f.features[:n]
        mat[i, :len(feats)] = feats
        lens[i] = len(feats)
    return mat, lens


def match_matrix(segments: Sequence[KeySegment], mat: np.ndarray, lens: np.ndarray) -> np.ndarray:
    """Boolean ``(num_segments, num_flows)``: does flow j contain segment i?"""
    out = np.zeros((len(segments), len(mat)), dtype=bool)
    n = mat.shape[1] if mat.ndim == 2 else 0
    for i, seg in enumerate(segments):
        ranges = seg.ranges
        ell = len(ranges)
        if ell == 0 or ell > n or len(mat) == 0:
            continue
        lo = np.array([r[0] for r in ranges])
        hi = np.array([r[1] for r in ranges])
        win = sliding_window_view(mat, ell, axis=1)
        ok = np.all((win >= lo) & (win <= hi), axis=2)
        ok &= (np.arange(n - ell + 1)[None, :] + ell) <= lens[:, None]
        out[i] = ok.any(axis=1)
    return out


def _rates(matches: np.ndarray, labels: np.ndarray, classes: Sequence[int]) -> np.ndarray:
    """Fraction of each class's flows matched, ``(num_segments, num_classes)``."""
    rates = np.zeros((matches.shape[0], len(classes)))
    for k, c in enumerate(classes):
        sel = labels == c
        if sel.any():
            rates[:, k] = matches[:, sel].mean(axis=1)
    return rates


def score_segments(segments: Sequence[KeySegment], validation: Sequence[BidiFlow], n: int = 32,
                   epsilon: float = SCORE_EPSILON) -> list[KeySegment]:
    """Score every segment as in-class match rate over (worst other-class rate + epsilon)."""
    labels = np.array([f.label for f in validation])
    classes = sorted(set(labels.tolist()))
    for seg in segments:
        if seg.class_id not in classes:
            raise ScoringError(f"class {seg.class_id} is absent from the validation set")
    if len(classes) < 2:
        raise ScoringError("scoring needs at least two classes in the validation set")
    mat, lens = feature_matrix(validation, n)
    rates = _rates(match_matrix(segments, mat, lens), labels, classes)
    out = []
    for i, seg in enumerate(segments):
        k = classes.index(seg.class_id)
        c_in = rates[i, k]
        c_out = np.delete(rates[i], k).max()
        out.append(seg.with_score(c_in / (c_out + epsilon), c_in, c_out))
    return out


def score_segment(seg: KeySegment, validation: Sequence[BidiFlow], n: int = 32,
                  epsilon: float = SCORE_EPSILON) -> float:
    return score_segments([seg], validation, n, epsilon)[0].score


def select(segments: Iterable[KeySegment], threshold: float) -> list[KeySegment]:
    """Segments scoring strictly above ``threshold``, in priority order."""
    if threshold < 0:
        raise ValueError("score threshold must be >= 0")
    return sorted((s for s in segments if s.score > threshold), key=KeySegment.sort_key)


@dataclasses.dataclass
class DiscoveryConfig:
    eps: float = 64.0
    min_pts: int = 20
    l_min: int = 2
    l_max: int = 4
    seq_len: int = 32
    epsilon: float = SCORE_EPSILON


def cluster_candidates(pool: dict[int, list[CandidateSegment]], cfg: DiscoveryConfig) -> list[KeySegment]:
    """Unscored templates, one per non-noise cluster, class by class."""
    segments = []
    for c in sorted(pool):
        cands = [x for x in pool[c] if cfg.l_min <= len(x) <= cfg.l_max]
        if not cands:
            continue
        pts = np.stack([pad_segment(x.values, cfg.l_max) for x in cands])
        labels = dbscan(pts, cfg.eps, cfg.min_pts)
        for k in range(labels.max() + 1):
            members = [x for x, l in zip(cands, labels) if l == k]
            segments.append(templateize(members, cfg.l_max))
        log.info("class %s: %d candidates, %d clusters, %d noise", c, len(cands),
                 labels.max() + 1, int((labels == NOISE).sum()))
    return segments


def discover(pool: dict[int, list[CandidateSegment]], validation: Sequence[BidiFlow],
             cfg: DiscoveryConfig = DiscoveryConfig()) -> list[KeySegment]:
    """Cluster, template and score; returns all scored segments in priority order."""
    segments = cluster_candidates(pool, cfg)
    if not segments:
        return []
    return sorted(score_segments(segments, validation, cfg.seq_len, cfg.epsilon), key=KeySegment.sort_key)


def segment_to_record(seg: KeySegment) -> dict:
    return {"class": seg.class_id,
            "slots": [list(s) if s is not None else "*" for s in seg.slots],
            "score": seg.score, "c_in": seg.c_in, "c_out": seg.c_out,
            "member_values": [list(v) for v in seg.member_values]}


def segment_from_record(o: dict) -> KeySegment:
    slots = tuple(None if s == "*" else (int(s[0]), int(s[1])) for s in o["slots"])
    seen_wild = False
    for s in slots:
        if s is None:
            seen_wild = True
        elif seen_wild:
            raise ValueError("wildcard slots must form a suffix")
        elif s[0] > s[1]:
            raise ValueError(f"range min > max in {s}")
    return KeySegment(int(o["class"]), slots, float(o["score"]),
                      tuple(tuple(int(x) for x in v) for v in o.get("member_values", [])),
                      float(o.get("c_in", 0.0)), float(o.get("c_out", 0.0)))


def dump_segments(segments: Iterable[KeySegment]) -> str:
    lines = [json.dumps({"format": KEYSEG_FORMAT, "version": KEYSEG_VERSION})]
    lines += [json.dumps(segment_to_record(s), separators=(",", ":")) for s in segments]
    return "\n".join(lines) + "\n"


def load_segments(text: str) -> list[KeySegment]:
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        o = json.loads(line)
        if "format" in o:
            if o["format"] != KEYSEG_FORMAT or o.get("version") != KEYSEG_VERSION:
                raise ValueError(f"unsupported key-segment file {o.get('format')!r} v{o.get('version')!r}")
            continue
        out.append(segment_from_record(o))
    return out
