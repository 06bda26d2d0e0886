"""Class activation maps over packet positions and candidate segment harvesting."""
from __future__ import annotations

import dataclasses
import json
from typing import Iterable, Sequence

import numpy as np

from . import nn
from .flows import BidiFlow


@dataclasses.dataclass(frozen=True)
class ImportanceMap:
    scores: np.ndarray
    valid_len: int


@dataclasses.dataclass(frozen=True)
class CandidateSegment:
    class_id: int
    values: tuple[int, ...]
    start: int
    score: float
    flow_index: int = -1

    def __len__(self):
        return len(self.values)


def channel_weights(model: nn.CnnModel, cache: nn.ForwardCache, classes) -> np.ndarray:
    """Per-channel weights: d(logit_c)/d(feature map) averaged over valid positions."""
    classes = np.atleast_1d(np.asarray(classes))
    onehot = np.zeros((len(classes), model.num_classes))
    onehot[np.arange(len(classes)), classes] = 1.0
    grad = nn.feature_gradient(model, cache, onehot)
    return grad.sum(axis=1) / np.maximum(cache.valid, 1)[:, None]


def gradcam_batch(model: nn.CnnModel, cache: nn.ForwardCache, classes) -> np.ndarray:
    """Importance maps ``(B, n)`` for a batched forward cache."""
    classes = np.atleast_1d(np.asarray(classes))
    if classes.size and (classes.min() < 0 or classes.max() >= model.num_classes):
        raise ValueError(f"class id out of range [0, {model.num_classes})")
    alpha = channel_weights(model, cache, classes)
    cam = np.einsum("bnk,bk->bn", cache.feature_maps, alpha)
    return np.maximum(cam, 0.0) * cache.mask


def gradcam(model: nn.CnnModel, cache: nn.ForwardCache, class_id: int, index: int = 0) -> ImportanceMap:
    if not 0 <= class_id < model.num_classes:
        raise ValueError(f"class id {class_id} out of range [0, {model.num_classes})")
    scores = gradcam_batch(model, cache, np.full(len(cache.valid), class_id))[index]
    return ImportanceMap(scores, int(cache.valid[index]))


def extract_runs(imap: ImportanceMap | np.ndarray, t: float = 0.5, valid_len: int | None = None) -> list[tuple[int, int]]:
    """Maximal index ranges ``[i, j]`` whose scores all exceed mean + t * std.

    Statistics use the valid positions only, with the population standard
    deviation.
    """
    if isinstance(imap, ImportanceMap):
        scores, valid_len = imap.scores, imap.valid_len
    else:
        scores = np.asarray(imap, dtype=float)
        valid_len = len(scores) if valid_len is None else valid_len
    s = np.asarray(scores[:valid_len], dtype=float)
    if len(s) == 0:
        return []
    above = s > s.mean() + t * s.std()
    runs = []
    i = 0
    while i < len(s):
        if above[i]:
            j = i
            while j + 1 < len(s) and above[j + 1]:
                j += 1
            runs.append((i, j))
            i = j + 1
        else:
            i += 1
    return runs


def clip_runs(run: tuple[int, int], scores: Sequence[float], features: Sequence[int],
              class_id: int = -1, l_min: int = 2, l_max: int = 4,
              flow_index: int = -1) -> list[CandidateSegment]:
    """Length filter for one run: drop short runs, keep mid-sized ones whole,
    and cut long runs down to their best-scoring ``l_max`` window (leftmost
    on ties)."""
    i, j = run
    length = j - i + 1
    if length < l_min:
        return []
    if length > l_max:
        sums = [float(np.sum(scores[s:s + l_max])) for s in range(i, j - l_max + 2)]
        best = int(np.argmax(sums))
        i, j = i + best, i + best + l_max - 1
    values = tuple(int(v) for v in features[i:j + 1])
    return [CandidateSegment(class_id, values, i, float(np.sum(scores[i:j + 1])), flow_index)]


def harvest_candidates(model: nn.CnnModel, flows: Sequence[BidiFlow], t: float = 0.5,
                       l_min: int = 2, l_max: int = 4, batch_size: int = 256) -> dict[int, list[CandidateSegment]]:
    """Candidate pool per class, attributing each flow to its true label."""
    pool: dict[int, list[CandidateSegment]] = {}
    if not flows:
        return pool
    ids, valid = nn.encode_batch(flows, model.seq_len)
    for s in range(0, len(flows), batch_size):
        batch = flows[s:s + batch_size]
        _, cache = nn.forward(model, ids[s:s + batch_size], valid[s:s + batch_size])
        maps = gradcam_batch(model, cache, [f.label for f in batch])
        for b, flow in enumerate(batch):
            vl = int(valid[s + b])
            feats = flow.features[:vl]
            for run in extract_runs(maps[b], t, valid_len=vl):
                for cand in clip_runs(run, maps[b], feats, flow.label, l_min, l_max, s + b):
                    pool.setdefault(flow.label, []).append(cand)
    return {c: pool[c] for c in sorted(pool)}


def dump_candidates(pool: dict[int, list[CandidateSegment]]) -> str:
    lines = []
    for c, cands in pool.items():
        for cand in cands:
            lines.append(json.dumps({"class": c, "start": cand.start, "values": list(cand.values),
                                     "cum_score": cand.score, "flow": cand.flow_index},
                                    separators=(",", ":")))
    return "\n".join(lines) + ("\n" if lines else "")


def load_candidates(text: str) -> dict[int, list[CandidateSegment]]:
    pool: dict[int, list[CandidateSegment]] = {}
    for line in text.splitlines():
        if line.strip():
            o = json.loads(line)
            pool.setdefault(o["class"], []).append(
                CandidateSegment(o["class"], tuple(o["values"]), o["start"], o["cum_score"], o.get("flow", -1)))
    return pool
