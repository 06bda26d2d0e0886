"""Gini decision tree over the first packets' signed features.

The tree reads the same ``l_max``-wide window the simulator keeps per flow,
so a flow that has seen fewer than ``l_max`` packets presents its features
right-aligned behind zeros.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from typing import Optional, Sequence, Union

import numpy as np

from .flows import BidiFlow

log = logging.getLogger(__name__)

DT_FORMAT = "segmatch-dt"
DT_VERSION = 1


@dataclasses.dataclass(frozen=True)
class Leaf:
    class_id: int


@dataclasses.dataclass(frozen=True)
class Split:
    feature: int
    threshold: int
    left: "Node"
    right: "Node"


Node = Union[Leaf, Split]


@dataclasses.dataclass(frozen=True)
class BackupTree:
    root: Node
    n_features: int
    max_depth: int

    def depth(self) -> int:
        def walk(node):
            return 0 if isinstance(node, Leaf) else 1 + max(walk(node.left), walk(node.right))
        return walk(self.root)


def window_features(features: Sequence[int], l_max: int = 4) -> np.ndarray:
    """The window register after the first ``min(len, l_max)`` packets."""
    head = list(features[:l_max])
    return np.array([0] * (l_max - len(head)) + head, dtype=np.int64)


def flows_to_xy(flows: Sequence[BidiFlow], l_max: int = 4) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([window_features(f.features, l_max) for f in flows]) if flows else np.zeros((0, l_max), np.int64)
    return x, np.array([f.label for f in flows], dtype=np.int64)


def gini_impurity(counts: np.ndarray) -> float:
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return float(1.0 - (p * p).sum())


def best_split(x: np.ndarray, y: np.ndarray, num_classes: int, min_leaf: int = 1):
    """Best ``x[:, f] <= threshold`` split by Gini gain.

    Returns ``(gain, feature, threshold)`` or None when no split leaves at
    least ``min_leaf`` samples on both sides. Ties go to the lowest feature
    index, then the lowest threshold.
    """
    n = len(y)
    if n < 2 * min_leaf:
        return None
    onehot = np.zeros((n, num_classes))
    onehot[np.arange(n), y] = 1.0
    total = onehot.sum(axis=0)
    parent = 1.0 - ((total / n) ** 2).sum()
    best = None
    for f in range(x.shape[1]):
        order = np.argsort(x[:, f], kind="stable")
        xs = x[order, f]
        left = np.cumsum(onehot[order], axis=0)[:-1]
        nl = np.arange(1, n)
        # only cut between distinct values
        ok = (xs[:-1] != xs[1:]) & (nl >= min_leaf) & (n - nl >= min_leaf)
        if not ok.any():
            continue
        right = total - left
        nr = n - nl
        child = ((nl - (left ** 2).sum(axis=1) / nl) + (nr - (right ** 2).sum(axis=1) / nr)) / n
        gain = np.where(ok, parent - child, -np.inf)
        i = int(np.argmax(gain))
        if best is None or gain[i] > best[0] + 1e-12:
            best = (float(gain[i]), f, int(xs[i]))
    return best


def _majority(y: np.ndarray, num_classes: int) -> int:
    return int(np.argmax(np.bincount(y, minlength=num_classes)))


def train_dt(x: np.ndarray, y: np.ndarray, max_depth: int = 8, min_leaf: int = 5,
             num_classes: Optional[int] = None) -> BackupTree:
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("cannot train a tree on no samples")
    if num_classes is None:
        num_classes = int(y.max()) + 1
    if len(np.unique(y)) < 2:
        log.warning("backup tree trained on a single class; emitting one leaf")

    def grow(idx: np.ndarray, depth: int) -> Node:
        ys = y[idx]
        if depth >= max_depth or len(np.unique(ys)) == 1:
            return Leaf(_majority(ys, num_classes))
        found = best_split(x[idx], ys, num_classes, min_leaf)
        if found is None or found[0] <= 0:
            return Leaf(_majority(ys, num_classes))
        _, f, thr = found
        go_left = x[idx, f] <= thr
        return Split(f, thr, grow(idx[go_left], depth + 1), grow(idx[~go_left], depth + 1))

    return BackupTree(grow(np.arange(len(y)), 0), x.shape[1], max_depth)


def dt_predict(tree: BackupTree, features: Sequence[int]) -> int:
    node = tree.root
    while isinstance(node, Split):
        node = node.left if features[node.feature] <= node.threshold else node.right
    return node.class_id


def _node_to_obj(node: Node) -> dict:
    if isinstance(node, Leaf):
        return {"class": node.class_id}
    return {"feature": node.feature, "threshold": node.threshold,
            "left": _node_to_obj(node.left), "right": _node_to_obj(node.right)}


def _node_from_obj(o: dict, n_features: int) -> Node:
    if "class" in o:
        return Leaf(int(o["class"]))
    f = int(o["feature"])
    if not 0 <= f < n_features:
        raise ValueError(f"feature index {f} out of range")
    return Split(f, int(o["threshold"]), _node_from_obj(o["left"], n_features),
                 _node_from_obj(o["right"], n_features))


def dump_tree(tree: BackupTree) -> str:
    return json.dumps({"format": DT_FORMAT, "version": DT_VERSION, "n_features": tree.n_features,
                       "max_depth": tree.max_depth, "root": _node_to_obj(tree.root)}, indent=1) + "\n"


def load_tree(text: str) -> BackupTree:
    o = json.loads(text)
    if o.get("format") != DT_FORMAT or o.get("version") != DT_VERSION:
        raise ValueError(f"unsupported tree file {o.get('format')!r} v{o.get('version')!r}")
    return BackupTree(_node_from_obj(o["root"], o["n_features"]), o["n_features"], o["max_depth"])
