"""Independent reference implementations and builders shared by the tests."""
from __future__ import annotations

import struct

import numpy as np

from segmatch.backup import BackupTree, Leaf, Split
from segmatch.flows import BidiFlow, FiveTuple, canonical_key
from segmatch.keyseg import KeySegment
from segmatch.tables import compile_tables


# ---------------------------------------------------------------- pcap bytes

def pcap_global_header(magic=0xA1B2C3D4, endian="<", linktype=1) -> bytes:
    return struct.pack(endian + "IHHiIII", magic, 2, 4, 0, 0, 65535, linktype)


def eth_ipv4_frame(src, dst, sport, dport, proto=17, total_len=512, frag=0, ethertype=0x0800) -> bytes:
    ip = struct.pack("!BBHHHBBHII", 0x45, 0, total_len, 1, frag, 64, proto, 0, src, dst)
    l4 = struct.pack("!HH", sport, dport) + b"\x00" * 4
    return b"\xaa" * 6 + b"\xbb" * 6 + struct.pack("!H", ethertype) + ip + l4


def pcap_record(frame: bytes, sec=0, frac=0, endian="<", orig=None) -> bytes:
    return struct.pack(endian + "IIII", sec, frac, len(frame), len(frame) if orig is None else orig) + frame


# ---------------------------------------------------------------- DBSCAN

def naive_dbscan(points, eps, min_pts):
    """Textbook DBSCAN with an explicit queue and O(n^2) neighbour lists."""
    pts = [tuple(int(v) for v in p) for p in points]
    n = len(pts)

    def d2(a, b):
        return sum((x - y) ** 2 for x, y in zip(a, b))

    nbrs = [[j for j in range(n) if d2(pts[i], pts[j]) <= eps * eps] for i in range(n)]
    core = [len(nb) >= min_pts for nb in nbrs]
    labels = [None] * n
    c = 0
    for i in range(n):
        if labels[i] is not None:
            continue
        if not core[i]:
            labels[i] = -1
            continue
        labels[i] = c
        queue = list(nbrs[i])
        while queue:
            j = queue.pop(0)
            if labels[j] == -1:
                labels[j] = c
            if labels[j] is not None:
                continue
            labels[j] = c
            if core[j]:
                queue.extend(nbrs[j])
        c += 1
    return labels, core


def same_partition(a, b) -> bool:
    """Equal up to renaming of non-noise cluster ids; noise must coincide."""
    fwd, back = {}, {}
    for x, y in zip(a, b):
        if (x == -1) != (y == -1):
            return False
        if x == -1:
            continue
        if fwd.setdefault(x, y) != y or back.setdefault(y, x) != x:
            return False
    return True


# ---------------------------------------------------------------- decision tree

def brute_force_split(x, y, num_classes, min_leaf):
    """Best Gini gain over every (feature, observed value) threshold."""
    n = len(y)

    def gini(labels):
        if len(labels) == 0:
            return 0.0
        p = np.bincount(labels, minlength=num_classes) / len(labels)
        return 1.0 - float((p * p).sum())

    parent = gini(y)
    best = None
    for f in range(x.shape[1]):
        for thr in sorted(set(x[:, f].tolist())):
            left = x[:, f] <= thr
            nl = int(left.sum())
            if nl < min_leaf or n - nl < min_leaf:
                continue
            gain = parent - (nl * gini(y[left]) + (n - nl) * gini(y[~left])) / n
            if best is None or gain > best[0] + 1e-12:
                best = (gain, f, thr)
    return best


def walk_tree(node, features):
    if isinstance(node, Leaf):
        return node.class_id
    return walk_tree(node.left if features[node.feature] <= node.threshold else node.right, features)


def random_tree(rng, depth, n_features, num_classes) -> BackupTree:
    def grow(d):
        if d == 0 or rng.random() < 0.2:
            return Leaf(int(rng.integers(num_classes)))
        return Split(int(rng.integers(n_features)), int(rng.integers(-1500, 1501)), grow(d - 1), grow(d - 1))
    return BackupTree(grow(depth), n_features, depth)


# ---------------------------------------------------------------- segments & tables

def random_segment(rng, l_max=4, l_min=2, num_classes=3, width=80, pool=None) -> KeySegment:
    ell = int(rng.integers(l_min, l_max + 1))
    slots, values = [], []
    for _ in range(ell):
        if pool is not None:
            centre = int(rng.choice(pool))
        else:
            centre = int(rng.integers(-1400, 1401)) or 1
        lo = centre - int(rng.integers(0, width))
        hi = centre + int(rng.integers(0, width))
        # a real feature is never 0
        vals = sorted((set(int(v) for v in rng.integers(lo, hi + 1, size=3)) | {lo, hi}) - {0}) or [centre]
        slots.append((lo, hi))
        values.append(tuple(vals))
    slots += [None] * (l_max - ell)
    values += [()] * (l_max - ell)
    return KeySegment(int(rng.integers(num_classes)), tuple(slots), float(rng.uniform(0, 10)), tuple(values))


def random_tables(rng, n_segments, pool=None, l_max=4, l_min=2, num_classes=3):
    segs = sorted((random_segment(rng, l_max, l_min, num_classes, pool=pool) for _ in range(n_segments)),
                  key=KeySegment.sort_key)
    return segs, compile_tables(segs, l_min, l_max, ("tcam", "sram"), strict=False)


def member_pool(segs) -> list[int]:
    return sorted({v for s in segs for vals in s.member_values for v in vals})


def member_flow(rng, segs, max_len=40, gap_ms=(1, 300)) -> BidiFlow:
    """A random flow built by concatenating cluster-member tuples of ``segs``."""
    n = int(rng.integers(1, max_len + 1))
    feats: list[int] = []
    while len(feats) < n:
        s = segs[int(rng.integers(len(segs)))]
        feats += [int(rng.choice(v)) for v in s.member_values[:s.effective_len]]
    feats = feats[:n]
    flow = random_flow(rng, max_len=1, min_len=1, gap_ms=gap_ms)
    feats[0] = abs(feats[0])
    times = np.cumsum(rng.integers(gap_ms[0], gap_ms[1] + 1, size=n)).tolist()
    return BidiFlow(flow.key, flow.first_src, tuple(zip(times, feats)), None)


def random_flow(rng, pool=None, min_len=1, max_len=40, label=None, gap_ms=(1, 400), jitter=40) -> BidiFlow:
    n = int(rng.integers(min_len, max_len + 1))
    feats = []
    for i in range(n):
        if pool is not None and rng.random() < 0.7:
            v = int(rng.choice(pool)) + int(rng.integers(-jitter, jitter + 1))
        else:
            v = int(rng.integers(1, 1501)) * (1 if rng.random() < 0.5 else -1)
        v = max(-1500, min(1500, v)) or 1
        feats.append(v)
    if feats:
        feats[0] = abs(feats[0])
    times = np.cumsum(rng.integers(gap_ms[0], gap_ms[1] + 1, size=n)).tolist() if n else []
    a, b = int(rng.integers(1, 2 ** 32)), int(rng.integers(1, 2 ** 32))
    while b == a:
        b = int(rng.integers(1, 2 ** 32))
    t = FiveTuple(a, b, int(rng.integers(1024, 65536)), int(rng.integers(1, 1024)), 6)
    return BidiFlow(canonical_key(t), a, tuple(zip(times, feats)), label)


# ---------------------------------------------------------------- gradients

def tiny_model_case(rng):
    """A random small CNN, batch and targets for gradient checks."""
    from segmatch import nn

    n_layers = int(rng.integers(1, 3))
    vocab = int(rng.integers(5, 12))
    model = nn.init_model(int(rng.integers(2, 5)), vocab=vocab, embed_dim=int(rng.integers(2, 6)),
                          channels=int(rng.integers(2, 6)), kernel=int(rng.choice([1, 3, 5])),
                          n_layers=n_layers, seq_len=int(rng.integers(3, 8)), seed=int(rng.integers(1 << 30)))
    for b in model.conv_b:
        b[:] = rng.normal(0, 0.1, size=b.shape)
    model.cls_b[:] = rng.normal(0, 0.1, size=model.cls_b.shape)
    batch = int(rng.integers(1, 4))
    valid = rng.integers(1, model.seq_len + 1, size=batch)
    ids = rng.integers(1, vocab, size=(batch, model.seq_len))
    ids[np.arange(model.seq_len)[None, :] >= valid[:, None]] = 0
    targets = rng.integers(0, model.num_classes, size=batch)
    return model, ids, valid, targets


def loss_of(model, ids, valid, targets):
    from segmatch import nn

    logits, _ = nn.forward(model, ids, valid)
    return nn.cross_entropy(logits, targets)


def max_relative_gradient_error(model, ids, valid, targets, h=1e-6, per_param=6, rng=None):
    """Worst relative error between analytic and central-difference gradients.

    Checks up to ``per_param`` random entries of every parameter tensor;
    embedding entries are drawn from rows of tokens present in the batch.
    Entries whose two gradients are both below 1e-9 are skipped.
    """
    from segmatch import nn

    rng = rng or np.random.default_rng(0)
    _, cache = nn.forward(model, ids, valid)
    grads = nn.backward(model, cache, targets)
    worst = 0.0
    for name, p in model.params().items():
        g = grads[name]
        if name == "embedding":
            rows = np.unique(ids[ids != 0])
            cand = [(int(r), int(c)) for r in rows for c in range(p.shape[1])]
        else:
            cand = [tuple(int(i) for i in idx) for idx in np.ndindex(p.shape)]
        pick = rng.permutation(len(cand))[:per_param]
        for k in pick:
            idx = cand[k]
            old = p[idx]
            p[idx] = old + h
            up = loss_of(model, ids, valid, targets)
            p[idx] = old - h
            down = loss_of(model, ids, valid, targets)
            p[idx] = old
            num = (up - down) / (2 * h)
            ana = g[idx]
            if max(abs(num), abs(ana)) < 1e-9:
                continue
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana)))
    return worst


def max_alpha_error(model, ids, valid, class_id, h=1e-6):
    """Grad-CAM channel weights vs central differences of the class logit
    with respect to each target-layer feature-map entry."""
    from segmatch import explain, nn

    _, cache = nn.forward(model, ids, valid)
    alpha = explain.channel_weights(model, cache, np.full(len(valid), class_id))
    fmap = cache.feature_maps.copy()
    worst = 0.0
    for b in range(len(valid)):
        vl = int(valid[b])
        for k in range(fmap.shape[2]):
            total = 0.0
            for pos in range(vl):
                f = fmap[b:b + 1].copy()
                f[0, pos, k] += h
                up = nn.head(model, f, valid[b:b + 1])[0, class_id]
                f[0, pos, k] -= 2 * h
                down = nn.head(model, f, valid[b:b + 1])[0, class_id]
                total += (up - down) / (2 * h)
            num = total / vl
            ana = alpha[b, k]
            scale = max(abs(num), abs(ana), 1e-12)
            worst = max(worst, abs(num - ana) / scale)
    return worst
