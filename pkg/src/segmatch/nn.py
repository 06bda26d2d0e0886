"""Embedding + 1D convolution classifier over signed length tokens.

Everything is plain numpy in float64 with hand-written backward passes, so
gradients can be checked against finite differences and the last
convolution's feature maps are available for class activation maps.

Layout, per sequence of ``n`` tokens::

    ids (n,) -> embedding (n, E) -> [conv K, same padding, ReLU] x L
             -> mean over non-pad positions (C,) -> dense -> logits

Pad positions are zeroed after the embedding and after every ReLU.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from typing import Optional, Sequence

import numpy as np

from .flows import MTU, BidiFlow
from .metrics import accuracy, macro_f1

log = logging.getLogger(__name__)

PAD = 0
VOCAB_SIZE = 2 * MTU + 2
CHECKPOINT_VERSION = 1


class TrainingError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray
    valid_len: int


def token_id(value: int) -> int:
    return int(np.clip(value, -MTU, MTU)) + MTU + 1


def encode_sequence(flow: BidiFlow | Sequence[int], n: int) -> TokenSequence:
    if n < 1:
        raise ValueError("sequence length must be >= 1")
    feats = flow.features if isinstance(flow, BidiFlow) else tuple(flow)
    feats = feats[:n]
    ids = np.zeros(n, dtype=np.int64)
    ids[:len(feats)] = np.clip(np.asarray(feats, dtype=np.int64), -MTU, MTU) + MTU + 1
    return TokenSequence(ids, len(feats))


def encode_batch(flows: Sequence, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Token ids ``(N, n)`` and valid lengths ``(N,)`` for many flows."""
    ids = np.zeros((len(flows), n), dtype=np.int64)
    valid = np.zeros(len(flows), dtype=np.int64)
    for i, f in enumerate(flows):
        seq = encode_sequence(f, n)
        ids[i] = seq.ids
        valid[i] = seq.valid_len
    return ids, valid


@dataclasses.dataclass
class CnnModel:
    embedding: np.ndarray                         # (V, E)
    conv_w: list[np.ndarray]                      # (C_out, C_in, K) each
    conv_b: list[np.ndarray]                      # (C_out,)
    cls_w: np.ndarray                             # (C_feat, num_classes)
    cls_b: np.ndarray                             # (num_classes,)
    seq_len: int = 32

    @property
    def num_classes(self) -> int:
        return self.cls_b.shape[0]

    @property
    def kernel(self) -> int:
        return self.conv_w[0].shape[2]

    def params(self) -> dict[str, np.ndarray]:
        out = {"embedding": self.embedding}
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            out[f"conv{i}_w"] = w
            out[f"conv{i}_b"] = b
        out["cls_w"] = self.cls_w
        out["cls_b"] = self.cls_b
        return out

    def copy(self) -> "CnnModel":
        return CnnModel(self.embedding.copy(), [w.copy() for w in self.conv_w],
                        [b.copy() for b in self.conv_b], self.cls_w.copy(),
                        self.cls_b.copy(), self.seq_len)


def _glorot(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_model(num_classes: int, *, vocab: int = VOCAB_SIZE, embed_dim: int = 128,
               channels: int = 128, kernel: int = 3, n_layers: int = 2,
               seq_len: int = 32, seed: int = 0) -> CnnModel:
    rng = np.random.default_rng(seed)
    emb = _glorot(rng, (vocab, embed_dim), vocab, embed_dim)
    emb[PAD] = 0.0
    conv_w, conv_b = [], []
    c_in = embed_dim
    for _ in range(n_layers):
        conv_w.append(_glorot(rng, (channels, c_in, kernel), c_in * kernel, channels * kernel))
        conv_b.append(np.zeros(channels))
        c_in = channels
    cls_w = _glorot(rng, (c_in, num_classes), c_in, num_classes)
    return CnnModel(emb, conv_w, conv_b, cls_w, np.zeros(num_classes), seq_len)


@dataclasses.dataclass
class ForwardCache:
    ids: np.ndarray
    mask: np.ndarray          # (B, n) float
    valid: np.ndarray         # (B,)
    cols: list[np.ndarray]    # im2col input of each conv, (B, n, K*C_in)
    pre: list[np.ndarray]     # pre-activation of each conv, (B, n, C_out)
    acts: list[np.ndarray]    # masked post-ReLU maps; acts[-1] is the target layer
    pooled: np.ndarray        # (B, C)
    logits: np.ndarray        # (B, num_classes)

    @property
    def feature_maps(self) -> np.ndarray:
        return self.acts[-1]


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    b, n, c = x.shape
    left = (k - 1) // 2
    padded = np.zeros((b, n + k - 1, c))
    padded[:, left:left + n] = x
    return np.concatenate([padded[:, j:j + n] for j in range(k)], axis=2)


def _col2im(dcols: np.ndarray, k: int, c: int) -> np.ndarray:
    b, n, _ = dcols.shape
    left = (k - 1) // 2
    dpad = np.zeros((b, n + k - 1, c))
    for j in range(k):
        dpad[:, j:j + n] += dcols[:, :, j * c:(j + 1) * c]
    return dpad[:, left:left + n]


def _wmat(w: np.ndarray) -> np.ndarray:
    c_out, c_in, k = w.shape
    return w.transpose(2, 1, 0).reshape(k * c_in, c_out)


def head(model: CnnModel, feature_maps: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Logits from target-layer maps: masked mean over positions, then dense."""
    pooled = feature_maps.sum(axis=1) / np.maximum(valid, 1)[:, None]
    return pooled @ model.cls_w + model.cls_b


def forward(model: CnnModel, ids: np.ndarray, valid: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    ids = np.atleast_2d(ids)
    valid = np.atleast_1d(np.asarray(valid))
    n = ids.shape[1]
    mask = (np.arange(n)[None, :] < valid[:, None]).astype(float)
    x = model.embedding[ids] * mask[..., None]
    cols, pre, acts = [], [], []
    for w, b in zip(model.conv_w, model.conv_b):
        c = _im2col(x, w.shape[2])
        z = c @ _wmat(w) + b
        x = np.maximum(z, 0.0) * mask[..., None]
        cols.append(c)
        pre.append(z)
        acts.append(x)
    pooled = x.sum(axis=1) / np.maximum(valid, 1)[:, None]
    logits = pooled @ model.cls_w + model.cls_b
    return logits, ForwardCache(ids, mask, valid, cols, pre, acts, pooled, logits)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(targets)), targets].mean())


def feature_gradient(model: CnnModel, cache: ForwardCache, dlogits: np.ndarray) -> np.ndarray:
    """Gradient with respect to the target-layer maps, ``(B, n, C)``."""
    dpooled = dlogits @ model.cls_w.T
    return dpooled[:, None, :] * cache.mask[..., None] / np.maximum(cache.valid, 1)[:, None, None]


def backward_from_logits(model: CnnModel, cache: ForwardCache, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Back-propagate an upstream logit gradient ``(B, num_classes)``.

    Returns parameter gradients keyed like ``CnnModel.params()`` plus
    ``"features"``, the gradient with respect to the target-layer maps.
    """
    grads: dict[str, np.ndarray] = {}
    grads["cls_w"] = cache.pooled.T @ dlogits
    grads["cls_b"] = dlogits.sum(axis=0)
    mask3 = cache.mask[..., None]
    dx = feature_gradient(model, cache, dlogits)
    grads["features"] = dx
    for i in reversed(range(len(model.conv_w))):
        w = model.conv_w[i]
        c_out, c_in, k = w.shape
        dz = dx * mask3 * (cache.pre[i] > 0)
        dwmat = cache.cols[i].reshape(-1, k * c_in).T @ dz.reshape(-1, c_out)
        grads[f"conv{i}_w"] = dwmat.reshape(k, c_in, c_out).transpose(2, 1, 0)
        grads[f"conv{i}_b"] = dz.sum(axis=(0, 1))
        dx = _col2im(dz @ _wmat(w).T, k, c_in)
    dx = dx * mask3
    flat_ids = cache.ids.ravel()
    flat_dx = dx.reshape(len(flat_ids), -1)
    order = np.argsort(flat_ids, kind="stable")
    uniq, starts = np.unique(flat_ids[order], return_index=True)
    demb = np.zeros_like(model.embedding)
    demb[uniq] = np.add.reduceat(flat_dx[order], starts, axis=0)
    grads["embedding"] = demb
    return grads


def backward(model: CnnModel, cache: ForwardCache, targets) -> dict[str, np.ndarray]:
    """Gradients of the mean cross-entropy for ``targets`` (int or array)."""
    targets = np.atleast_1d(np.asarray(targets))
    probs = softmax(cache.logits)
    dlogits = probs.copy()
    dlogits[np.arange(len(targets)), targets] -= 1.0
    return backward_from_logits(model, cache, dlogits / len(targets))


def predict(model: CnnModel, seq: TokenSequence | BidiFlow) -> tuple[int, np.ndarray]:
    if isinstance(seq, BidiFlow):
        seq = encode_sequence(seq, model.seq_len)
    logits, _ = forward(model, seq.ids[None, :], np.array([seq.valid_len]))
    probs = softmax(logits)[0]
    return int(np.argmax(probs)), probs


def predict_batch(model: CnnModel, ids: np.ndarray, valid: np.ndarray, batch_size: int = 512) -> np.ndarray:
    out = []
    for s in range(0, len(ids), batch_size):
        logits, _ = forward(model, ids[s:s + batch_size], valid[s:s + batch_size])
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model: CnnModel, flows: Sequence[BidiFlow]) -> dict[str, float]:
    ids, valid = encode_batch(flows, model.seq_len)
    pred = predict_batch(model, ids, valid)
    y = [f.label for f in flows]
    return {"accuracy": accuracy(y, pred.tolist()), "macro_f1": macro_f1(y, pred.tolist())}


@dataclasses.dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    seq_len: int = 32
    embed_dim: int = 128
    kernel: int = 3
    channels: int = 128
    n_layers: int = 2
    patience: Optional[int] = None
    weight_decay: float = 0.0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "lr", "seq_len", "embed_dim", "kernel", "channels", "n_layers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


class Adam:
    """Adam with optional decoupled weight decay."""

    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            if self.weight_decay:
                p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(train_set: Sequence[BidiFlow], val_set: Sequence[BidiFlow], cfg: TrainConfig,
          num_classes: Optional[int] = None) -> tuple[CnnModel, list[dict]]:
    """Mini-batch Adam training; returns the best-validation-accuracy model.

    History entries carry ``epoch``, ``loss`` (mean training loss of the
    epoch), ``train_accuracy`` and ``val_accuracy``. Entry 0 is measured
    before the first update.
    """
    labels = [f.label for f in train_set]
    if any(l is None for l in labels):
        raise TrainingError("training flows must be labeled")
    if len(set(labels)) < 2:
        raise TrainingError("training needs at least two classes")
    if num_classes is None:
        num_classes = max(labels + [f.label for f in val_set]) + 1
    model = init_model(num_classes, embed_dim=cfg.embed_dim, channels=cfg.channels,
                       kernel=cfg.kernel, n_layers=cfg.n_layers, seq_len=cfg.seq_len,
                       seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    ids, valid = encode_batch(train_set, cfg.seq_len)
    y = np.asarray(labels)
    vids, vvalid = encode_batch(val_set, cfg.seq_len)
    vy = np.asarray([f.label for f in val_set])

    def val_acc(m):
        if len(vy) == 0:
            return 0.0
        return float((predict_batch(m, vids, vvalid) == vy).mean())

    logits0 = np.concatenate([forward(model, ids[s:s + 512], valid[s:s + 512])[0]
                              for s in range(0, len(ids), 512)])
    history = [{"epoch": 0, "loss": cross_entropy(logits0, y),
                "train_accuracy": float((logits0.argmax(1) == y).mean()),
                "val_accuracy": val_acc(model)}]
    best, best_acc, stale = model.copy(), history[0]["val_accuracy"], 0
    params = model.params()
    opt = Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(y))
        total, correct = 0.0, 0
        for s in range(0, len(order), cfg.batch_size):
            bi = order[s:s + cfg.batch_size]
            logits, cache = forward(model, ids[bi], valid[bi])
            total += cross_entropy(logits, y[bi]) * len(bi)
            correct += int((logits.argmax(1) == y[bi]).sum())
            grads = backward(model, cache, y[bi])
            opt.step(params, grads)
            model.embedding[PAD] = 0.0
        acc = val_acc(model)
        history.append({"epoch": epoch, "loss": total / len(y),
                        "train_accuracy": correct / len(y), "val_accuracy": acc})
        log.info("epoch %d loss %.4f val_acc %.4f", epoch, total / len(y), acc)
        if acc > best_acc:
            best, best_acc, stale = model.copy(), acc, 0
        else:
            stale += 1
            if cfg.patience is not None and stale >= cfg.patience:
                break
    return best, history


def save_model(model: CnnModel, path) -> None:
    """Write an ``.npz`` checkpoint: every tensor plus a JSON ``meta`` entry."""
    meta = {"format": "segmatch-cnn", "version": CHECKPOINT_VERSION,
            "seq_len": model.seq_len, "n_layers": len(model.conv_w)}
    arrays = dict(model.params())
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path) -> CnnModel:
    with np.load(path) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        if meta.get("format") != "segmatch-cnn" or meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint {meta.get('format')!r} v{meta.get('version')!r}")
        n = meta["n_layers"]
        return CnnModel(z["embedding"].copy(),
                        [z[f"conv{i}_w"].copy() for i in range(n)],
                        [z[f"conv{i}_b"].copy() for i in range(n)],
                        z["cls_w"].copy(), z["cls_b"].copy(), int(meta["seq_len"]))
