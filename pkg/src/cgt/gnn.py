"""Reference GNNs over duplicate-encoded computation trees.

Every tree has the same balanced s-ary shape, so a depth-L message-passing model
is a bottom-up sweep: after layer ``k`` only tree levels ``0 .. L-k`` are still
needed and the root row of level 0 feeds the classifier.  Per node ``u`` with
children ``c_1..c_s`` (null children are zero rows):

    mean       relu(h_u W_self + (sum_c h_c / s) W_neigh + b)
    linear     (h_u W_self + (sum_c h_c / s) W_neigh + b)        no activation
    sum        relu(relu(((1 + eps) h_u + sum_c h_c) W1 + b1) W2 + b2)
    attention  relu(sum_j a_uj h_j W + b), j over u and its non-null children,
               a = softmax(leaky_relu(h_u W a_src + h_j W a_dst))

Rows at null positions are re-zeroed after every layer.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .encoding import ComputationGraphSet
from .rng import derive_seed, generator

logger = logging.getLogger(__name__)

AGGREGATORS = {"mean": "GCN", "linear": "SGC", "sum": "GIN", "attention": "GAT"}


@dataclass
class GnnConfig:
    aggregator: str = "mean"
    layers: int = 2
    hidden: int = 64
    epochs: int = 100
    lr: float = 1e-2
    repeats: int = 3
    seed: int = 0
    gin_eps: float = 0.0
    weight_decay: float = 5e-4

    def __post_init__(self):
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.aggregator!r}")
        if self.layers < 1 or self.repeats < 1:
            raise ValueError("layers and repeats must be >= 1")


@dataclass
class AccuracyRecord:
    dataset: str
    scenario: str
    model: str
    accuracy: float
    std: float
    repeats: int = 1


def init_params(cfg: GnnConfig, d: int, num_classes: int, seed: int, dtype=np.float32) -> dict:
    rng = generator(seed, "gnn-init", cfg.aggregator)

    def glorot(a, b):
        bound = math.sqrt(6.0 / (a + b))
        return rng.uniform(-bound, bound, size=(a, b)).astype(dtype)

    p = {}
    din = d
    for k in range(cfg.layers):
        h = cfg.hidden
        if cfg.aggregator in ("mean", "linear"):
            p[f"{k}.w_self"] = glorot(din, h)
            p[f"{k}.w_neigh"] = glorot(din, h)
            p[f"{k}.b"] = np.zeros(h, dtype)
        elif cfg.aggregator == "sum":
            p[f"{k}.w1"] = glorot(din, h)
            p[f"{k}.b1"] = np.zeros(h, dtype)
            p[f"{k}.w2"] = glorot(h, h)
            p[f"{k}.b2"] = np.zeros(h, dtype)
        else:
            p[f"{k}.w"] = glorot(din, h)
            p[f"{k}.a_src"] = glorot(h, 1)
            p[f"{k}.a_dst"] = glorot(h, 1)
            p[f"{k}.b"] = np.zeros(h, dtype)
        din = h
    p["head.w"] = glorot(din, num_classes)
    p["head.b"] = np.zeros(num_classes, dtype)
    return p


def _levels(features: np.ndarray, s: int, L: int) -> list[np.ndarray]:
    out, start = [], 0
    for level in range(L + 1):
        width = s**level
        out.append(features[:, start:start + width])
        start += width
    return out


def _layer(cfg: GnnConfig, P, k: int, h_self, h_child, child_live, s: int):
    B, W, _ = h_self.shape
    din = h_child.shape[-1]
    kids = ad.reshape(h_child, (B, W, s, din))
    agg = cfg.aggregator
    if agg in ("mean", "linear"):
        neigh = ad.mul(ad.sum_(kids, axis=2), 1.0 / s)
        out = ad.add(ad.add(ad.matmul(h_self, P[f"{k}.w_self"]), ad.matmul(neigh, P[f"{k}.w_neigh"])),
                     P[f"{k}.b"])
        return ad.relu(out) if agg == "mean" else out
    if agg == "sum":
        z = ad.add(ad.mul(h_self, 1.0 + cfg.gin_eps), ad.sum_(kids, axis=2))
        z = ad.relu(ad.add(ad.matmul(z, P[f"{k}.w1"]), P[f"{k}.b1"]))
        return ad.relu(ad.add(ad.matmul(z, P[f"{k}.w2"]), P[f"{k}.b2"]))
    # single-head attention over self and non-null children
    ws = ad.matmul(h_self, P[f"{k}.w"])                                   # (B, W, h)
    wc = ad.reshape(ad.matmul(h_child, P[f"{k}.w"]), (B, W, s, -1))       # (B, W, s, h)
    hidden = ws.shape[-1]
    src = ad.matmul(ws, P[f"{k}.a_src"])                                  # (B, W, 1)
    dst_self = ad.matmul(ws, P[f"{k}.a_dst"])                             # (B, W, 1)
    dst_kids = ad.reshape(ad.matmul(wc, P[f"{k}.a_dst"]), (B, W, s))      # (B, W, s)
    scores = ad.leaky_relu(ad.add(src, ad.concat([dst_self, dst_kids], axis=2)), 0.2)
    mask = np.concatenate([np.ones((B, W, 1), dtype=bool), child_live.reshape(B, W, s)], axis=2)
    alpha = ad.masked_softmax(scores, mask)                               # (B, W, 1 + s)
    members = ad.concat([ad.reshape(ws, (B, W, 1, hidden)), wc], axis=2)  # (B, W, 1 + s, h)
    mixed = ad.reshape(ad.matmul(ad.reshape(alpha, (B, W, 1, 1 + s)), members), (B, W, hidden))
    return ad.relu(ad.add(mixed, P[f"{k}.b"]))


def gnn_forward(cfg: GnnConfig, params: dict, features, s: int, null_mask=None, return_embedding=False):
    """Root logits ``(B, C)`` for a batch of encoded trees ``(B, T, d)``."""
    x = np.asarray(features)
    if x.ndim == 2:
        x = x[None]
    L = cfg.layers
    T = (s ** (L + 1) - 1) // (s - 1) if s > 1 else L + 1
    if x.shape[1] != T:
        raise ValueError(f"tree has {x.shape[1]} rows, expected {T} for s={s}, L={L}")
    dtype = params["head.w"].dtype
    x = x.astype(dtype, copy=False)
    live = ~(null_mask if null_mask is not None else ~x.any(axis=2))
    if live.ndim == 1:
        live = live[None]
    P = {k: v if isinstance(v, ad.Tensor) else ad.Tensor(v) for k, v in params.items()}
    hs = [ad.Tensor(a) for a in _levels(x, s, L)]
    lv = _levels(live, s, L)
    for k in range(L):
        new = []
        for level in range(L - k):
            h = _layer(cfg, P, k, hs[level], hs[level + 1], lv[level + 1], s)
            new.append(ad.mul(h, lv[level][..., None].astype(dtype)))
        hs = new
    root = ad.reshape(hs[0], (x.shape[0], -1))
    logits = ad.add(ad.matmul(root, P["head.w"]), P["head.b"])
    return (logits, root) if return_embedding else logits


def _adam_step(params, grads, state, lr, wd, t, b1=0.9, b2=0.999, eps=1e-8):
    for k, g in grads.items():
        if wd and not k.split(".")[-1].startswith("b"):
            g = g + wd * params[k]
        m = state.setdefault(("m", k), np.zeros_like(g))
        v = state.setdefault(("v", k), np.zeros_like(g))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        params[k] = (params[k] - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)).astype(params[k].dtype)


def _accuracy(cfg, params, cgs: ComputationGraphSet, batch=1024) -> float:
    if len(cgs) == 0:
        return math.nan
    correct = 0
    mask = cgs.null_mask
    for lo in range(0, len(cgs), batch):
        logits = gnn_forward(cfg, params, cgs.features[lo:lo + batch], cgs.shape.s, mask[lo:lo + batch]).data
        correct += int((logits.argmax(axis=1) == cgs.labels[lo:lo + batch]).sum())
    return correct / len(cgs)


def fit(cfg: GnnConfig, train: ComputationGraphSet, num_classes: int, seed: int,
        valid: ComputationGraphSet | None = None) -> dict:
    """Full-batch Adam on root cross-entropy; keeps the best-validation parameters."""
    params = init_params(cfg, train.d, num_classes, seed)
    names = list(params)
    state: dict = {}
    mask = train.null_mask
    best, best_acc = {k: v.copy() for k, v in params.items()}, -1.0
    for epoch in range(1, cfg.epochs + 1):
        leaves = {k: ad.param(params[k]) for k in names}
        logits = gnn_forward(cfg, leaves, train.features, train.shape.s, mask)
        value = ad.cross_entropy(logits, train.labels)
        grads = dict(zip(names, ad.grad(value, [leaves[k] for k in names])))
        _adam_step(params, grads, state, cfg.lr, cfg.weight_decay, epoch)
        if valid is not None and len(valid):
            acc = _accuracy(cfg, params, valid)
            if acc > best_acc:
                best_acc, best = acc, {k: v.copy() for k, v in params.items()}
    return best if valid is not None and len(valid) else params


def train_eval(cfg: GnnConfig, train: ComputationGraphSet, test: ComputationGraphSet,
               valid: ComputationGraphSet | None = None, num_classes: int | None = None,
               dataset: str = "original", scenario: str = "default") -> AccuracyRecord:
    if train.shape != test.shape:
        raise ValueError("train and test trees have different shapes")
    if train.shape.L != cfg.layers:
        raise ValueError("GNN depth must equal the tree depth")
    if num_classes is None:
        num_classes = int(max(train.labels.max(), test.labels.max())) + 1
    if len(np.unique(train.labels)) < 2:
        logger.warning("training set has a single class")
    accs = []
    for r in range(cfg.repeats):
        params = fit(cfg, train, num_classes, derive_seed(cfg.seed, "repeat", r), valid)
        accs.append(_accuracy(cfg, params, test))
    return AccuracyRecord(dataset, scenario, AGGREGATORS[cfg.aggregator], float(np.mean(accs)),
                          float(np.std(accs)), cfg.repeats)


def write_bench_report(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "scenario", "model", "accuracy", "std"])
        for r in records:
            w.writerow([r.dataset, r.scenario, r.model, repr(r.accuracy), repr(r.std)])


def read_bench_report(path) -> list[AccuracyRecord]:
    with open(path, newline="") as fh:
        return [AccuracyRecord(row["dataset"], row["scenario"], row["model"], float(row["accuracy"]),
                               float(row["std"])) for row in csv.DictReader(fh)]
