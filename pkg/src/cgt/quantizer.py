"""Feature quantization with k-anonymous or differentially private k-means.

Feature rows are mapped to the id of their cluster; the reserved id ``m`` marks
null (padding) positions.  De-quantization replaces an id by the empirical mean
of the original vectors assigned to that cluster, so every emitted row is shared
by at least ``k_min`` original nodes when the model is k-anonymous.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoding import ComputationGraphSet, EncodedComputationGraph, TreeShape
from .graph import Graph, build_graph
from .privacy import gaussian_sigma
from .rng import generator

logger = logging.getLogger(__name__)

QZ_MAGIC = b"CGQZ"
QZ_VERSION = 1
_PRIVACY_TAGS = {"none": 0, "k_anonymous": 1, "dp": 2}


class InfeasibleClusteringError(ValueError):
    pass


@dataclass(eq=False)
class QuantizerModel:
    centers: np.ndarray
    means: np.ndarray
    sizes: np.ndarray
    k_min: int
    n_fit: int
    privacy: dict = field(default_factory=lambda: {"mode": "none"})
    objective_trace: list = field(default_factory=list)

    @property
    def m(self) -> int:
        return self.centers.shape[0]

    @property
    def d(self) -> int:
        return self.centers.shape[1]

    @property
    def null_token_id(self) -> int:
        return self.m

    @property
    def vocab(self) -> int:
        return self.m + 1


@dataclass(eq=False)
class TokenSet:
    """``N`` token sequences over one tree shape plus their root labels."""

    tokens: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i) -> tuple[np.ndarray, int]:
        return self.tokens[i], int(self.labels[i])

    def subset(self, index) -> "TokenSet":
        return TokenSet(self.tokens[index], self.labels[index])


def squared_distances(X: np.ndarray, C: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Exact pairwise squared Euclidean distances in float64, row-chunked."""
    X = np.asarray(X, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    out = np.empty((X.shape[0], C.shape[0]))
    step = max(1, chunk * 64 // max(C.shape[0] * max(C.shape[1], 1), 1))
    for lo in range(0, X.shape[0], step):
        diff = X[lo:lo + step, None, :] - C[None, :, :]
        out[lo:lo + step] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def nearest(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Index of the nearest row of ``C`` for every row of ``X`` (ties -> lowest id)."""
    if X.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmin(squared_distances(X, C), axis=1).astype(np.int64)


def constrained_assign(dist: np.ndarray, k_min: int) -> np.ndarray:
    """Nearest-center assignment repaired so every cluster has ``k_min`` members.

    Undersized clusters (in id order) pull in the points with the smallest
    distance increase from clusters that still hold more than ``k_min``.
    """
    n, m = dist.shape
    if m * k_min > n:
        raise InfeasibleClusteringError(f"m * k_min = {m * k_min} exceeds n = {n}")
    assign = np.argmin(dist, axis=1)
    sizes = np.bincount(assign, minlength=m)
    rows = np.arange(n)
    for c in np.flatnonzero(sizes < k_min):
        need = k_min - sizes[c]
        cost = dist[:, c] - dist[rows, assign]
        for i in np.argsort(cost, kind="stable"):
            a = assign[i]
            if a == c or sizes[a] <= k_min:
                continue
            assign[i] = c
            sizes[a] -= 1
            sizes[c] += 1
            need -= 1
            if need == 0:
                break
    return assign


def _cluster_stats(X: np.ndarray, assign: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    counts = np.bincount(assign, minlength=m).astype(np.float64)
    sums = np.zeros((m, X.shape[1]))
    np.add.at(sums, assign, X)
    return sums, counts


def _kmeans_pp(X: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    centers = [X[rng.integers(len(X))]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, m):
        total = d2.sum()
        if total <= 0:
            raise InfeasibleClusteringError("fewer distinct rows than clusters")
        idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
        idx = min(idx, len(X) - 1)
        while d2[idx] == 0:  # guard against landing on a zero-mass tail
            idx -= 1
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _objective(dist: np.ndarray, assign: np.ndarray) -> float:
    return float(dist[np.arange(len(assign)), assign].sum())


def _lloyd(X, m, k_min, iters, rng, init=None, noise=None):
    """Constrained Lloyd iterations; ``noise(sums, counts)`` perturbs each update."""
    centers = _kmeans_pp(X, m, rng) if init is None else init
    assign = None
    trace = []
    for _ in range(iters):
        dist = squared_distances(X, centers)
        new_assign = constrained_assign(dist, k_min)
        trace.append(_objective(dist, new_assign))
        if noise is None and assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        sums, counts = _cluster_stats(X, assign, m)
        if noise is not None:
            sums, counts = noise(sums, counts)
        centers = sums / np.maximum(counts, 1.0)[:, None]
        if noise is not None:
            centers = noise.project(centers)
    return centers, trace


def _check_distinct(X: np.ndarray, m: int) -> None:
    if np.unique(X, axis=0).shape[0] < m:
        raise InfeasibleClusteringError("m exceeds the number of distinct rows (duplicate-center collapse)")


def fit_kmeans_min_size(X, m: int, k_min: int = 1, n_fit: int | None = None, iters: int = 20,
                        seed: int = 0) -> QuantizerModel:
    """k-means whose clusters all hold at least ``k_min`` rows of ``X``.

    Centers are fitted on a random ``n_fit`` subsample (minimum size scaled to
    the subsample); the final assignment of all rows enforces ``k_min`` exactly.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if m < 1:
        raise ValueError("m must be >= 1")
    if m * k_min > n:
        raise InfeasibleClusteringError(f"m * k_min = {m * k_min} exceeds n = {n}")
    _check_distinct(X, m)
    rng = generator(seed, "kmeans")
    n_fit = n if n_fit is None else min(int(n_fit), n)
    if n_fit < n:
        sub = X[np.sort(rng.choice(n, size=n_fit, replace=False))]
        k_sub = max(1, min(math.ceil(k_min * n_fit / n), n_fit // m))
        if np.unique(sub, axis=0).shape[0] < m:
            sub, n_fit, k_sub = X, n, k_min
    else:
        sub, k_sub = X, k_min
    centers, trace = _lloyd(sub, m, k_sub, iters, rng)
    assign = constrained_assign(squared_distances(X, centers), k_min)
    sums, counts = _cluster_stats(X, assign, m)
    means = sums / counts[:, None]
    privacy = {"mode": "k_anonymous", "k": int(k_min)} if k_min > 1 else {"mode": "none"}
    return QuantizerModel(centers.astype(np.float32), means.astype(np.float32), counts.astype(np.int64),
                          int(k_min), int(n_fit), privacy, trace)


def clip_to_norm(X, bound: float) -> np.ndarray:
    """Scale down rows whose L2 norm exceeds ``bound``; other rows are untouched."""
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1)
    over = norms > bound
    out = X.copy()
    out[over] *= (bound / norms[over])[:, None]
    return out


class _GaussianNoise:
    def __init__(self, sigma_sum: float, sigma_count: float, bound: float, rng: np.random.Generator):
        self.sigma_sum = sigma_sum
        self.sigma_count = sigma_count
        self.bound = bound
        self.rng = rng

    def __call__(self, sums, counts):
        sums = sums + self.rng.normal(0.0, 1.0, size=sums.shape) * self.sigma_sum
        counts = counts + self.rng.normal(0.0, 1.0, size=counts.shape) * self.sigma_count
        return sums, counts

    def project(self, centers):
        return clip_to_norm(centers, self.bound)


def fit_dp_kmeans(X, m: int, eps: float, delta: float, iters: int = 10, seed: int = 0,
                  clip: float = 1.0) -> QuantizerModel:
    """Lloyd k-means with Gaussian noise on per-cluster sums and counts.

    Rows are clipped to norm ``clip``; the (eps, delta) budget is split evenly over
    ``2 * iters`` releases.  With ``eps = inf`` no noise is drawn and the run is
    identical to :func:`fit_kmeans_min_size` with ``k_min = 1`` on all rows.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    X = clip_to_norm(X, clip)
    n = X.shape[0]
    if m < 1 or m > n:
        raise InfeasibleClusteringError("need 1 <= m <= n")
    releases = 2 * iters
    if math.isinf(eps):
        _check_distinct(X, m)
        rng = generator(seed, "kmeans")
        centers, trace = _lloyd(X, m, 1, iters, rng)
        sigma_sum = sigma_count = 0.0
    else:
        eps_step, delta_step = eps / releases, delta / releases
        sigma_sum = gaussian_sigma(eps_step, delta_step, clip)
        sigma_count = gaussian_sigma(eps_step, delta_step, 1.0)
        rng = generator(seed, "kmeans")
        # initial centers must not look at the data
        init = clip_to_norm(rng.normal(size=(m, X.shape[1])) * clip, clip)
        noise = _GaussianNoise(sigma_sum, sigma_count, clip, generator(seed, "dp-kmeans-noise"))
        centers, trace = _lloyd(X, m, 1, iters, rng, init=init, noise=noise)
    assign = constrained_assign(squared_distances(X, centers), 1)
    counts = np.bincount(assign, minlength=m).astype(np.int64)
    if math.isinf(eps):
        sums, fcounts = _cluster_stats(X, assign, m)
        means = sums / fcounts[:, None]
    else:
        means = centers
    privacy = {"mode": "dp", "eps": float(eps), "delta": float(delta), "clip": float(clip),
               "sigma_sum": sigma_sum, "sigma_count": sigma_count, "releases": releases}
    return QuantizerModel(centers.astype(np.float32), means.astype(np.float32), counts, 1, n, privacy, trace)


def quantize_rows(rows: np.ndarray, q: QuantizerModel, null_mask: np.ndarray | None = None) -> np.ndarray:
    rows = np.asarray(rows)
    flat = rows.reshape(-1, rows.shape[-1])
    null = (~flat.any(axis=1)) if null_mask is None else np.asarray(null_mask).reshape(-1)
    out = np.full(flat.shape[0], q.null_token_id, dtype=np.int64)
    out[~null] = nearest(flat[~null], q.means)
    return out.reshape(rows.shape[:-1])


def quantize(cg: EncodedComputationGraph, q: QuantizerModel) -> tuple[np.ndarray, int]:
    """Token sequence of one encoded graph: nearest mean id per row, null for zeros."""
    if cg.feature_rows.shape[1] != q.d:
        raise ValueError("feature dimension does not match the quantizer")
    return quantize_rows(cg.feature_rows, q), cg.root_label


def quantize_set(cgs: ComputationGraphSet, q: QuantizerModel) -> TokenSet:
    if cgs.d != q.d:
        raise ValueError("feature dimension does not match the quantizer")
    if cgs.ids is None:
        return TokenSet(quantize_rows(cgs.features, q), cgs.labels.copy())
    # sampled sets: quantize each distinct node once
    ids = cgs.ids
    live = ids >= 0
    uniq, first = np.unique(ids[live], return_index=True)
    rows = cgs.features[live][first]
    node_tok = nearest(rows, q.means)
    tokens = np.full(ids.shape, q.null_token_id, dtype=np.int64)
    tokens[live] = node_tok[np.searchsorted(uniq, ids[live])]
    return TokenSet(tokens, cgs.labels.copy())


def dequantize(tokens, root_label: int, q: QuantizerModel, shape: TreeShape) -> EncodedComputationGraph:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() > q.m):
        raise ValueError("token id out of range")
    table = np.concatenate([q.means, np.zeros((1, q.d), dtype=np.float32)])
    return EncodedComputationGraph(shape, table[tokens], int(root_label), None)


def dequantize_set(ts: TokenSet, q: QuantizerModel, shape: TreeShape) -> ComputationGraphSet:
    if ts.tokens.size and (ts.tokens.min() < 0 or ts.tokens.max() > q.m):
        raise ValueError("token id out of range")
    table = np.concatenate([q.means, np.zeros((1, q.d), dtype=np.float32)])
    return ComputationGraphSet(shape, table[ts.tokens], ts.labels)


def cluster_edge_distribution(ts: TokenSet, shape: TreeShape, m: int) -> np.ndarray:
    """Row-stochastic parent->child cluster transition matrix of a token set."""
    child = np.arange(1, shape.T)
    parent = (child - 1) // shape.s
    p = ts.tokens[:, parent].ravel()
    c = ts.tokens[:, child].ravel()
    ok = (p < m) & (c < m)
    counts = np.zeros((m, m))
    np.add.at(counts, (p[ok], c[ok]), 1.0)
    rows = counts.sum(axis=1, keepdims=True)
    return np.where(rows > 0, counts / np.where(rows > 0, rows, 1.0), 1.0 / m)


def materialize_graph(q: QuantizerModel, cluster_edge_dist, node_to_cluster, s: int, seed: int,
                      labels=None, num_classes: int | None = None, return_picks: bool = False):
    """Whole graph in which every node carries its cluster's mean and edge distribution.

    Each node draws ``s`` clusters with replacement from its cluster's row and
    links to a uniformly chosen member of each.  With ``return_picks`` the
    ``(n, s)`` array of drawn clusters is returned alongside the graph.
    """
    dist = np.asarray(cluster_edge_dist, dtype=np.float64)
    node_to_cluster = np.asarray(node_to_cluster, dtype=np.int64)
    if not np.allclose(dist.sum(axis=1), 1.0, atol=1e-9, rtol=0):
        raise ValueError("cluster_edge_dist rows must sum to 1")
    n, m = len(node_to_cluster), dist.shape[0]
    rng = generator(seed, "materialize")
    members = [np.flatnonzero(node_to_cluster == c) for c in range(m)]
    picked = np.empty((n, s), dtype=np.int64)
    for v in range(n):
        picked[v] = rng.choice(m, size=s, replace=True, p=dist[node_to_cluster[v]])
    edges = []
    for v in range(n):
        for c in picked[v]:
            if members[c].size == 0:
                raise ValueError(f"cluster {c} has no member nodes")
            edges.append((v, int(members[c][rng.integers(members[c].size)])))
    labels = np.zeros(n, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    g, _ = build_graph(n, np.array(edges, dtype=np.int64).reshape(-1, 2), q.means[node_to_cluster],
                       labels, num_classes)
    return (g, picked) if return_picks else g


def write_quantizer(path, q: QuantizerModel) -> None:
    priv = q.privacy
    tag = _PRIVACY_TAGS[priv["mode"]]
    with open(path, "wb") as fh:
        fh.write(QZ_MAGIC)
        fh.write(struct.pack("<IIIIIQ", QZ_VERSION, q.m, q.d, q.k_min, tag, q.n_fit))
        fh.write(struct.pack("<ddd", float(priv.get("eps", 0.0)), float(priv.get("delta", 0.0)),
                             float(priv.get("clip", 0.0))))
        fh.write(q.centers.astype("<f4").tobytes())
        fh.write(q.means.astype("<f4").tobytes())
        fh.write(q.sizes.astype("<u8").tobytes())


def read_quantizer(path) -> QuantizerModel:
    data = Path(path).read_bytes()
    if data[:4] != QZ_MAGIC:
        raise ValueError(f"{path}: not a quantizer file")
    version, m, d, k_min, tag, n_fit = struct.unpack_from("<IIIIIQ", data, 4)
    if version != QZ_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    eps, delta, clip = struct.unpack_from("<ddd", data, 32)
    off = 56
    centers = np.frombuffer(data, "<f4", m * d, off).reshape(m, d).astype(np.float32)
    off += 4 * m * d
    means = np.frombuffer(data, "<f4", m * d, off).reshape(m, d).astype(np.float32)
    off += 4 * m * d
    sizes = np.frombuffer(data, "<u8", m, off).astype(np.int64)
    mode = {v: k for k, v in _PRIVACY_TAGS.items()}[tag]
    privacy: dict = {"mode": mode}
    if mode == "k_anonymous":
        privacy["k"] = int(k_min)
    elif mode == "dp":
        privacy.update(eps=eps, delta=delta, clip=clip)
    return QuantizerModel(centers, means, sizes, int(k_min), int(n_fit), privacy)


def write_tokens(path, ts: TokenSet) -> None:
    with open(path, "w") as fh:
        for toks, label in zip(ts.tokens.tolist(), ts.labels.tolist()):
            fh.write(f"{label}\t{','.join(map(str, toks))}\n")


def read_tokens(path) -> TokenSet:
    labels, rows = [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            label, toks = line.split("\t")
            labels.append(int(label))
            rows.append([int(t) for t in toks.split(",")])
    return TokenSet(np.array(rows, dtype=np.int64), np.array(labels, dtype=np.int64))
