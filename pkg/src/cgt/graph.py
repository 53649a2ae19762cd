"""Whole-graph container, text I/O, and the scenario perturbations.

Graphs are undirected and stored in CSR with both directions present.  The
on-disk layout is a directory with three files:

``edges.tsv``
    ``u<TAB>v`` per line, 0-indexed, ``#`` starts a comment.
``features.csv``
    one row of ``d`` comma-separated reals per node.
``labels.tsv``
    one integer label per node.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .rng import generator

logger = logging.getLogger(__name__)


class GraphFormatError(ValueError):
    """Raised when a graph directory or array set violates the format."""


class PprConvergenceError(RuntimeError):
    def __init__(self, residual: float, iterations: int):
        super().__init__(f"PPR did not converge after {iterations} iterations (residual {residual:.3e})")
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True, eq=False)
class Graph:
    indptr: np.ndarray
    indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        return len(self.indices) // 2

    def degree(self, v: int | None = None):
        deg = np.diff(self.indptr)
        return deg if v is None else int(deg[v])

    def neighbors(self, v: int) -> np.ndarray:
        return self.indices[self.indptr[v]:self.indptr[v + 1]]

    def edge_array(self) -> np.ndarray:
        """Undirected edges as an ``(E, 2)`` array with ``u < v``, sorted."""
        src = np.repeat(np.arange(self.n, dtype=np.int64), np.diff(self.indptr))
        keep = src < self.indices
        return np.stack([src[keep], self.indices[keep]], axis=1)

    def adjacency(self) -> sp.csr_matrix:
        data = np.ones(len(self.indices), dtype=np.float64)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))

    def with_edges(self, edges: np.ndarray) -> "Graph":
        g, _ = build_graph(self.n, edges, self.features, self.labels, self.num_classes)
        return g

    def same_as(self, other: "Graph") -> bool:
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
            and self.features.dtype == other.features.dtype
            and np.array_equal(self.features.view(np.uint32), other.features.view(np.uint32))
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True)
class SplitSpec:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def validate(self, n: int) -> None:
        parts = [np.asarray(p) for p in (self.train, self.valid, self.test)]
        allidx = np.concatenate(parts)
        if allidx.size and (allidx.min() < 0 or allidx.max() >= n):
            raise ValueError("split index out of range")
        if np.unique(allidx).size != allidx.size:
            raise ValueError("split parts overlap")


@dataclass(frozen=True)
class PprVector:
    alpha: float
    scores: np.ndarray
    iterations: int = 0
    residual: float = 0.0


def build_graph(n, edges, features, labels, num_classes=None) -> tuple[Graph, int]:
    """Validate arrays and build a symmetric, deduplicated CSR graph.

    Returns the graph and the number of self-loops that were dropped.
    """
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 2:
        raise GraphFormatError("features must be a 2-D matrix")
    labels = np.asarray(labels, dtype=np.int64)
    if features.shape[0] != n or labels.shape[0] != n:
        raise GraphFormatError(
            f"node count mismatch: n={n}, features={features.shape[0]}, labels={labels.shape[0]}"
        )
    if n and labels.min() < 0:
        raise GraphFormatError("negative label")
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if n else 0
    elif n and labels.max() >= num_classes:
        raise GraphFormatError(f"label {labels.max()} out of range [0, {num_classes})")

    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        raise GraphFormatError(f"edge endpoint out of range for n={n}")
    loops = edges[:, 0] == edges[:, 1]
    n_loops = int(loops.sum())
    edges = edges[~loops]
    both = np.concatenate([edges, edges[:, ::-1]])
    keys = np.unique(both[:, 0] * max(n, 1) + both[:, 1])
    src, dst = keys // max(n, 1), keys % max(n, 1)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    indptr = np.cumsum(indptr)
    g = Graph(indptr=indptr, indices=dst.astype(np.int64), features=features,
              labels=labels, num_classes=int(num_classes))
    return g, n_loops


def _read_edges(path: Path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise GraphFormatError(f"{path}:{lineno}: expected 'u<TAB>v'")
            rows.append((int(parts[0]), int(parts[1])))
    return np.array(rows, dtype=np.int64).reshape(-1, 2)


def _read_features(path: Path) -> np.ndarray:
    rows = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if width is None:
                width = len(parts)
            elif len(parts) != width:
                raise GraphFormatError(f"{path}:{lineno}: ragged row ({len(parts)} values, expected {width})")
            rows.append(parts)
    if not rows:
        return np.zeros((0, 0), dtype=np.float32)
    return np.array(rows, dtype=np.float64).astype(np.float32)


def load_graph(path, num_classes: int | None = None) -> Graph:
    path = Path(path)
    for name in ("edges.tsv", "features.csv", "labels.tsv"):
        if not (path / name).is_file():
            raise FileNotFoundError(f"missing {name} in {path}")
    edges = _read_edges(path / "edges.tsv")
    features = _read_features(path / "features.csv")
    labels = np.loadtxt(path / "labels.tsv", dtype=np.int64, ndmin=1, comments="#")
    g, n_loops = build_graph(features.shape[0], edges, features, labels, num_classes)
    if n_loops:
        logger.warning("dropped %d self-loops while loading %s", n_loops, path)
    return g


def save_graph(g: Graph, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "edges.tsv", "w") as fh:
        for u, v in g.edge_array().tolist():
            fh.write(f"{u}\t{v}\n")
    with open(path / "features.csv", "w") as fh:
        for row in g.features:
            # str() of a float32 scalar is its shortest round-trip decimal
            fh.write(",".join(str(x) for x in row) + "\n")
    with open(path / "labels.tsv", "w") as fh:
        fh.writelines(f"{y}\n" for y in g.labels.tolist())


def add_noisy_edges(g: Graph, num_per_node: int, seed: int) -> Graph:
    """Attach ``num_per_node`` new edges from every node to random non-neighbours."""
    if num_per_node < 0:
        raise ValueError("num_per_node must be >= 0")
    if num_per_node == 0:
        return g
    rng = generator(seed, "noisy-edges", num_per_node)
    n = g.n
    adj = [set(g.neighbors(v).tolist()) for v in range(n)]
    new_edges = []
    shortfall = 0
    for v in range(n):
        available = n - 1 - len(adj[v])
        want = min(num_per_node, available)
        shortfall += num_per_node - want
        if want <= 0:
            continue
        if available <= 4 * want:
            candidates = np.setdiff1d(np.arange(n), np.fromiter(adj[v] | {v}, dtype=np.int64))
            picks = rng.choice(candidates, size=want, replace=False).tolist()
        else:
            picks = []
            while len(picks) < want:
                u = int(rng.integers(n))
                if u != v and u not in adj[v] and u not in picks:
                    picks.append(u)
        for u in picks:
            adj[v].add(u)
            adj[u].add(v)
            new_edges.append((v, u))
    if shortfall:
        logger.warning("add_noisy_edges: %d requested edges could not be placed", shortfall)
    edges = np.concatenate([g.edge_array(), np.array(new_edges, dtype=np.int64).reshape(-1, 2)])
    return g.with_edges(edges)


def normalized_adjacency(g: Graph) -> sp.csr_matrix:
    """Symmetric degree normalisation of ``A + I``."""
    a = g.adjacency() + sp.identity(g.n, format="csr")
    dinv = 1.0 / np.sqrt(np.asarray(a.sum(axis=1)).ravel())
    return sp.csr_matrix(sp.diags(dinv) @ a @ sp.diags(dinv))


def ppr(g: Graph, alpha: float, seeds, tol: float = 1e-12, max_iter: int = 10_000) -> PprVector:
    """Personalised PageRank of a seed set by power iteration.

    Solves ``x = (1 - alpha) * A_hat @ x + alpha * r`` where ``r`` is uniform over
    the seeds, then rescales ``x`` to unit mass.  Iteration stops once the
    geometric error bound ``(1 - alpha) / alpha * |dx|_1`` drops below ``tol``.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must be in (0, 1]")
    seeds = np.unique(np.asarray(seeds, dtype=np.int64))
    if seeds.size == 0:
        raise ValueError("empty seed set")
    restart = np.zeros(g.n)
    restart[seeds] = 1.0 / seeds.size
    a_hat = normalized_adjacency(g)
    x = restart.copy()
    residual = 0.0
    it = 0
    for it in range(1, max_iter + 1):
        x_next = (1.0 - alpha) * (a_hat @ x) + alpha * restart
        residual = float(np.abs(x_next - x).sum())
        x = x_next
        if residual * (1.0 - alpha) <= tol * alpha:
            break
    else:
        raise PprConvergenceError(residual, max_iter)
    return PprVector(alpha=alpha, scores=x / x.sum(), iterations=it, residual=residual)


def _fraction_counts(n: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    n_train = int(round(fractions[0] * n))
    n_valid = int(round(fractions[1] * n))
    n_test = min(int(round(fractions[2] * n)), n - n_train - n_valid)
    return n_train, n_valid, n_test


def uniform_split(n: int, seed: int, fractions=(0.5, 0.1, 0.4)) -> SplitSpec:
    perm = generator(seed, "uniform-split").permutation(n)
    a, b, c = _fraction_counts(n, tuple(fractions))
    return SplitSpec(train=np.sort(perm[:a]), valid=np.sort(perm[a:a + b]),
                     test=np.sort(perm[a + b:a + b + c]), seed=seed, meta={"mode": "iid"})


def biased_split(
    g: Graph,
    alpha: float | str | None,
    train_fraction: float = 0.5,
    seed: int = 0,
    valid_fraction: float = 0.1,
    test_fraction: float = 0.4,
    seeds_per_class: int = 5,
) -> SplitSpec:
    """Distribution-shifted split: per class, PPR-nearest nodes to a few seeds train.

    ``alpha`` of ``None`` or ``"iid"`` falls back to a uniform split.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    fractions = (train_fraction, valid_fraction, test_fraction)
    if alpha is None or alpha == "iid":
        return uniform_split(g.n, seed, fractions)
    alpha = float(alpha)
    rng = generator(seed, "biased-split", alpha)
    train = []
    for c in range(g.num_classes):
        members = np.flatnonzero(g.labels == c)
        if members.size == 0:
            raise ValueError(f"class {c} has no nodes")
        n_seeds = min(seeds_per_class, members.size)
        seeds = rng.choice(members, size=n_seeds, replace=False)
        scores = ppr(g, alpha, seeds).scores
        # random order first so ties fall back to a uniform fill
        order = rng.permutation(members)
        order = order[np.argsort(-scores[order], kind="stable")]
        take = max(n_seeds, int(round(train_fraction * members.size)))
        chosen = np.concatenate([seeds, order[~np.isin(order, seeds)]])[:take]
        train.append(chosen)
    train = np.sort(np.concatenate(train))
    rest = rng.permutation(np.setdiff1d(np.arange(g.n), train))
    n_valid = min(int(round(valid_fraction * g.n)), rest.size)
    n_test = min(int(round(test_fraction * g.n)), rest.size - n_valid)
    return SplitSpec(train=train, valid=np.sort(rest[:n_valid]),
                     test=np.sort(rest[n_valid:n_valid + n_test]), seed=seed,
                     meta={"mode": "ppr", "alpha": alpha, "seeds_per_class": seeds_per_class})


def make_sbm_graph(
    n: int = 1000,
    num_classes: int = 4,
    p_in: float = 0.02,
    p_out: float = 0.002,
    d: int = 16,
    signal: float = 1.0,
    noise: float = 1.0,
    nuisance_modes: int = 0,
    nuisance_scale: float = 0.0,
    seed: int = 0,
) -> Graph:
    """Stochastic block model with Gaussian class-conditional features.

    Optional ``nuisance_modes`` add label-independent mixture structure of size
    ``nuisance_scale`` so that coarse clusterings do not line up with classes.
    """
    rng = generator(seed, "sbm")
    labels = np.sort(np.arange(n) % num_classes)
    # per block pair: binomial edge count, then distinct uniform pairs
    blocks = [np.flatnonzero(labels == c) for c in range(num_classes)]
    src, dst = [], []
    for a in range(num_classes):
        for b in range(a, num_classes):
            na, nb = blocks[a].size, blocks[b].size
            pairs = na * (na - 1) // 2 if a == b else na * nb
            if pairs == 0:
                continue
            count = rng.binomial(pairs, p_in if a == b else p_out)
            flat = rng.choice(pairs, size=count, replace=False) if pairs < 1 << 24 else \
                np.unique(rng.integers(0, pairs, size=count))
            if a == b:
                # unrank the strict upper triangle
                i = (np.floor((np.sqrt(8.0 * flat + 1) + 1) / 2)).astype(np.int64)
                i = np.where(i * (i - 1) // 2 > flat, i - 1, i)
                i = np.where((i + 1) * i // 2 <= flat, i + 1, i)
                j = flat - i * (i - 1) // 2
                src.append(blocks[a][i])
                dst.append(blocks[a][j])
            else:
                src.append(blocks[a][flat // nb])
                dst.append(blocks[b][flat % nb])
    src = np.concatenate(src) if src else np.zeros(0, dtype=np.int64)
    dst = np.concatenate(dst) if dst else np.zeros(0, dtype=np.int64)
    class_means = rng.normal(size=(num_classes, d)) * signal
    features = class_means[labels] + rng.normal(size=(n, d)) * noise
    if nuisance_modes:
        modes = rng.normal(size=(nuisance_modes, d)) * nuisance_scale
        features += modes[rng.integers(nuisance_modes, size=n)]
    g, _ = build_graph(n, np.stack([src, dst], 1), features.astype(np.float32), labels, num_classes)
    return g
