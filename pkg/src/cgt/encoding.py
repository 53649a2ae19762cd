"""Duplicate encoding of sampled computation graphs into fixed s-ary trees.

Every computation graph of depth ``L`` and fan-out ``s`` is laid out in
breadth-first order over the same balanced tree, so the adjacency is a constant
and only the ``T x d`` feature matrix varies.  Positions are 0-indexed here:
``parent(t) = (t - 1) // s`` and the children of ``t`` are ``t*s + 1 .. t*s + s``.
Missing neighbours become null rows (all zeros) and every null row has only
null descendants.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import kernels
from .graph import Graph

CGS_MAGIC = b"CGCG"
CGS_VERSION = 1


@dataclass(frozen=True)
class TreeShape:
    s: int
    L: int

    def __post_init__(self):
        if self.s < 1 or self.L < 1:
            raise ValueError("TreeShape needs s >= 1 and L >= 1")

    @property
    def T(self) -> int:
        return kernels.tree_size(self.s, self.L)

    @property
    def num_leaves(self) -> int:
        return self.s**self.L

    @property
    def num_internal(self) -> int:
        return self.T - self.num_leaves

    def layer_start(self, layer: int) -> int:
        return kernels.tree_size(self.s, layer - 1) if layer > 0 else 0

    def parent(self, t: int) -> int:
        if t <= 0:
            raise ValueError("the root has no parent")
        return (t - 1) // self.s

    def children(self, t: int) -> range:
        return range(t * self.s + 1, t * self.s + self.s + 1)

    @cached_property
    def layers(self) -> np.ndarray:
        out = np.empty(self.T, dtype=np.int64)
        for layer in range(self.L + 1):
            out[self.layer_start(layer):self.layer_start(layer) + self.s**layer] = layer
        return out

    def ancestors(self, t: int) -> list[int]:
        """Parent, grandparent, ..., root."""
        chain = []
        while t > 0:
            t = (t - 1) // self.s
            chain.append(t)
        return chain

    @cached_property
    def ancestor_matrix(self) -> np.ndarray:
        """``A[t, u]`` is True iff ``u`` is a strict ancestor of ``t``."""
        a = np.zeros((self.T, self.T), dtype=bool)
        for t in range(1, self.T):
            a[t, self.ancestors(t)] = True
        return a

    @cached_property
    def path_table(self) -> np.ndarray:
        """``(s**L, L + 1)`` positions of each root-to-leaf path."""
        leaf0 = self.layer_start(self.L)
        rows = []
        for j in range(self.num_leaves):
            chain = [leaf0 + j] + self.ancestors(leaf0 + j)
            rows.append(chain[::-1])
        return np.array(rows, dtype=np.int64)

    @cached_property
    def path_first_visit(self) -> np.ndarray:
        """``(s**L, L + 1)`` mask scoring each tree position on exactly one path."""
        seen = np.zeros(self.T, dtype=bool)
        mask = np.zeros(self.path_table.shape, dtype=bool)
        for j, row in enumerate(self.path_table):
            for k, t in enumerate(row):
                if not seen[t]:
                    seen[t] = True
                    mask[j, k] = True
        return mask


def tree_adjacency(shape: TreeShape) -> np.ndarray:
    """Constant ``(T - 1, 2)`` parent/child edge list of the BFS-ordered tree."""
    child = np.arange(1, shape.T, dtype=np.int64)
    return np.stack([(child - 1) // shape.s, child], axis=1)


@dataclass(frozen=True, eq=False)
class EncodedComputationGraph:
    shape: TreeShape
    feature_rows: np.ndarray
    root_label: int
    source_node: int | None = None

    @property
    def null_mask(self) -> np.ndarray:
        return ~self.feature_rows.any(axis=1)


@dataclass(frozen=True)
class PathSequence:
    positions: tuple[int, ...]
    tokens: tuple
    root_label: int


class ComputationGraphSet(Sequence[EncodedComputationGraph]):
    """A batch of encoded computation graphs sharing one :class:`TreeShape`.

    ``features`` has shape ``(N, T, d)``; ``sources`` holds the root node id or
    ``-1`` for generated graphs; ``ids`` optionally keeps the sampled node id of
    every position (``-1`` for nulls).
    """

    def __init__(self, shape: TreeShape, features, labels, sources=None, ids=None):
        self.shape = shape
        self.features = np.asarray(features, dtype=np.float32)
        self.labels = np.asarray(labels, dtype=np.int64)
        n = len(self.labels)
        if self.features.shape[:2] != (n, shape.T):
            raise ValueError(f"features shape {self.features.shape} does not match {n} x T={shape.T}")
        self.sources = np.full(n, -1, dtype=np.int64) if sources is None else np.asarray(sources, np.int64)
        self.ids = None if ids is None else np.asarray(ids, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i):
        if isinstance(i, (slice, np.ndarray, list)):
            return self.subset(np.arange(len(self))[i])
        src = int(self.sources[i])
        return EncodedComputationGraph(self.shape, self.features[i], int(self.labels[i]),
                                       None if src < 0 else src)

    def __iter__(self) -> Iterator[EncodedComputationGraph]:
        for i in range(len(self)):
            yield self[i]

    @property
    def d(self) -> int:
        return self.features.shape[2]

    @property
    def null_mask(self) -> np.ndarray:
        if self.ids is not None:
            return self.ids < 0
        return ~self.features.any(axis=2)

    def subset(self, index) -> "ComputationGraphSet":
        index = np.asarray(index, dtype=np.int64)
        return ComputationGraphSet(self.shape, self.features[index], self.labels[index],
                                   self.sources[index], None if self.ids is None else self.ids[index])

    @classmethod
    def from_graphs(cls, graphs: Sequence[EncodedComputationGraph]) -> "ComputationGraphSet":
        graphs = list(graphs)
        shape = graphs[0].shape
        return cls(shape, np.stack([c.feature_rows for c in graphs]), [c.root_label for c in graphs],
                   [-1 if c.source_node is None else c.source_node for c in graphs])


def sample_node_ids(g: Graph, nodes, s: int, L: int, seed: int) -> np.ndarray:
    """Sampled node id per tree position (``-1`` = null) for each root in ``nodes``."""
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size and (nodes.min() < 0 or nodes.max() >= g.n):
        raise ValueError("root node out of range")
    return kernels.sample_trees(g.indptr, g.indices, nodes, s, L, seed)


def sample_computation_graphs(g: Graph, nodes, s: int, L: int, seed: int) -> ComputationGraphSet:
    shape = TreeShape(s, L)
    nodes = np.arange(g.n) if nodes is None else np.asarray(nodes, dtype=np.int64)
    ids = sample_node_ids(g, nodes, s, L, seed)
    padded = np.concatenate([g.features, np.zeros((1, g.d), dtype=np.float32)])
    features = padded[np.where(ids < 0, g.n, ids)]
    return ComputationGraphSet(shape, features, g.labels[nodes], nodes, ids)


def sample_computation_graph(g: Graph, v: int, s: int, L: int, seed: int) -> EncodedComputationGraph:
    return sample_computation_graphs(g, [v], s, L, seed)[0]


def flatten_bfs(cg: EncodedComputationGraph) -> tuple[np.ndarray, np.ndarray]:
    """Rows in BFS order together with the tree layer of each row."""
    return cg.feature_rows, cg.shape.layers


def unflatten_bfs(rows, shape: TreeShape, root_label: int, source_node=None) -> EncodedComputationGraph:
    rows = np.asarray(rows, dtype=np.float32)
    if rows.shape[0] != shape.T:
        raise ValueError("row count does not match the tree shape")
    return EncodedComputationGraph(shape, rows, root_label, source_node)


def split_paths(item, shape: TreeShape | None = None, root_label: int | None = None) -> list[PathSequence]:
    """Split a tree (encoded graph or token sequence) into its root-to-leaf paths."""
    if isinstance(item, EncodedComputationGraph):
        shape, values, label = item.shape, item.feature_rows, item.root_label
    else:
        if shape is None:
            raise ValueError("shape is required for raw sequences")
        values, label = list(item), root_label
    out = []
    for row in shape.path_table:
        toks = tuple(values[t] for t in row)
        out.append(PathSequence(tuple(int(t) for t in row), toks, -1 if label is None else int(label)))
    return out


def write_cgs(path, cgs: ComputationGraphSet) -> None:
    s, L = cgs.shape.s, cgs.shape.L
    with open(path, "wb") as fh:
        fh.write(CGS_MAGIC)
        fh.write(struct.pack("<IIIIQ", CGS_VERSION, s, L, cgs.d, len(cgs)))
        rows = cgs.features.astype("<f4", copy=False)
        for i in range(len(cgs)):
            fh.write(struct.pack("<Iq", int(cgs.labels[i]), int(cgs.sources[i])))
            fh.write(rows[i].tobytes())


def read_cgs(path) -> ComputationGraphSet:
    data = Path(path).read_bytes()
    if data[:4] != CGS_MAGIC:
        raise ValueError(f"{path}: not a computation-graph file")
    version, s, L, d, count = struct.unpack_from("<IIIIQ", data, 4)
    if version != CGS_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    shape = TreeShape(s, L)
    rec = np.dtype([("label", "<u4"), ("source", "<i8"), ("rows", "<f4", (shape.T, d))])
    body = np.frombuffer(data, dtype=rec, count=count, offset=4 + 24)
    return ComputationGraphSet(shape, body["rows"].astype(np.float32), body["label"].astype(np.int64),
                               body["source"].astype(np.int64))
