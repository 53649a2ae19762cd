"""Pure-Python reference implementations of the hot kernels.

These must stay bit-for-bit equivalent to ``_kernels.pyx``; the test-suite runs
both backends against each other.
"""

from __future__ import annotations

import numpy as np

from .rng import MASK64, node_stream_state

BACKEND = "python"


class Xoshiro256:
    """xoshiro256** over Python ints."""

    __slots__ = ("s0", "s1", "s2", "s3")

    def __init__(self, state):
        self.s0, self.s1, self.s2, self.s3 = state

    def next(self) -> int:
        s0, s1, s2, s3 = self.s0, self.s1, self.s2, self.s3
        x = (s1 * 5) & MASK64
        result = ((((x << 7) | (x >> 57)) & MASK64) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & MASK64
        self.s0, self.s1, self.s2, self.s3 = s0, s1, s2, s3
        return result

    def below(self, n: int) -> int:
        """Unbiased integer in ``[0, n)`` by rejection."""
        threshold = ((1 << 64) - n) % n
        while True:
            r = self.next()
            if r >= threshold:
                return r % n


def sample_trees(indptr, indices, roots, s: int, L: int, seed: int) -> np.ndarray:
    indptr = np.asarray(indptr, dtype=np.int64)
    indices = np.asarray(indices, dtype=np.int64)
    roots = np.asarray(roots, dtype=np.int64)
    T = tree_size(s, L)
    n_internal = T - s**L
    out = np.full((len(roots), T), -1, dtype=np.int64)
    ptr = indptr.tolist()
    nbr = indices.tolist()
    for r, v in enumerate(roots.tolist()):
        rng = Xoshiro256(node_stream_state(seed, v))
        row = [-1] * T
        row[0] = v
        for p in range(n_internal):
            u = row[p]
            if u < 0:
                continue
            start = ptr[u]
            deg = ptr[u + 1] - start
            k = min(s, deg)
            if k == 0:
                continue
            # Floyd's sampling of k distinct offsets out of deg
            chosen: list[int] = []
            for j in range(deg - k, deg):
                t = rng.below(j + 1)
                chosen.append(j if t in chosen else t)
            chosen.sort()
            base = p * s + 1
            for i, off in enumerate(chosen):
                row[base + i] = nbr[start + off]
        out[r] = row
    return out


def count_duplicates(keys, null_key: int) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    out = np.zeros(keys.shape[0], dtype=np.int64)
    for i, row in enumerate(keys):
        live = row[row != null_key]
        out[i] = live.size - np.unique(live).size
    return out


def tree_size(s: int, L: int) -> int:
    if s == 1:
        return L + 1
    return (s ** (L + 1) - 1) // (s - 1)
