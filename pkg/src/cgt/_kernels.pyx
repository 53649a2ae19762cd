# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: per-node tree sampling and duplicate counting."""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t, int64_t

from .rng import node_stream_state

cnp.import_array()

BACKEND = "cython"


cdef struct Xoshiro:
    uint64_t s0
    uint64_t s1
    uint64_t s2
    uint64_t s3


cdef inline uint64_t rotl(uint64_t x, int k) nogil:
    return (x << k) | (x >> (64 - k))


cdef inline uint64_t xo_next(Xoshiro* st) nogil:
    cdef uint64_t result = rotl(st.s1 * 5, 7) * 9
    cdef uint64_t t = st.s1 << 17
    st.s2 ^= st.s0
    st.s3 ^= st.s1
    st.s1 ^= st.s2
    st.s0 ^= st.s3
    st.s2 ^= t
    st.s3 = rotl(st.s3, 45)
    return result


cdef inline uint64_t xo_below(Xoshiro* st, uint64_t n) nogil:
    cdef uint64_t threshold = (<uint64_t>0 - n) % n
    cdef uint64_t r
    while True:
        r = xo_next(st)
        if r >= threshold:
            return r % n


def tree_size(s, L):
    s, L = int(s), int(L)
    if s == 1:
        return L + 1
    return (s ** (L + 1) - 1) // (s - 1)


def sample_trees(indptr, indices, roots, int s, int L, seed):
    cdef cnp.int64_t[::1] ptr = np.ascontiguousarray(indptr, dtype=np.int64)
    cdef cnp.int64_t[::1] nbr = np.ascontiguousarray(indices, dtype=np.int64)
    cdef cnp.int64_t[::1] rts = np.ascontiguousarray(roots, dtype=np.int64)
    cdef Py_ssize_t T = tree_size(s, L)
    cdef Py_ssize_t n_leaves = 1
    cdef Py_ssize_t q
    for q in range(L):
        n_leaves *= s
    cdef Py_ssize_t n_internal = T - n_leaves
    out_arr = np.full((rts.shape[0], T), -1, dtype=np.int64)
    cdef cnp.int64_t[:, ::1] out = out_arr
    cdef cnp.int64_t[::1] chosen = np.empty(max(s, 1), dtype=np.int64)
    cdef Xoshiro st
    cdef Py_ssize_t r, p, i, j, c, base
    cdef int64_t u, start, deg, k, t, tmp
    cdef bint seen
    for r in range(rts.shape[0]):
        st.s0, st.s1, st.s2, st.s3 = node_stream_state(seed, rts[r])
        out[r, 0] = rts[r]
        for p in range(n_internal):
            u = out[r, p]
            if u < 0:
                continue
            start = ptr[u]
            deg = ptr[u + 1] - start
            k = s if s < deg else deg
            if k == 0:
                continue
            c = 0
            for j in range(deg - k, deg):
                t = <int64_t>xo_below(&st, <uint64_t>(j + 1))
                seen = False
                for i in range(c):
                    if chosen[i] == t:
                        seen = True
                        break
                chosen[c] = j if seen else t
                c += 1
            # insertion sort, k <= s is small
            for i in range(1, c):
                tmp = chosen[i]
                j = i - 1
                while j >= 0 and chosen[j] > tmp:
                    chosen[j + 1] = chosen[j]
                    j -= 1
                chosen[j + 1] = tmp
            base = p * s + 1
            for i in range(c):
                out[r, base + i] = nbr[start + chosen[i]]
    return out_arr


def count_duplicates(keys, int64_t null_key):
    cdef cnp.int64_t[:, ::1] k = np.ascontiguousarray(keys, dtype=np.int64)
    out_arr = np.zeros(k.shape[0], dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    cdef Py_ssize_t i, t, j
    cdef int64_t key, count
    for i in range(k.shape[0]):
        count = 0
        for t in range(1, k.shape[1]):
            key = k[i, t]
            if key == null_key:
                continue
            for j in range(t):
                if k[i, j] == key:
                    count += 1
                    break
        out[i] = count
    return out_arr
