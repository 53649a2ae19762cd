"""Benchmark-agreement metrics and proxy statistics of encoded trees."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from . import kernels
from .encoding import ComputationGraphSet, EncodedComputationGraph


class _Undefined:
    """Marker for a correlation that is not defined (zero variance or n < 2)."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "undefined"

    def __bool__(self):
        return False


UNDEFINED = _Undefined()


def _rows(cg) -> np.ndarray:
    if isinstance(cg, EncodedComputationGraph):
        return cg.feature_rows
    return np.asarray(cg)


def count_zero_vectors(cg) -> int:
    """Number of all-zero (null) rows of one encoded tree."""
    return int((~_rows(cg).any(axis=1)).sum())


def _row_keys(features: np.ndarray) -> np.ndarray:
    """Integer key per row, equal iff rows are bitwise equal; ``-1`` for null rows."""
    feats = np.ascontiguousarray(features, dtype=np.float32)
    lead = feats.shape[:-1]
    flat = feats.reshape(-1, feats.shape[-1])
    null = ~flat.any(axis=1)
    raw = flat.view(np.dtype((np.void, flat.shape[1] * flat.itemsize))).ravel()
    _, keys = np.unique(raw, return_inverse=True)
    keys = keys.astype(np.int64).ravel()
    keys[null] = -1
    return keys.reshape(lead)


def count_duplicate_vectors(cg) -> int:
    """Non-null rows bitwise equal to an earlier non-null row (extra copies)."""
    rows = _rows(cg)
    return int(kernels.count_duplicates(_row_keys(rows)[None, :], -1)[0])


def zero_counts(cgs: ComputationGraphSet) -> np.ndarray:
    return (~cgs.features.any(axis=2)).sum(axis=1).astype(np.int64)


def duplicate_counts(cgs: ComputationGraphSet) -> np.ndarray:
    return kernels.count_duplicates(_row_keys(cgs.features), -1)


def wasserstein1(p, q) -> float:
    """Exact 1-D Wasserstein-1 distance between two empirical samples.

    Computed as the integral of ``|F_p - F_q|``, which equals the mean absolute
    difference of matched quantiles for any pair of sample sizes.
    """
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    if p.size == 0 or q.size == 0:
        raise ValueError("wasserstein1 needs nonempty samples")
    return float(sps.wasserstein_distance(p, q))


@dataclass
class Correlations:
    mse: float
    pearson: object
    spearman: object

    def as_dict(self) -> dict:
        fmt = lambda v: v if v is not UNDEFINED else "undefined"  # noqa: E731
        return {"mse": self.mse, "pearson": fmt(self.pearson), "spearman": fmt(self.spearman)}


def pearson(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ac, bc = a - a.mean(), b - b.mean()
    sa, sb = math.sqrt((ac * ac).sum()), math.sqrt((bc * bc).sum())
    if sa == 0 or sb == 0:
        return UNDEFINED
    return float(np.clip((ac * bc).sum() / (sa * sb), -1.0, 1.0))


def correlation_suite(a, b) -> Correlations:
    """MSE, Pearson and Spearman (Pearson of average ranks) of paired accuracies."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("inputs must be 1-D and of equal length")
    if a.size < 2:
        raise ValueError("need at least two pairs")
    mse = float(((a - b) ** 2).mean())
    return Correlations(mse, pearson(a, b), pearson(sps.rankdata(a), sps.rankdata(b)))


def write_stats_csv(path, zero: np.ndarray, dup: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["graph_index", "zero_count", "dup_count"])
        for i, (z, d) in enumerate(zip(zero.tolist(), dup.tolist())):
            w.writerow([i, z, d])


def read_stats_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return (np.array([int(r["zero_count"]) for r in rows], dtype=np.int64),
            np.array([int(r["dup_count"]) for r in rows], dtype=np.int64))


def stat_summary(ref: ComputationGraphSet, other: ComputationGraphSet) -> dict:
    zr, dr = zero_counts(ref), duplicate_counts(ref)
    zo, do = zero_counts(other), duplicate_counts(other)
    return {
        "w1_zero": wasserstein1(zr, zo),
        "w1_dup": wasserstein1(dr, do),
        "ref_zero_mean": float(zr.mean()), "other_zero_mean": float(zo.mean()),
        "ref_dup_mean": float(dr.mean()), "other_dup_mean": float(do.mean()),
    }


def write_summary(path, summary: dict) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
