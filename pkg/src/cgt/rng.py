"""Seed derivation and the portable 64-bit generators used across the pipeline.

Seeds are split hierarchically: ``derive_seed(master, "train", epoch)`` folds
each label into a SplitMix64 chain, so any stage can be re-run in isolation and
draw exactly the same stream.  Per-node sampling uses xoshiro256** streams keyed
by ``(seed, node)`` (see :func:`node_stream_state`); everything else draws from
numpy's PCG64 seeded with a derived 64-bit value.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15

GENERATOR_NAMES = {
    "sampler": "xoshiro256**",
    "general": "numpy.PCG64",
    "split": "splitmix64-chain",
}


def mix64(z: int) -> int:
    """SplitMix64 output finalizer."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a SplitMix64 state; returns ``(new_state, output)``."""
    state = (state + GOLDEN) & MASK64
    return state, mix64(state)


def _label_hash(label: object) -> int:
    # FNV-1a over the label's UTF-8 text; ints and strings hash by repr.
    h = 0xCBF29CE484222325
    for byte in str(label).encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h


def derive_seed(master: int, *labels: object) -> int:
    """Derive a child seed from ``master`` and a path of labels."""
    h = mix64(int(master) & MASK64)
    for label in labels:
        h = mix64(h ^ _label_hash(label))
    return h


def generator(master: int, *labels: object) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master, *labels)))


def node_stream_key(seed: int, node: int) -> int:
    return mix64((int(seed) & MASK64) ^ mix64((int(node) + GOLDEN) & MASK64))


def node_stream_state(seed: int, node: int) -> tuple[int, int, int, int]:
    """Initial xoshiro256** state for the sampling stream of ``node``."""
    state = node_stream_key(seed, node)
    words = []
    for _ in range(4):
        state, out = splitmix64(state)
        words.append(out)
    return tuple(words)  # type: ignore[return-value]
