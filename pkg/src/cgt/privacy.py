"""Gaussian-mechanism calibration, DP-SGD aggregation and basic composition."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def gaussian_sigma(eps: float, delta: float, sensitivity: float) -> float:
    """Noise scale of the classical Gaussian mechanism.

    ``sigma = sensitivity * sqrt(2 ln(1.25 / delta)) / eps``.  The bound is only
    proven for ``eps <= 1``; larger budgets use the same formula as a heuristic.
    ``eps = inf`` gives zero noise.
    """
    if sensitivity < 0:
        raise ValueError("sensitivity must be non-negative")
    if not eps > 0:
        raise ValueError("eps must be positive")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if sensitivity == 0 or math.isinf(eps):
        return 0.0
    sigma = sensitivity * math.sqrt(2.0 * math.log(1.25 / delta)) / eps
    if not math.isfinite(sigma):
        raise OverflowError("noise scale overflows")
    return sigma


def gaussian_epsilon(sigma: float, delta: float, sensitivity: float = 1.0) -> float:
    """Inverse of :func:`gaussian_sigma` for a fixed noise scale."""
    if sigma <= 0:
        return math.inf
    return sensitivity * math.sqrt(2.0 * math.log(1.25 / delta)) / sigma


def compose(steps: int, eps_step: float, delta_step: float) -> tuple[float, float]:
    """Basic sequential composition; a loose upper bound on the total budget."""
    if steps < 0:
        raise ValueError("steps must be non-negative")
    return steps * eps_step, steps * delta_step


@dataclass(frozen=True)
class DpSgdConfig:
    clip_norm: float = 1.0
    noise_multiplier: float = 1.0
    delta: float = 0.1
    steps: int = 0
    batch_fraction: float = 1.0

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be non-negative")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if not 0.0 < self.batch_fraction <= 1.0:
            raise ValueError("batch_fraction must lie in (0, 1]")

    def epsilon(self) -> tuple[float, float]:
        """(eps, delta) spent over ``steps`` under basic composition."""
        if self.steps == 0:
            return 0.0, 0.0
        delta_step = self.delta / self.steps
        eps_step = gaussian_epsilon(self.noise_multiplier, delta_step)
        return compose(self.steps, eps_step, delta_step)

    def report(self) -> dict:
        eps, delta = self.epsilon()
        return {
            "mode": "dp-sgd",
            "eps": eps,
            "delta": delta,
            "sigma": self.noise_multiplier,
            "clip": self.clip_norm,
            "accounting": "basic composition (loose upper bound)",
        }


def clip_rows(grads: np.ndarray, clip_norm: float) -> np.ndarray:
    """Rescale each row to L2 norm at most ``clip_norm``."""
    grads = np.asarray(grads)
    norms = np.sqrt(np.einsum("ij,ij->i", grads, grads))
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.minimum(1.0, clip_norm / norms)
    factor = np.where(norms > 0, factor, 1.0).astype(grads.dtype)
    return grads * factor[:, None]


def clip_and_noise(per_example_gradients, cfg: DpSgdConfig, rng: np.random.Generator) -> np.ndarray:
    """Clip each flattened example gradient, sum, add Gaussian noise, average.

    With ``noise_multiplier == 0`` and ``clip_norm == inf`` the result is the
    plain mean with a fixed (row-by-row) summation order.
    """
    grads = np.asarray(per_example_gradients)
    batch = grads.shape[0]
    if batch == 0:
        raise ValueError("empty gradient batch")
    total = clip_rows(grads, cfg.clip_norm).sum(axis=0)
    std = cfg.noise_multiplier * cfg.clip_norm if cfg.noise_multiplier > 0 else 0.0
    if std > 0:
        total = total + rng.normal(0.0, std, size=total.shape).astype(total.dtype)
    return total / grads.dtype.type(batch)
