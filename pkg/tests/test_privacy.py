import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cgt.privacy import DpSgdConfig, clip_and_noise, clip_rows, compose, gaussian_epsilon, gaussian_sigma


def test_sigma_reference_value():
    assert gaussian_sigma(1.0, 1e-5, 1.0) == pytest.approx(4.844, abs=1e-3)
    assert gaussian_sigma(math.inf, 0.01, 1.0) == 0.0


@settings(max_examples=50)
@given(eps=st.floats(0.01, 10), delta=st.floats(1e-9, 0.5), sens=st.floats(0.01, 100), c=st.floats(0.1, 10))
def test_sigma_linear_in_sensitivity_and_inverse_in_eps(eps, delta, sens, c):
    base = gaussian_sigma(eps, delta, sens)
    assert gaussian_sigma(eps, delta, c * sens) == pytest.approx(c * base, rel=1e-9)
    assert gaussian_sigma(c * eps, delta, sens) == pytest.approx(base / c, rel=1e-9)
    assert gaussian_epsilon(base, delta, sens) == pytest.approx(eps, rel=1e-9)


@pytest.mark.parametrize("eps,delta,sens", [(0, 0.1, 1), (-1, 0.1, 1), (1, 0, 1), (1, 1, 1), (1, 0.1, -1)])
def test_sigma_rejects_bad_input(eps, delta, sens):
    with pytest.raises(ValueError):
        gaussian_sigma(eps, delta, sens)


def test_sigma_overflow():
    with pytest.raises(OverflowError):
        gaussian_sigma(1e-320, 0.01, 1e10)


def test_clip_rows():
    g = np.array([[3.0, 4.0], [0.3, 0.4], [0.0, 0.0]])
    out = clip_rows(g, 1.0)
    assert np.allclose(out, [[0.6, 0.8], [0.3, 0.4], [0.0, 0.0]])
    assert np.array_equal(clip_rows(g, math.inf), g)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4), min_size=1, max_size=10),
       st.floats(0.01, 10))
def test_clip_bound_holds(rows, c):
    out = clip_rows(np.array(rows), c)
    assert (np.linalg.norm(out, axis=1) <= c * (1 + 1e-9)).all()


def test_no_noise_infinite_clip_is_plain_mean():
    g = np.random.default_rng(0).normal(size=(7, 5))
    cfg = DpSgdConfig(clip_norm=math.inf, noise_multiplier=0.0)
    out = clip_and_noise(g, cfg, np.random.default_rng(1))
    assert np.array_equal(out, g.sum(axis=0) / 7.0)


def test_noise_variance_monte_carlo():
    cfg = DpSgdConfig(clip_norm=2.0, noise_multiplier=1.5)
    rng = np.random.default_rng(3)
    g = np.zeros((4, 2000))
    out = clip_and_noise(g, cfg, rng)
    expected = (1.5 * 2.0 / 4) ** 2
    assert abs(out.var() / expected - 1.0) < 0.05


def test_empty_batch():
    with pytest.raises(ValueError):
        clip_and_noise(np.zeros((0, 3)), DpSgdConfig(), np.random.default_rng(0))


def test_compose_and_report():
    assert compose(10, 0.5, 1e-6) == pytest.approx((5.0, 1e-5))
    cfg = DpSgdConfig(clip_norm=1.0, noise_multiplier=2.0, delta=0.1, steps=100)
    eps, delta = cfg.epsilon()
    assert delta == pytest.approx(0.1)
    assert eps == pytest.approx(100 * gaussian_epsilon(2.0, 0.001))
    assert cfg.report()["mode"] == "dp-sgd"
    assert DpSgdConfig(steps=0).epsilon() == (0.0, 0.0)
    with pytest.raises(ValueError):
        DpSgdConfig(clip_norm=0)
