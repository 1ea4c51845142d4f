import math

import numpy as np
import pytest

from credgnss import losses
from credgnss.losses import CovarianceError, LossConfig

ANALYTIC_ES = math.sqrt(math.pi / 2) - 0.5 * math.sqrt(math.pi)


def _random_pd(rng):
    a = rng.normal(size=(2, 2))
    return a @ a.T + 0.3 * np.eye(2)


def _fd_mean_cov(fn, mean, cov, truth, h=1e-6):
    """Central differences wrt mean and (symmetric) covariance entries."""
    gm = np.zeros(2)
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        gm[i] = (fn(mean + e, cov, truth) - fn(mean - e, cov, truth)) / (2 * h)
    gc = np.zeros((2, 2))
    for i, j in ((0, 0), (1, 1), (0, 1)):
        e = np.zeros((2, 2))
        e[i, j] = e[j, i] = h
        d = (fn(mean, cov + e, truth) - fn(mean, cov - e, truth)) / (2 * h)
        if i == j:
            gc[i, i] = d
        else:
            gc[0, 1] = gc[1, 0] = d / 2  # symmetric convention
    return gm, gc


def test_nll_reference_values():
    assert losses.nll([0, 0], np.eye(2), [0, 0])[0][0] == pytest.approx(math.log(2 * math.pi), abs=1e-12)
    assert losses.nll([0, 0], np.eye(2), [1, 0])[0][0] == pytest.approx(0.5 + math.log(2 * math.pi), abs=1e-12)


def test_nll_gradients_match_finite_differences(rng):
    for _ in range(10):
        mean, truth, cov = rng.normal(size=2), rng.normal(size=2), _random_pd(rng)
        v, dm, dc = losses.nll(mean, cov, truth)
        gm, gc = _fd_mean_cov(lambda m, c, t: losses.nll(m, c, t)[0][0], mean, cov, truth)
        assert np.allclose(dm[0], gm, atol=1e-6) and np.allclose(dc[0], gc, atol=1e-6)
        assert np.allclose(dc[0], dc[0].T)


def test_non_pd_covariance_rejected():
    bad = np.array([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(CovarianceError):
        losses.nll([0, 0], bad, [0, 0])
    with pytest.raises(CovarianceError):
        losses.energy_score_mc([0, 0], bad, [0, 0])
    with pytest.raises(ValueError):
        LossConfig(mc_samples=1)
    with pytest.raises(ValueError):
        LossConfig(alpha=0.0, beta=0.0)


def test_es_point_mass_limit():
    v = losses.energy_score_mc([3.0, 0.0], 1e-12 * np.eye(2), [0.0, 0.0], k=2048)[0][0]
    assert v == pytest.approx(3.0, abs=1e-4)


def test_analytic_constants_by_independent_sampling():
    rng = np.random.default_rng(99)
    y = rng.standard_normal((10**6, 2))
    y2 = rng.standard_normal((10**6, 2))
    assert np.linalg.norm(y, axis=1).mean() == pytest.approx(math.sqrt(math.pi / 2), abs=5e-3)
    assert np.linalg.norm(y - y2, axis=1).mean() == pytest.approx(math.sqrt(math.pi), abs=5e-3)
    assert losses.ES_ANALYTIC_STD_NORMAL_2D == pytest.approx(ANALYTIC_ES, abs=1e-15)
    # sqrt(pi/2) = 1.2533141, sqrt(pi)/2 = 0.8862269
    assert ANALYTIC_ES == pytest.approx(0.3670872, abs=1e-7)


def test_es_standard_normal_k2048():
    v = losses.energy_score_mc([0, 0], np.eye(2), [0, 0], k=2048, seed=0)[0][0]
    assert abs(v - ANALYTIC_ES) < 0.05


def test_es_unbiased_over_seeds():
    vals = [losses.energy_score_mc([0, 0], np.eye(2), [0, 0], k=2048, seed=s)[0][0] for s in range(100)]
    assert abs(np.mean(vals) - ANALYTIC_ES) < 1e-2


def test_es_gradients_same_seed_finite_differences(rng):
    for s in range(5):
        mean, truth, cov = rng.normal(size=2), rng.normal(size=2) * 2, _random_pd(rng)
        v, dm, dc = losses.energy_score_mc(mean, cov, truth, k=512, seed=s)
        gm, gc = _fd_mean_cov(lambda m, c, t: losses.energy_score_mc(m, c, t, k=512, seed=s)[0][0],
                              mean, cov, truth, h=1e-6)
        scale = max(np.abs(gm).max(), np.abs(gc).max())
        assert np.max(np.abs(dm[0] - gm)) <= 1e-4 * scale
        assert np.max(np.abs(dc[0] - gc)) <= 1e-4 * scale


def test_combined_is_linear(rng):
    mean, truth, cov = rng.normal(size=2), rng.normal(size=2), _random_pd(rng)
    n = losses.nll(mean, cov, truth)
    e = losses.energy_score_mc(mean, cov, truth, k=256, seed=4)
    c10 = losses.combined(mean, cov, truth, LossConfig(1.0, 0.0, 256), seed=4)
    c01 = losses.combined(mean, cov, truth, LossConfig(0.0, 1.0, 256), seed=4)
    c55 = losses.combined(mean, cov, truth, LossConfig(0.5, 0.5, 256), seed=4)
    for a, b in zip(c10, n):
        assert np.array_equal(a, b)
    for a, b in zip(c01, e):
        assert np.array_equal(a, b)
    for a, x, y in zip(c55, n, e):
        assert np.allclose(a, 0.5 * (x + y), atol=1e-12)


def test_eval_variants_share_kernels(rng):
    mean, truth, cov = rng.normal(size=(4, 2)), rng.normal(size=(4, 2)), np.stack([_random_pd(rng) for _ in range(4)])
    assert np.array_equal(losses.nll_eval(mean, cov, truth), losses.nll(mean, cov, truth)[0])
    assert np.array_equal(losses.es_eval(mean, cov, truth, seed=3),
                          losses.energy_score_mc(mean, cov, truth, k=8192, seed=3)[0])
    v = losses.es_eval([0, 0], np.eye(2), [0, 0], k=8192, seed=0)[0]
    assert abs(v - ANALYTIC_ES) < 0.02


def test_mae():
    d, g = losses.mae([[3.0, 4.0], [1.0, 1.0]], [[0.0, 0.0], [1.0, 1.0]])
    assert np.allclose(d, [5.0, 0.0]) and np.allclose(g, [[0.6, 0.8], [0.0, 0.0]])
