"""Proper scoring rules on the East-North Gaussian predictive, with gradients.

Every function here is batched over a leading axis of predictives:
``mean (B, 2)``, ``cov (B, 2, 2)``, ``truth (B, 2)``. Returned values are per
predictive; gradients wrt the covariance use the symmetric convention
(``dL = sum(G * dSigma)`` for symmetric ``dSigma``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

JITTER = 1e-9
LOG_2PI = np.log(2.0 * np.pi)
ES_ANALYTIC_STD_NORMAL_2D = np.sqrt(np.pi / 2.0) - 0.5 * np.sqrt(np.pi)


class CovarianceError(ValueError):
    """Covariance is not positive definite even after jitter."""


@dataclass
class EnPredictive:
    mean: np.ndarray
    covariance: np.ndarray
    ground_truth: np.ndarray


@dataclass
class LossConfig:
    alpha: float = 0.5
    beta: float = 0.5
    mc_samples: int = 2048
    rng_seed: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError("alpha, beta must be non-negative with positive sum")
        if self.mc_samples < 2:
            raise ValueError("mc_samples must be at least 2")


def _batch(mean, cov, truth):
    mean = np.atleast_2d(np.asarray(mean, dtype=float))
    truth = np.atleast_2d(np.asarray(truth, dtype=float))
    cov = np.asarray(cov, dtype=float)
    if cov.ndim == 2:
        cov = cov[None]
    return mean, cov, truth


def cholesky_2x2(cov):
    """Lower Cholesky factor of jittered 2x2 matrices as (l11, l21, l22)."""
    a = cov[:, 0, 0] + JITTER
    b = 0.5 * (cov[:, 0, 1] + cov[:, 1, 0])
    c = cov[:, 1, 1] + JITTER
    with np.errstate(invalid="ignore"):
        l11 = np.sqrt(a)
        l21 = b / l11
        l22 = np.sqrt(c - l21 * l21)
    if not (np.all(a > 0) and np.all(np.isfinite(l22)) and np.all(l22 > 0)):
        raise CovarianceError("EN covariance not positive definite")
    return l11, l21, l22


def nll(mean, cov, truth):
    """Gaussian negative log-likelihood of ``truth``.

    Returns ``(value, d_mean, d_cov)``.
    """
    mean, cov, truth = _batch(mean, cov, truth)
    cholesky_2x2(cov)
    a, b, c = cov[:, 0, 0], 0.5 * (cov[:, 0, 1] + cov[:, 1, 0]), cov[:, 1, 1]
    det = a * c - b * b
    inv = np.stack([np.stack([c, -b], -1), np.stack([-b, a], -1)], -2) / det[:, None, None]
    e = truth - mean
    ie = np.einsum("bij,bj->bi", inv, e)
    value = 0.5 * (np.log(det) + np.sum(e * ie, axis=1) + 2.0 * LOG_2PI)
    d_mean = -ie
    d_cov = 0.5 * (inv - ie[:, :, None] * ie[:, None, :])
    return value, d_mean, d_cov


def standard_normals(seed, n_pred: int, k: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((n_pred, k, 2))


def energy_score_mc(mean, cov, truth, k: int = 2048, seed=0, eps=None):
    """Monte-Carlo energy score with reparameterized samples ``y = mean + L eps``.

    The dispersion term pairs samples ``(0,1), (2,3), ...``, which keeps the
    estimator unbiased at O(K) cost. Pass ``eps`` (B, K, 2) to fix the draws
    explicitly; otherwise they come from ``seed``.

    Returns ``(value, d_mean, d_cov)``.
    """
    mean, cov, truth = _batch(mean, cov, truth)
    n = mean.shape[0]
    if eps is None:
        if k < 2:
            raise ValueError("need at least 2 samples")
        eps = standard_normals(seed, n, k - (k % 2))
    eps = np.asarray(eps, dtype=float)
    k = eps.shape[1] - (eps.shape[1] % 2)
    eps = eps[:, :k]
    l11, l21, l22 = cholesky_2x2(cov)

    # samples relative to truth
    off = mean - truth
    y0 = off[:, None, 0] + l11[:, None] * eps[..., 0]
    y1 = off[:, None, 1] + l21[:, None] * eps[..., 0] + l22[:, None] * eps[..., 1]
    dist = np.hypot(y0, y1)
    safe = np.where(dist > 0, dist, 1.0)
    u0, u1 = np.where(dist > 0, y0 / safe, 0.0), np.where(dist > 0, y1 / safe, 0.0)

    de = eps[:, 0::2] - eps[:, 1::2]
    p0 = l11[:, None] * de[..., 0]
    p1 = l21[:, None] * de[..., 0] + l22[:, None] * de[..., 1]
    pdist = np.hypot(p0, p1)
    psafe = np.where(pdist > 0, pdist, 1.0)
    v0, v1 = np.where(pdist > 0, p0 / psafe, 0.0), np.where(pdist > 0, p1 / psafe, 0.0)

    # 0.5 * mean over k/2 pairs == sum over pairs / k
    value = dist.mean(axis=1) - pdist.sum(axis=1) / k

    d_mean = np.stack([u0.mean(axis=1), u1.mean(axis=1)], -1)
    g11 = (u0 * eps[..., 0]).mean(1) - (v0 * de[..., 0]).sum(1) / k
    g21 = (u1 * eps[..., 0]).mean(1) - (v1 * de[..., 0]).sum(1) / k
    g22 = (u1 * eps[..., 1]).mean(1) - (v1 * de[..., 1]).sum(1) / k
    d_cov = _cholesky_2x2_backward(l11, l21, l22, g11, g21, g22)
    return value, d_mean, d_cov


def _cholesky_2x2_backward(l11, l21, l22, g11, g21, g22):
    """Map gradients wrt (l11, l21, l22) to symmetric-convention gradients wrt Sigma.

    With ``a, b, c`` the (0,0), off-diagonal and (1,1) entries:
    l11 = sqrt(a), l21 = b / l11, l22 = sqrt(c - b^2 / a).
    """
    da = g11 / (2.0 * l11) - g21 * l21 / (2.0 * l11 * l11) + g22 * (l21 * l21) / (2.0 * l22 * l11 * l11)
    db = g21 / l11 - g22 * l21 / (l22 * l11)
    dc = g22 / (2.0 * l22)
    out = np.empty(l11.shape + (2, 2))
    out[:, 0, 0] = da
    out[:, 1, 1] = dc
    out[:, 0, 1] = out[:, 1, 0] = 0.5 * db
    return out


def combined(mean, cov, truth, cfg: LossConfig, seed=None, eps=None):
    """``alpha * NLL + beta * ES`` with matching gradients."""
    v1, m1, c1 = nll(mean, cov, truth)
    v2, m2, c2 = energy_score_mc(mean, cov, truth, k=cfg.mc_samples,
                                 seed=cfg.rng_seed if seed is None else seed, eps=eps)
    a, b = cfg.alpha, cfg.beta
    return a * v1 + b * v2, a * m1 + b * m2, a * c1 + b * c2


def mae(mean, truth):
    """EN Euclidean error and its gradient wrt the mean (position-only objective)."""
    mean = np.atleast_2d(np.asarray(mean, dtype=float))
    e = mean - np.atleast_2d(np.asarray(truth, dtype=float))
    dist = np.linalg.norm(e, axis=1)
    grad = np.where(dist[:, None] > 0, e / np.where(dist > 0, dist, 1.0)[:, None], 0.0)
    return dist, grad


def nll_eval(mean, cov, truth) -> np.ndarray:
    return nll(mean, cov, truth)[0]


def es_eval(mean, cov, truth, k: int = 8192, seed=0) -> np.ndarray:
    return energy_score_mc(mean, cov, truth, k=k, seed=seed)[0]
