import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from credgnss import sim
from credgnss.observation import pack_epochs
from credgnss.weighting import (SchemeKind, WeightScheme, WeightingError, gogps_snr_factor, scheme_variance,
                                solve_wls, solve_wls_arrays)

SCHEMES = [WeightScheme.named(k.value) for k in SchemeKind]


@pytest.fixture(scope="module")
def clean_run():
    cfg = dataclasses.replace(sim.presets()["medium"], n_epochs=20, seed=5, sigma0=1e-12, sectors=[],
                              background_nlos_probability=0.0)
    return sim.generate(cfg)


def test_elevation_zenith():
    s = WeightScheme.named("elevation", a=2.0)
    assert scheme_variance(s, math.pi / 2, 40.0) == pytest.approx(4.0)


def test_sigma_eps_limit():
    s = WeightScheme.named("sigma_eps")
    assert scheme_variance(s, 0.5, 300.0) == pytest.approx(0.5, rel=1e-12)
    assert scheme_variance(s, 0.5, 30.0) == pytest.approx(0.5 + 1e4 * 1e-3)


def test_gogps_hand_value():
    # s = 35, s1 = 50, a = 20: 10^(15/20) = 5.62341325; A / 10^(40/20) = 0.3;
    # slope (0.3 - 1) / (10 - 50) = 0.0175; 1 + 0.0175 * (35 - 50) = 0.7375
    # q = 5.62341325 * 0.7375 = 4.14726727; sigma^2 = q / sin^2(30 deg) = 16.5890691
    s = WeightScheme.named("gogps")
    assert gogps_snr_factor(35.0) == pytest.approx(4.14726727, abs=1e-7)
    assert scheme_variance(s, math.radians(30.0), 35.0) == pytest.approx(16.5890691, abs=1e-6)


def test_gogps_endpoints():
    assert gogps_snr_factor(50.0) == pytest.approx(1.0)
    assert gogps_snr_factor(60.0) == pytest.approx(1.0)
    assert gogps_snr_factor(10.0) == pytest.approx(30.0)


@pytest.mark.parametrize("scheme", SCHEMES, ids=lambda s: s.kind.value)
def test_monotonicity_on_grid(scheme):
    el = np.radians(np.linspace(1.0, 90.0, 90))
    cn0 = np.linspace(0.0, 70.0, 71)
    E, C = np.meshgrid(el, cn0, indexing="ij")
    v = scheme_variance(scheme, E, C)
    assert np.all(v > 0)
    assert np.all(np.diff(v, axis=0) <= 1e-12 * v[:-1])
    if scheme.kind is not SchemeKind.ELEVATION:
        assert np.all(np.diff(v, axis=1) <= 1e-12 * v[:, :-1])


def test_invalid_inputs():
    s = WeightScheme.named("elevation")
    with pytest.raises(WeightingError):
        scheme_variance(s, 0.0, 40.0)
    with pytest.raises(WeightingError):
        WeightScheme.named("sigma_eps", a=-1.0)
    with pytest.raises(WeightingError):
        WeightScheme.named("gogps", bogus=1.0)


@pytest.mark.parametrize("scheme", SCHEMES, ids=lambda s: s.kind.value)
def test_zero_noise_recovery(clean_run, scheme):
    for ep in clean_run.epochs[:5]:
        sol = solve_wls(ep, scheme, clean_run.origin)
        assert sol.converged
        assert np.linalg.norm(sol.state.position.as_array() - ep.truth_position.as_array()) < 1e-3
        assert len(sol.residuals) == len(ep.observations)
        assert sol.iterations <= 10


def _epoch_arrays(run, k):
    p = pack_epochs([run.epochs[k]], run.origin)
    m = p.mask[0]
    return p.sat_enu[0, m], p.pseudorange[0, m], p.correction[0, m], p.constellation[0, m], p.cn0[0, m]


def _dense_oracle(sat, pr, corr, const, var, x0, iters):
    # plain Gauss-Newton on the dense normal equations, all four clocks with present slots only
    slots = sorted(set(const.tolist()))
    x = np.array(x0, dtype=float)
    cols = [0, 1, 2] + [3 + s for s in slots]
    for _ in range(iters):
        d = x[:3] - sat
        rho = np.sqrt(np.sum(d * d, axis=1))
        A = np.zeros((len(pr), len(cols)))
        A[:, :3] = d / rho[:, None]
        for j, s in enumerate(slots):
            A[:, 3 + j] = (const == s)
        r = pr - rho - A[:, 3:] @ x[[3 + s for s in slots]] - corr
        W = np.diag(1.0 / var)
        x[cols] += np.linalg.inv(A.T @ W @ A) @ (A.T @ W @ r)
    return x


def test_linear_step_is_closed_form(clean_run):
    sat, pr, corr, const, cn0 = _epoch_arrays(clean_run, 0)
    s = WeightScheme.named("elevation")
    x0 = np.zeros(7)
    x, *_rest = solve_wls_arrays(sat, pr, corr, const, cn0, s, init=x0, max_iter=1)
    var = _rest[1]
    assert np.allclose(x, _dense_oracle(sat, pr, corr, const, var, x0, 1), atol=1e-8)


def test_contaminated_epoch_matches_dense_oracle(harsh_sim):
    ep = next(e for e in harsh_sim.epochs if sum(o.truth_contamination > 0 for o in e.observations) >= 1)
    p = pack_epochs([ep], harsh_sim.origin)
    m = p.mask[0]
    idx = np.flatnonzero(m)[:6]
    # keep 6 satellites, making sure the clock slots stay estimable (>= 1 per kept slot)
    sat, pr, corr, const, cn0 = (p.sat_enu[0, idx], p.pseudorange[0, idx], p.correction[0, idx],
                                 p.constellation[0, idx], p.cn0[0, idx])
    s = WeightScheme.named("sigma_eps")  # elevation-free weights: fixed across iterations
    x, r, var, conv, it, el, az = solve_wls_arrays(sat, pr, corr, const, cn0, s, max_iter=10)
    oracle = _dense_oracle(sat, pr, corr, const, var, np.zeros(7), it)
    assert np.max(np.abs(x[:3] - oracle[:3])) < 1e-8


@settings(max_examples=20, deadline=None)
@given(st.floats(min_value=1e-3, max_value=1e3))
def test_weight_scale_invariance(scale):
    cfg = dataclasses.replace(sim.presets()["harsh"], n_epochs=1, seed=2)
    run = sim.generate(cfg)
    sat, pr, corr, const, cn0 = _epoch_arrays(run, 0)
    base = WeightScheme.named("sigma_eps")
    scaled = WeightScheme.named("sigma_eps", a=0.5 * scale, b=1e4 * scale)
    x1 = solve_wls_arrays(sat, pr, corr, const, cn0, base)[0]
    x2 = solve_wls_arrays(sat, pr, corr, const, cn0, scaled)[0]
    assert np.max(np.abs(x1[:3] - x2[:3])) < 1e-6


def test_residual_orthogonality(harsh_sim):
    ep = harsh_sim.epochs[7]
    sat, pr, corr, const, cn0 = _epoch_arrays(harsh_sim, 7)
    s = WeightScheme.named("sigma_eps")
    x, r, var, conv, *_ = solve_wls_arrays(sat, pr, corr, const, cn0, s, tol=1e-9, max_iter=20)
    slots = sorted(set(const.tolist()))
    d = x[:3] - sat
    J = np.concatenate([d / np.linalg.norm(d, axis=1)[:, None],
                        (const[:, None] == np.array(slots)[None, :]).astype(float)], axis=1)
    assert np.max(np.abs(J.T @ (r / var))) < 1e-6


def test_singular_geometry_reports_condition():
    sat = np.tile([0.0, 0.0, 2e7], (6, 1)) + np.arange(6)[:, None] * [0.0, 0.0, 1.0]
    with pytest.raises(WeightingError, match="condition number"):
        solve_wls_arrays(sat, np.full(6, 2e7), np.zeros(6), np.zeros(6, dtype=int), np.full(6, 40.0),
                         WeightScheme.named("elevation"))
