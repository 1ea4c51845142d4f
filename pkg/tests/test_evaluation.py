import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from credgnss import evaluation as ev, sim
from credgnss.evaluation import EvaluationError
from credgnss.observation import pack_epochs
from credgnss.weighting import WeightScheme


def test_zero_errors():
    assert ev.horizontal_errors(np.zeros((7, 2))) == (0.0, 0.0, 0.0)


def test_nearest_rank_p95():
    mean, p50, p95 = ev.horizontal_errors(np.arange(1.0, 101.0))
    assert (mean, p50, p95) == (50.5, 50.0, 95.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1e4, allow_nan=False), min_size=1, max_size=300),
       st.floats(0.5, 100.0))
def test_nearest_rank_sort_oracle(values, pct):
    s = sorted(values)
    rank = int(np.ceil(pct / 100.0 * len(s)))
    assert abs(ev.nearest_rank(values, pct) - s[max(rank, 1) - 1]) <= 1e-12


def test_empty_run_rejected():
    with pytest.raises(EvaluationError):
        ev.horizontal_errors(np.zeros((0, 2)))


def test_zero_errors_full_coverage():
    d = ev.credibility_diagnostics(np.zeros((10, 2)), np.full((10, 2), 0.3))
    for k in (1, 3):
        for ax in ("east", "north"):
            assert d[k][ax] == {"exceedance": 0.0, "coverage": 1.0}


def test_zero_sigma_with_error_is_exceedance():
    d = ev.credibility_diagnostics(np.array([[1.0, 0.0]]), np.zeros((1, 2)))
    assert d[3]["east"]["exceedance"] == 1.0 and d[3]["north"]["coverage"] == 1.0


def test_self_sampled_gaussian_matches_nominal():
    rng = np.random.default_rng(0)
    n = 100_000
    sig = rng.uniform(0.5, 20.0, (n, 2))
    err = rng.standard_normal((n, 2)) * sig
    d = ev.credibility_diagnostics(err, sig)
    for ax in ("east", "north"):
        assert abs(d[3][ax]["exceedance"] - 0.0027) <= 0.0006
        assert abs(d[1][ax]["coverage"] - 0.6827) <= 0.005


def test_hand_counted_log():
    # 20 records; east exceeds 1 sigma at rows 2,5,7,11,13,17 and 3 sigma at 5,13; north 1 sigma at 0,9,19
    err = np.zeros((20, 2))
    sig = np.ones((20, 2))
    err[[2, 7, 11, 17], 0] = [1.5, -2.0, 2.9, -1.01]
    err[[5, 13], 0] = [3.2, -7.0]
    err[[0, 9, 19], 1] = [1.2, -2.5, 2.0]
    err[4, 0] = 1.0  # on the boundary: inside
    err[6, 1] = -3.0
    d = ev.credibility_diagnostics(err, sig)
    assert d[1]["east"] == {"exceedance": 6 / 20, "coverage": 14 / 20}
    assert d[3]["east"] == {"exceedance": 2 / 20, "coverage": 18 / 20}
    assert d[1]["north"] == {"exceedance": 4 / 20, "coverage": 16 / 20}
    assert d[3]["north"] == {"exceedance": 0.0, "coverage": 1.0}


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_exceedance_coverage_complementary_and_monotone(seed):
    r = np.random.default_rng(seed)
    err = r.standard_normal((50, 2)) * 3
    sig = r.uniform(0.1, 5, (50, 2))
    ks = np.linspace(0.1, 5, 12)
    d = ev.credibility_diagnostics(err, sig, ks)
    for ax in ("east", "north"):
        exc = [d[k][ax]["exceedance"] for k in ks]
        cov = [d[k][ax]["coverage"] for k in ks]
        assert all(a + b == 1.0 for a, b in zip(exc, cov))
        assert np.all(np.diff(exc) <= 0) and np.all(np.diff(cov) >= 0)


def test_normalized_weights():
    np.testing.assert_allclose(ev.normalized_weights(np.full(7, 0.3)), np.full(7, 1 / 7))
    np.testing.assert_allclose(ev.normalized_weights([0.2, 0.3, 0.5]), [0.2, 0.3, 0.5], rtol=0, atol=1e-15)
    w = ev.normalized_weights(np.random.default_rng(0).uniform(0, 1, 40))
    assert abs(w.sum() - 1.0) <= 1e-12
    with pytest.raises(EvaluationError):
        ev.normalized_weights(np.zeros(4))


@pytest.fixture(scope="module")
def clean_epoch():
    cfg = dataclasses.replace(sim.presets()["medium"], n_epochs=1, seed=6, sigma0=1e-12, sectors=[],
                              background_nlos_probability=0.0)
    r = sim.generate(cfg)
    p = pack_epochs(r.epochs, r.origin)
    m = p.mask[0]
    return dict(sat_enu=p.sat_enu[0, m], pseudorange=p.pseudorange[0, m], correction=p.correction[0, m],
                constellation=p.constellation[0, m], cn0=p.cn0[0, m], truth_enu=p.truth_enu[0],
                clock=p.truth_clock[0], sat_ids=p.sat_ids[0])


def test_single_diff_clean_epoch_is_zero(clean_epoch):
    sd = ev.single_diff_errors(**clean_epoch)
    ok = sd.has_reference
    assert ok.sum() >= 5
    assert np.all(sd.errors[sd.is_reference] == 0.0)
    # stored 2e7 m pseudoranges carry half an ulp (1.9e-9 m) each; a difference of two carries one ulp
    ulp = np.spacing(clean_epoch["pseudorange"]).max()
    assert np.all(np.abs(sd.errors[ok]) <= 2 * ulp)


def test_single_diff_clean_short_range_is_zero(rng):
    sat = rng.uniform(-8e5, 8e5, (9, 3))
    sat[:, 2] = np.abs(sat[:, 2]) + 1e5
    truth = np.array([3.0, -4.0, 1.0])
    clock = np.array([12.0, -3.0, 0.5, 7.0])
    const = np.array([0, 0, 0, 1, 1, 2, 2, 2, 3])
    corr = rng.uniform(-5, 5, 9)
    pr = np.linalg.norm(sat - truth, axis=1) + clock[const] + corr
    sd = ev.single_diff_errors(sat, pr, corr, const, rng.uniform(20, 50, 9), truth, clock)
    assert np.all(np.abs(sd.errors[sd.has_reference]) < 1e-9)
    assert not sd.has_reference[8]


def test_single_diff_injection_and_clock_shift(clean_epoch):
    base = ev.single_diff_errors(**clean_epoch)
    i = int(np.flatnonzero(base.has_reference & ~base.is_reference)[0])
    pr = clean_epoch["pseudorange"].copy()
    pr[i] += 25.0
    hit = ev.single_diff_errors(**{**clean_epoch, "pseudorange": pr})
    assert abs(hit.errors[i] - base.errors[i] - 25.0) < 1e-9
    others = base.has_reference & (np.arange(pr.size) != i)
    np.testing.assert_array_equal(hit.errors[others], base.errors[others])
    c = clean_epoch["constellation"]
    pr2 = clean_epoch["pseudorange"] + np.where(c == c[i], 1234.5, 0.0)
    shifted = ev.single_diff_errors(**{**clean_epoch, "pseudorange": pr2})
    np.testing.assert_allclose(shifted.errors[base.has_reference], base.errors[base.has_reference], atol=1e-7)


def test_singleton_constellation_flagged():
    sd = ev.single_diff_errors(np.array([[2e7, 0, 1e7], [0, 2e7, 1e7], [1e7, 1e7, 2e7]]), np.full(3, 2.3e7),
                               np.zeros(3), np.array([0, 0, 2]), np.array([40.0, 45.0, 30.0]), np.zeros(3), None)
    assert list(sd.has_reference) == [True, True, False]
    assert list(sd.is_reference) == [False, True, False]
    assert np.isnan(sd.errors[2])


@pytest.fixture(scope="module")
def gogps_eval(request):
    run = request.getfixturevalue("medium_run")
    est = ev.estimate_with_scheme(run, WeightScheme.named("gogps"))
    return run, est, ev.evaluate_run(run, est, es_samples=256)


def test_satellite_weights_sum_to_one(gogps_eval):
    run, est, _ = gogps_eval
    for row in (0, 17, 39):
        d = ev.satellite_diagnostics(run, est, row)
        assert abs(d.normalized_weight.sum() - 1.0) <= 1e-12
        assert np.all(d.sd_error[d.is_reference] == 0.0)


def test_summary_layout(gogps_eval):
    _, _, e = gogps_eval
    s = e.summary()
    assert set(s) == {"method", "epochs", "Mean", "50%", "95%", "NLL", "ES", "diagnostics"}
    assert s["epochs"] == 40 and set(s["diagnostics"]) == {"1sigma", "3sigma"}


def test_export_round_trip(gogps_eval, tmp_path):
    run, est, e = gogps_eval
    diags = [ev.satellite_diagnostics(run, est, 5)]
    paths = ev.export_artifacts(e, diags, tmp_path)
    header, rows = ev.read_csv(paths["envelope_csv"])
    assert header == ev.ENVELOPE_COLUMNS and len(rows) == run.n_epochs
    parsed = np.array([[float(x) for x in r] for r in rows])
    np.testing.assert_array_equal(parsed[:, 2:4], e.errors)
    np.testing.assert_array_equal(parsed[:, 4:6], e.sigmas)
    np.testing.assert_array_equal(parsed[:, 6], e.nll)
    header, rows = ev.read_csv(paths["satellites_csv"])
    assert len(rows) == len(diags[0].sat_ids)
    assert [float(r[4]) for r in rows] == list(diags[0].normalized_weight)
    for key in ("envelope_svg", "satellites_svg_5", "skyplot_svg_5"):
        assert open(paths[key]).read().startswith("<svg")


def test_export_empty_is_headers_only(tmp_path):
    paths = ev.export_artifacts(None, [], tmp_path)
    for key, cols in (("envelope_csv", ev.ENVELOPE_COLUMNS), ("satellites_csv", ev.SATELLITE_COLUMNS),
                      ("skyplot_csv", ev.SKYPLOT_COLUMNS)):
        header, rows = ev.read_csv(paths[key])
        assert header == cols and rows == []


def test_export_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(EvaluationError):
        ev.export_artifacts(None, [], blocker / "out")
