import numpy as np
import pytest

from credgnss import gradcheck
from credgnss.cli import main
from credgnss.wgn import WgnConfig, WgnModel

SMALL = WgnConfig(d_model=8, d_ff=8, seed=2)


@pytest.fixture(scope="module")
def clean_report(request):
    run = request.getfixturevalue("medium_run")
    return gradcheck.run_audit(run, start=3, seed=1, wgn_config=SMALL)


def test_clean_window_passes(clean_report):
    assert clean_report.passed, clean_report.table()
    assert max(r.max_rel_error for r in clean_report.rows) < 1e-3


def test_one_row_per_group(clean_report):
    names = [r.group for r in clean_report.rows]
    params = list(WgnModel.init(SMALL).params)
    assert names == ["solver.omega[nll]", "solver.omega[es]", "solver.omega[combined]"] + [f"wgn.{p}" for p in params]
    assert len(clean_report.table().splitlines()) == len(names) + 1


def test_corrupted_jacobian_fails(medium_run):
    rep = gradcheck.run_audit(medium_run, start=3, seed=1, corrupt_jacobian=1e-3, include_wgn=False)
    assert not rep.passed
    assert set(rep.offenders) == {"solver.omega[nll]", "solver.omega[es]", "solver.omega[combined]"}


def test_relative_error_metric():
    assert gradcheck.relative_error([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert gradcheck.relative_error([1.0], [1.001]) == pytest.approx(0.001 / 1.001)
    # tiny entries are judged against 1e-6 of the largest derivative
    assert gradcheck.relative_error([1.0, 1e-12], [1.0, 0.0]) < 1e-5


def test_window_must_fit(medium_run):
    with pytest.raises(ValueError, match="outside run"):
        gradcheck.run_audit(medium_run, start=38)


def test_cli_gradcheck_exit_codes(tmp_path, capsys, monkeypatch):
    ds = tmp_path / "g.jsonl"
    assert main(["simulate", "--preset", "medium", "--epochs", "8", "--seed", "3", "--out", str(ds)]) == 0
    assert main(["gradcheck", "--dataset", str(ds), "--start", "10"]) == 1
    rows = [gradcheck.GroupResult("solver.omega[nll]", 3, 1e-6, True), gradcheck.GroupResult("wgn.proj.W", 4, 0.2, False)]
    monkeypatch.setattr(gradcheck, "run_audit", lambda *a, **k: gradcheck.AuditReport(rows, 1e-3))
    capsys.readouterr()
    assert main(["gradcheck", "--dataset", str(ds)]) == 2
    out = capsys.readouterr()
    assert "wgn.proj.W" in out.err and "FAIL" in out.out
    monkeypatch.setattr(gradcheck, "run_audit", lambda *a, **k: gradcheck.AuditReport(rows[:1], 1e-3))
    assert main(["gradcheck", "--dataset", str(ds)]) == 0
