"""Test-time metrics, credibility diagnostics and figure-support exports."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .observation import N_CLOCKS
from .pipeline import PreparedRun, solve_rows
from .solver import weighted_hdop_block
from .weighting import WeightScheme, scheme_information
from .wgn import WgnModel, forward as wgn_forward

EVAL_SEED = 20240517
ES_EVAL_SAMPLES = 8192


class EvaluationError(ValueError):
    pass


@dataclass
class MethodEstimates:
    """Per-epoch solver output for one weighting method on a prepared run."""

    name: str
    state: np.ndarray  # (E, 7)
    en_mean: np.ndarray  # (E, 2)
    en_cov: np.ndarray  # (E, 2, 2)
    weights: np.ndarray  # (E, N) w = sqrt(omega); zero on padding
    omega: np.ndarray  # (E, N)
    converged: np.ndarray  # (E,)


def _solve_all(run: PreparedRun, omega, name, chunk=256, max_iter=10, tol=1e-4) -> MethodEstimates:
    states, covs, conv = [], [], []
    for s in range(0, run.n_epochs, chunk):
        rows = np.arange(s, min(s + chunk, run.n_epochs))
        _, sol = solve_rows(run, rows, omega[rows], max_iter, tol)
        states.append(sol.x)
        covs.append(sol.cov)
        conv.append(sol.converged)
    state = np.concatenate(states)
    cov = np.concatenate(covs)
    return MethodEstimates(name, state, state[:, :2].copy(), cov[:, :2, :2].copy(), np.sqrt(omega), omega,
                           np.concatenate(conv))


def estimate_with_model(run: PreparedRun, model: WgnModel, name: str = "learned", chunk: int = 256) -> MethodEstimates:
    """Solve every epoch with WGN weights; each epoch equals its value in any window containing it."""
    omega = np.zeros(run.packed.mask.shape)
    for s in range(0, run.n_epochs, chunk):
        rows = np.arange(s, min(s + chunk, run.n_epochs))
        omega[rows] = wgn_forward(model, run.features(model.stats, rows)).omega
    est = _solve_all(run, omega, name)
    est.weights = np.where(run.packed.mask, np.sqrt(omega), 0.0)
    return est


def estimate_with_scheme(run: PreparedRun, scheme: WeightScheme, name: str | None = None) -> MethodEstimates:
    omega = scheme_information(run.packed, scheme, run.wls)
    return _solve_all(run, omega, name or scheme.kind.value)


# ---------------------------------------------------------------------------
# metrics


def nearest_rank(values, pct: float) -> float:
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise EvaluationError("empty sample")
    rank = max(1, math.ceil(pct / 100.0 * v.size))
    return float(v[rank - 1])


def horizontal_errors(errors) -> tuple[float, float, float]:
    """(mean, p50, p95) of 2-D errors given as (E, 2) vectors or (E,) norms."""
    e = np.asarray(errors, dtype=float)
    if e.size == 0:
        raise EvaluationError("no epochs to evaluate")
    norms = np.linalg.norm(e, axis=1) if e.ndim == 2 else np.abs(e)
    return float(norms.mean()), nearest_rank(norms, 50), nearest_rank(norms, 95)


def credibility_diagnostics(errors, sigmas, ks=(1, 3)) -> dict:
    """Per-axis exceedance ``P(|e| > k sigma)`` and coverage ``P(|e| <= k sigma)``."""
    e = np.abs(np.asarray(errors, dtype=float))
    s = np.asarray(sigmas, dtype=float)
    out = {}
    for k in ks:
        inside = e <= k * s
        out[k] = {
            axis: {"exceedance": float(np.mean(~inside[:, j])), "coverage": float(np.mean(inside[:, j]))}
            for j, axis in enumerate(("east", "north"))
        }
    return out


def normalized_weights(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    total = w.sum()
    if not total > 0:
        raise EvaluationError("weights sum to zero")
    return w / total


@dataclass
class SingleDiff:
    sat_ids: list
    errors: np.ndarray  # e_SD, nan where no reference exists
    raw: np.ndarray  # ground-truth-referenced error before differencing
    is_reference: np.ndarray
    has_reference: np.ndarray


def single_diff_errors(sat_enu, pseudorange, correction, constellation, cn0, truth_enu, clock, sat_ids=None):
    """Single-differenced errors against the highest-cn0 satellite of each constellation."""
    sat_enu = np.asarray(sat_enu, dtype=float)
    const = np.asarray(constellation, dtype=int)
    cn0 = np.asarray(cn0, dtype=float)
    clock = np.zeros(N_CLOCKS) if clock is None else np.asarray(clock, dtype=float)
    eps = (np.asarray(pseudorange) - (np.linalg.norm(np.asarray(truth_enu) - sat_enu, axis=1)
                                      + clock[const] + np.asarray(correction)))
    sd = np.full(eps.shape, np.nan)
    is_ref = np.zeros(eps.shape, dtype=bool)
    has_ref = np.zeros(eps.shape, dtype=bool)
    for c in np.unique(const):
        idx = np.flatnonzero(const == c)
        if idx.size < 2:
            continue
        ref = idx[np.argmax(cn0[idx])]
        sd[idx] = eps[idx] - eps[ref]
        sd[ref] = 0.0
        is_ref[ref] = True
        has_ref[idx] = True
    ids = list(sat_ids) if sat_ids is not None else [str(i) for i in range(eps.size)]
    return SingleDiff(ids, sd, eps, is_ref, has_ref)


@dataclass
class RunEvaluation:
    method: str
    epoch_index: np.ndarray
    time: np.ndarray
    errors: np.ndarray  # (E, 2) estimate - truth
    covariance: np.ndarray  # (E, 2, 2)
    sigmas: np.ndarray  # (E, 2)
    nll: np.ndarray
    es: np.ndarray
    mean_error: float
    p50_error: float
    p95_error: float
    mean_nll: float
    mean_es: float
    diagnostics: dict = field(default_factory=dict)

    def summary(self) -> dict:
        diag = {f"{k}sigma": v for k, v in self.diagnostics.items()}
        return {
            "method": self.method,
            "epochs": int(self.errors.shape[0]),
            "Mean": self.mean_error,
            "50%": self.p50_error,
            "95%": self.p95_error,
            "NLL": self.mean_nll,
            "ES": self.mean_es,
            "diagnostics": diag,
        }


def evaluate_run(run: PreparedRun, est: MethodEstimates, es_samples: int = ES_EVAL_SAMPLES,
                 seed: int = EVAL_SEED, ks=(1, 3)) -> RunEvaluation:
    if not run.has_truth:
        raise EvaluationError("evaluation requires ground truth")
    truth = run.packed.truth_enu[:, :2]
    err = est.en_mean - truth
    mean, p50, p95 = horizontal_errors(err)
    nll = losses.nll_eval(est.en_mean, est.en_cov, truth)
    es = np.empty(run.n_epochs)
    for s in range(0, run.n_epochs, 128):
        sl = slice(s, s + 128)
        es[sl] = losses.es_eval(est.en_mean[sl], est.en_cov[sl], truth[sl], k=es_samples, seed=[seed, s])
    sig = np.sqrt(np.stack([est.en_cov[:, 0, 0], est.en_cov[:, 1, 1]], axis=1))
    return RunEvaluation(
        method=est.name,
        epoch_index=run.packed.epoch_index.copy(),
        time=run.packed.time.copy(),
        errors=err,
        covariance=est.en_cov.copy(),
        sigmas=sig,
        nll=nll,
        es=es,
        mean_error=mean,
        p50_error=p50,
        p95_error=p95,
        mean_nll=float(nll.mean()),
        mean_es=float(es.mean()),
        diagnostics=credibility_diagnostics(err, sig, ks),
    )


# ---------------------------------------------------------------------------
# satellite-level diagnostics


@dataclass
class SatelliteDiagnostics:
    epoch_index: int
    sat_ids: list
    constellation: np.ndarray
    weight: np.ndarray
    normalized_weight: np.ndarray
    sd_error: np.ndarray
    wls_residual: np.ndarray
    is_reference: np.ndarray
    has_reference: np.ndarray
    azimuth: np.ndarray
    elevation: np.ndarray
    contamination: np.ndarray
    weighted_hdop: float


def satellite_diagnostics(run: PreparedRun, est: MethodEstimates, row: int, use_truth_clock: bool = True):
    m = run.packed.mask[row]
    p = run.packed
    clock = p.truth_clock[row] if use_truth_clock and np.all(np.isfinite(p.truth_clock[row])) else est.state[row, 3:]
    sd = single_diff_errors(p.sat_enu[row, m], p.pseudorange[row, m], p.correction[row, m],
                            p.constellation[row, m], p.cn0[row, m], p.truth_enu[row], clock, p.sat_ids[row])
    w = est.weights[row, m]
    d = est.state[row, :3] - p.sat_enu[row, m]
    los = d / np.linalg.norm(d, axis=1, keepdims=True)
    return SatelliteDiagnostics(
        epoch_index=int(p.epoch_index[row]),
        sat_ids=list(p.sat_ids[row]),
        constellation=p.constellation[row, m].copy(),
        weight=w.copy(),
        normalized_weight=normalized_weights(w),
        sd_error=sd.errors,
        wls_residual=run.residual[row, m].copy(),
        is_reference=sd.is_reference,
        has_reference=sd.has_reference,
        azimuth=run.azimuth[row, m].copy(),
        elevation=run.elevation[row, m].copy(),
        contamination=p.contamination[row, m].copy(),
        weighted_hdop=weighted_hdop_block(los, p.constellation[row, m], est.omega[row, m]),
    )


def epoch_hdops(run: PreparedRun, est: MethodEstimates) -> np.ndarray:
    out = np.empty(run.n_epochs)
    for k in range(run.n_epochs):
        m = run.packed.mask[k]
        d = est.state[k, :3] - run.packed.sat_enu[k, m]
        los = d / np.linalg.norm(d, axis=1, keepdims=True)
        out[k] = weighted_hdop_block(los, run.packed.constellation[k, m], est.omega[k, m])
    return out


def contamination_weight_ratio(run: PreparedRun, est: MethodEstimates, threshold: float = 10.0):
    """Mean normalized weight of clean factors over that of contaminated factors (> threshold m)."""
    mask = run.packed.mask
    wbar = est.weights / est.weights.sum(axis=1, keepdims=True)
    contam = np.nan_to_num(run.packed.contamination, nan=0.0)
    bad = mask & (contam > threshold)
    good = mask & (contam == 0.0)
    if not bad.any():
        raise EvaluationError("no contaminated factors above threshold")
    return float(wbar[good].mean() / wbar[bad].mean()), float(wbar[good].mean()), float(wbar[bad].mean())


# ---------------------------------------------------------------------------
# export

ENVELOPE_COLUMNS = ["epoch", "time", "err_east", "err_north", "sigma_east", "sigma_north", "nll", "es"]
SATELLITE_COLUMNS = ["epoch", "sat_id", "constellation", "weight", "normalized_weight", "sd_error",
                     "wls_residual", "is_reference", "has_reference", "contamination"]
SKYPLOT_COLUMNS = ["epoch", "sat_id", "azimuth_deg", "elevation_deg", "normalized_weight"]


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for r in rows:
            writer.writerow([_fmt(v) for v in r])


def envelope_rows(ev: RunEvaluation):
    for k in range(ev.errors.shape[0]):
        yield (int(ev.epoch_index[k]), float(ev.time[k]), float(ev.errors[k, 0]), float(ev.errors[k, 1]),
               float(ev.sigmas[k, 0]), float(ev.sigmas[k, 1]), float(ev.nll[k]), float(ev.es[k]))


def satellite_rows(diags):
    for d in diags:
        for j, sid in enumerate(d.sat_ids):
            yield (d.epoch_index, sid, int(d.constellation[j]), float(d.weight[j]), float(d.normalized_weight[j]),
                   float(d.sd_error[j]), float(d.wls_residual[j]), bool(d.is_reference[j]),
                   bool(d.has_reference[j]), float(d.contamination[j]))


def skyplot_rows(diags):
    for d in diags:
        for j, sid in enumerate(d.sat_ids):
            yield (d.epoch_index, sid, float(np.degrees(d.azimuth[j])), float(np.degrees(d.elevation[j])),
                   float(d.normalized_weight[j]))


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def export_artifacts(run_eval: RunEvaluation | None, sat_diags, out_dir, prefix: str = "") -> dict:
    """Write envelope / satellite / skyplot CSVs and their SVG renders; returns written paths."""
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise EvaluationError(f"cannot create {out_dir}: {exc}") from exc
    if not os.access(out_dir, os.W_OK):
        raise EvaluationError(f"{out_dir} is not writable")
    sat_diags = list(sat_diags or [])
    paths = {
        "envelope_csv": os.path.join(out_dir, f"{prefix}envelope.csv"),
        "satellites_csv": os.path.join(out_dir, f"{prefix}satellites.csv"),
        "skyplot_csv": os.path.join(out_dir, f"{prefix}skyplot.csv"),
    }
    _write_csv(paths["envelope_csv"], ENVELOPE_COLUMNS, envelope_rows(run_eval) if run_eval is not None else [])
    _write_csv(paths["satellites_csv"], SATELLITE_COLUMNS, satellite_rows(sat_diags))
    _write_csv(paths["skyplot_csv"], SKYPLOT_COLUMNS, skyplot_rows(sat_diags))
    from . import svg

    if run_eval is not None and run_eval.errors.shape[0]:
        paths["envelope_svg"] = os.path.join(out_dir, f"{prefix}envelope.svg")
        svg.write(paths["envelope_svg"], svg.envelope_plot(run_eval))
    for d in sat_diags:
        p = os.path.join(out_dir, f"{prefix}satellites_{d.epoch_index}.svg")
        svg.write(p, svg.satellite_bars(d))
        paths[f"satellites_svg_{d.epoch_index}"] = p
        p = os.path.join(out_dir, f"{prefix}skyplot_{d.epoch_index}.svg")
        svg.write(p, svg.skyplot(d))
        paths[f"skyplot_svg_{d.epoch_index}"] = p
    return paths


def write_summary(summaries: list[dict], path, extra: dict | None = None) -> None:
    payload = {
        "columns": ["Mean", "50%", "95%", "NLL", "ES"],
        "aggregation": "per-epoch mean for NLL and ES; nearest-rank percentiles for 50% and 95%",
        "methods": summaries,
    }
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
