"""Finite-difference audit of the analytic gradients (solver, losses, weighting network).

Relative error of a group is the worst element-wise value of
``|g - f| / max(|g|, |f|, floor)`` with ``floor = 1e-6 * max|f|`` over the
group, where ``g`` is analytic and ``f`` a central difference. The floor keeps
entries that are numerically zero from dominating.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses
from .pipeline import PreparedRun
from .solver import PseudorangeFactors, backward_blocks, en_adjoints, solve_blocks, unobserved_clock_prior
from .wgn import WgnConfig, WgnModel, backward as wgn_backward, forward as wgn_forward

DEFAULT_TOLERANCE = 1e-3
AUDIT_ITERATIONS = 10


@dataclass
class GroupResult:
    group: str
    n_checked: int
    max_rel_error: float
    passed: bool


@dataclass
class AuditReport:
    rows: list[GroupResult]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    @property
    def offenders(self) -> list[str]:
        return [r.group for r in self.rows if not r.passed]

    def table(self) -> str:
        lines = [f"{'group':<28} {'checked':>8} {'max_rel_err':>12}  status"]
        for r in self.rows:
            lines.append(f"{r.group:<28} {r.n_checked:>8d} {r.max_rel_error:>12.3e}  {'ok' if r.passed else 'FAIL'}")
        return "\n".join(lines)


def relative_error(analytic, numeric) -> float:
    g = np.asarray(analytic, dtype=float).ravel()
    f = np.asarray(numeric, dtype=float).ravel()
    floor = max(1e-6 * float(np.max(np.abs(f), initial=0.0)), 1e-300)
    return float(np.max(np.abs(g - f) / np.maximum(np.maximum(np.abs(g), np.abs(f)), floor), initial=0.0))


class _CorruptedFactors(PseudorangeFactors):
    """Negative-control hook: scales the East line-of-sight column by ``1 + corruption``."""

    corruption = 0.0

    def jacobian(self, x):
        jac = super().jacobian(x)
        jac[..., 0] *= 1.0 + self.corruption
        return jac


@dataclass
class _Window:
    model_args: tuple
    x0: np.ndarray
    prior: np.ndarray
    truth: np.ndarray
    mask: np.ndarray

    def factors(self, corruption=0.0):
        if corruption:
            f = _CorruptedFactors(*self.model_args[:5], reference=self.model_args[5])
            f.corruption = corruption
            return f
        return PseudorangeFactors(*self.model_args[:5], reference=self.model_args[5])


def _window(run: PreparedRun, rows) -> _Window:
    sub = run.packed.take(np.asarray(rows))
    args = (sub.sat_enu, sub.pseudorange, sub.correction, sub.constellation, sub.mask, run.x0[rows])
    return _Window(args, run.x0[rows], unobserved_clock_prior(sub), sub.truth_enu[:, :2], sub.mask)


def _objective(kind: str, eps):
    cfgs = {"nll": (1.0, 0.0), "es": (0.0, 1.0), "combined": (0.5, 0.5)}
    a, b = cfgs[kind]
    cfg = losses.LossConfig(a, b, eps.shape[1])

    def f(mean, cov, truth):
        return losses.combined(mean, cov, truth, cfg, eps=eps)

    return f


def _loss_and_omega_grad(win: _Window, omega, objective, corruption=0.0, need_grad=True):
    factors = win.factors(corruption)
    sol = solve_blocks(factors, omega, win.x0, win.prior, max_iter=AUDIT_ITERATIONS, tol=0.0)
    value, d_mean, d_cov = objective(sol.x[:, :2], sol.cov[:, :2, :2], win.truth)
    n = omega.shape[0]
    loss = float(value.mean())
    if not need_grad:
        return loss, None
    x_bar, cov_bar = en_adjoints(n, d_mean / n, d_cov / n)
    return loss, backward_blocks(factors, omega, sol, x_bar, cov_bar)


def check_solver_information(win: _Window, omega, objective, rel_step=1e-5, corruption=0.0):
    _, g = _loss_and_omega_grad(win, omega, objective, corruption)
    idx = np.argwhere(win.mask)
    f = np.zeros(len(idx))
    for j, (b, i) in enumerate(idx):
        h = rel_step * omega[b, i]
        o = omega.copy()
        o[b, i] += h
        lp, _ = _loss_and_omega_grad(win, o, objective, need_grad=False)
        o[b, i] -= 2 * h
        lm, _ = _loss_and_omega_grad(win, o, objective, need_grad=False)
        f[j] = (lp - lm) / (2 * h)
    return relative_error(g[win.mask], f), len(idx)


def check_wgn_parameters(run: PreparedRun, rows, model: WgnModel, win: _Window, objective, step=1e-5,
                         max_per_group=24, seed=0, corruption=0.0):
    feats = run.features(model.stats, rows)

    def total(m, need_grad):
        w, cache = wgn_forward(m, feats, return_cache=True)
        loss, obar = _loss_and_omega_grad(win, w.omega, objective, corruption, need_grad)
        return loss, (wgn_backward(m, cache, obar) if need_grad else None)

    _, grads = total(model, True)
    rng = np.random.default_rng(seed)
    out = {}
    for name, p in model.params.items():
        flat = p.reshape(-1)
        picks = np.arange(flat.size) if flat.size <= max_per_group else rng.choice(flat.size, max_per_group,
                                                                                   replace=False)
        f = np.zeros(len(picks))
        for j, k in enumerate(picks):
            old = flat[k]
            flat[k] = old + step
            lp, _ = total(model, False)
            flat[k] = old - step
            lm, _ = total(model, False)
            flat[k] = old
            f[j] = (lp - lm) / (2 * step)
        out[name] = (relative_error(grads[name].reshape(-1)[picks], f), len(picks))
    return out


def run_audit(run: PreparedRun, start: int = 0, length: int = 5, seed: int = 0, mc_samples: int = 256,
              tolerance: float = DEFAULT_TOLERANCE, corrupt_jacobian: float = 0.0,
              wgn_config: WgnConfig | None = None, include_wgn: bool = True) -> AuditReport:
    """Audit every gradient group on the window ``run[start:start+length]``.

    ``corrupt_jacobian`` perturbs the Jacobian used by the analytic path only;
    any nonzero value should make the audit fail.
    """
    if start < 0 or start + length > run.n_epochs:
        raise ValueError(f"window [{start}, {start + length}) outside run of {run.n_epochs} epochs")
    if not run.has_truth:
        raise ValueError("gradient audit needs ground truth")
    rows = np.arange(start, start + length)
    win = _window(run, rows)
    from .wgn import FeatureStats

    model = WgnModel.init(wgn_config or WgnConfig(seed=seed), FeatureStats.fit(run.raw, run.packed.mask))
    omega = wgn_forward(model, run.features(model.stats, rows)).omega
    eps = np.random.default_rng([seed, 1]).standard_normal((length, mc_samples - mc_samples % 2, 2))
    rows_out = []
    for kind in ("nll", "es", "combined"):
        err, n = check_solver_information(win, omega, _objective(kind, eps), corruption=corrupt_jacobian)
        rows_out.append(GroupResult(f"solver.omega[{kind}]", n, err, err < tolerance))
    if include_wgn:
        res = check_wgn_parameters(run, rows, model, win, _objective("combined", eps), seed=seed,
                                   corruption=corrupt_jacobian)
        for name, (err, n) in res.items():
            rows_out.append(GroupResult(f"wgn.{name}", n, err, err < tolerance))
    return AuditReport(rows_out, tolerance)
