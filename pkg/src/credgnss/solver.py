"""Windowed weighted Gauss-Newton solver with unrolled reverse-mode gradients.

A window stacks ``L`` epochs of 7 unknowns each. Pseudorange factors never
couple two epochs, so the normal matrix is block diagonal and every block is
solved independently; the stacked state and covariance are assembled from the
blocks. All array kernels below are batched over independent blocks with the
shapes ``x: (B, D)``, ``omega: (B, N)``, ``J: (B, N, D)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geo import Geodetic
from .observation import (
    MIN_OBSERVATIONS,
    N_CLOCKS,
    STATE_DIM,
    EpochObservations,
    PackedEpochs,
    pack_epochs,
)

WINDOW_LENGTH = 5
STEP_REG = 1e-6
COV_JITTER = 1e-9
CLOCK_PRIOR_INFO = 1e-6
DIVERGENCE_FACTOR = 10.0
MAX_HALVINGS = 4


class SolverError(RuntimeError):
    """Numerical failure inside the Gauss-Newton solver."""


# ---------------------------------------------------------------------------
# factor models


class PseudorangeFactors:
    """Batched pseudorange factors ``r = rho_obs - |p - s| - b[c] - corr``.

    Ranges are evaluated as ``|p_ref - s| + delta(p)`` with ``delta`` formed
    from the position offset, so float64 rounding of the 2e7 m range does not
    vary with ``p``. ``p_ref`` defaults to the first position seen.
    """

    state_dim = STATE_DIM

    def __init__(self, sat_enu, pseudorange, correction, constellation, mask, reference=None):
        self.sat = np.asarray(sat_enu, dtype=float)
        self.obs = np.asarray(pseudorange, dtype=float)
        self.corr = np.asarray(correction, dtype=float)
        self.mask = np.asarray(mask, dtype=bool)
        sel = np.zeros(self.obs.shape + (N_CLOCKS,))
        np.put_along_axis(sel, np.asarray(constellation, dtype=int)[..., None], 1.0, axis=-1)
        self.sel = sel * self.mask[..., None]
        self.reference = None
        if reference is not None:
            self.set_reference(reference)

    @classmethod
    def from_packed(cls, packed: PackedEpochs, reference=None) -> "PseudorangeFactors":
        return cls(packed.sat_enu, packed.pseudorange, packed.correction, packed.constellation, packed.mask,
                   reference)

    def set_reference(self, positions):
        self.reference = np.array(positions, dtype=float)[:, :3]
        self._ref_range = np.linalg.norm(self.reference[:, None, :] - self.sat, axis=-1)

    def _geometry(self, x):
        d = x[:, None, :3] - self.sat
        rng = np.linalg.norm(d, axis=-1)
        return d / rng[..., None], rng

    def residual(self, x):
        if self.reference is None:
            self.set_reference(x)
        p = x[:, None, :3]
        ref = self.reference[:, None, :]
        rng = np.linalg.norm(p - self.sat, axis=-1)
        offset = np.sum((p - ref) * (p + ref - 2.0 * self.sat), axis=-1) / (rng + self._ref_range)
        clock = np.einsum("bnk,bk->bn", self.sel, x[:, 3:])
        return np.where(self.mask, (self.obs - self._ref_range - self.corr) - offset - clock, 0.0)

    def jacobian(self, x):
        los, _ = self._geometry(x)
        jac = -np.concatenate([los, self.sel], axis=-1)
        return jac * self.mask[..., None]

    def jacobian_vjp(self, x, jac_bar):
        """Pull ``jac_bar`` (B, N, D) back through ``x -> J(x)``."""
        los, rng = self._geometry(x)
        jp = jac_bar[..., :3] * self.mask[..., None]
        proj = jp - los * np.sum(los * jp, axis=-1, keepdims=True)
        x_bar = np.zeros_like(x)
        x_bar[:, :3] = -np.sum(proj / rng[..., None], axis=1)
        return x_bar


class LinearFactors:
    """``r = y - A x``; used for oracle checks and toy problems."""

    def __init__(self, design, target):
        self.design = np.asarray(design, dtype=float)
        self.target = np.asarray(target, dtype=float)
        self.state_dim = self.design.shape[-1]

    def residual(self, x):
        return self.target - np.einsum("bnd,bd->bn", self.design, x)

    def jacobian(self, x):
        return -self.design

    def jacobian_vjp(self, x, jac_bar):
        return np.zeros_like(x)


# ---------------------------------------------------------------------------
# batched kernel


@dataclass
class _Step:
    x: np.ndarray
    r: np.ndarray
    jac: np.ndarray
    hess: np.ndarray  # regularized matrix actually solved
    delta: np.ndarray
    alpha: np.ndarray  # (B,) applied step fraction
    active: np.ndarray  # (B,) block took this step


@dataclass
class BlockSolution:
    x: np.ndarray
    cov: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    x0: np.ndarray
    prior_info: np.ndarray
    tape: list[_Step] = field(default_factory=list)
    r_final: np.ndarray | None = None
    jac_final: np.ndarray | None = None


def _cost(model, omega, prior_info, prior_mean, x):
    r = model.residual(x)
    return 0.5 * np.sum(omega * r * r, axis=1) + 0.5 * np.sum(prior_info * (x - prior_mean) ** 2, axis=1)


def normal_matrix(jac, omega, prior_info=None):
    h = np.einsum("bni,bn,bnj->bij", jac, omega, jac)
    if prior_info is not None:
        h = h + prior_info[:, :, None] * np.eye(jac.shape[-1])
    return h


def _check_pd(h, what):
    try:
        return np.linalg.cholesky(h)
    except np.linalg.LinAlgError:
        conds = [np.linalg.cond(hb) for hb in h]
        raise SolverError(f"{what} is not positive definite (max condition number {max(conds):.3e})") from None


def _final_cholesky(h, jitter):
    """Cholesky of each block; blocks that are not numerically PD get ``jitter * I`` and a second try."""
    try:
        return np.linalg.cholesky(h)
    except np.linalg.LinAlgError:
        pass
    out = np.empty_like(h)
    eye = np.eye(h.shape[-1])
    for b, hb in enumerate(h):
        try:
            out[b] = np.linalg.cholesky(hb)
        except np.linalg.LinAlgError:
            out[b] = _check_pd((hb + jitter * eye)[None], "final information matrix")[0]
    return out


def solve_blocks(
    model,
    omega,
    x0,
    prior_info=None,
    max_iter: int = 10,
    tol: float = 1e-4,
    step_reg: float = STEP_REG,
    cov_jitter: float = COV_JITTER,
) -> BlockSolution:
    """Iterate ``x <- x - (J'WJ + reg I)^-1 J'W r`` per block and return the Laplace covariance."""
    omega = np.asarray(omega, dtype=float)
    if np.any(omega < 0) or not np.all(np.isfinite(omega)):
        raise SolverError("information weights must be finite and non-negative")
    x0 = np.array(x0, dtype=float)
    n_blocks, dim = x0.shape
    prior_info = np.zeros_like(x0) if prior_info is None else np.asarray(prior_info, dtype=float)
    eye = np.eye(dim)

    x = x0.copy()
    active = np.ones(n_blocks, dtype=bool)
    iterations = np.zeros(n_blocks, dtype=int)
    tape: list[_Step] = []
    for _ in range(max_iter):
        if not active.any():
            break
        r = model.residual(x)
        if not np.all(np.isfinite(r)):
            raise SolverError("non-finite residuals")
        jac = model.jacobian(x)
        hess = normal_matrix(jac, omega, prior_info) + step_reg * eye
        grad = np.einsum("bni,bn,bn->bi", jac, omega, r) + prior_info * (x - x0)
        _check_pd(hess, "normal matrix")
        delta = -np.linalg.solve(hess, grad[..., None])[..., 0]

        alpha = np.ones(n_blocks)
        cost0 = _cost(model, omega, prior_info, x0, x)
        for _ in range(MAX_HALVINGS):
            trial = _cost(model, omega, prior_info, x0, x + alpha[:, None] * delta)
            bad = active & (trial > DIVERGENCE_FACTOR * cost0) & (cost0 > 0)
            if not bad.any():
                break
            alpha = np.where(bad, 0.5 * alpha, alpha)

        step = np.where(active[:, None], alpha[:, None] * delta, 0.0)
        tape.append(_Step(x.copy(), r, jac, hess, delta, alpha, active.copy()))
        x = x + step
        iterations += active
        active = active & (np.linalg.norm(step, axis=1) >= tol)

    r = model.residual(x)
    jac = model.jacobian(x)
    chol = _final_cholesky(normal_matrix(jac, omega, prior_info), cov_jitter)
    chol_inv = np.linalg.inv(chol)
    cov = np.einsum("bki,bkj->bij", chol_inv, chol_inv)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    return BlockSolution(
        x=x,
        cov=cov,
        converged=~active,
        iterations=iterations,
        x0=x0,
        prior_info=prior_info,
        tape=tape,
        r_final=r,
        jac_final=jac,
    )


def backward_blocks(model, omega, sol: BlockSolution, x_bar, cov_bar) -> np.ndarray:
    """Gradient of a scalar loss wrt ``omega`` given loss adjoints of ``sol.x`` and ``sol.cov``.

    The covariance adjoint is pulled back through ``Sigma = H^-1`` and then,
    with the mean adjoint, through every recorded Gauss-Newton step.
    """
    omega = np.asarray(omega, dtype=float)
    x_bar = np.array(x_bar, dtype=float)
    cov_bar = np.asarray(cov_bar, dtype=float)
    cov_bar = 0.5 * (cov_bar + np.swapaxes(cov_bar, 1, 2))
    prior_info = sol.prior_info

    h_bar = -sol.cov @ cov_bar @ sol.cov
    jac = sol.jac_final
    omega_bar = np.einsum("bni,bij,bnj->bn", jac, h_bar, jac)
    jac_bar = 2.0 * omega[..., None] * np.einsum("bij,bnj->bni", h_bar, jac)
    x_bar = x_bar + model.jacobian_vjp(sol.x, jac_bar)

    for st in reversed(sol.tape):
        act = st.active
        delta_bar = np.where(act[:, None], st.alpha[:, None] * x_bar, 0.0)
        v = np.linalg.solve(st.hess, delta_bar[..., None])[..., 0]
        jv = np.einsum("bni,bi->bn", st.jac, v)
        jd = np.einsum("bni,bi->bn", st.jac, st.delta)
        omega_bar -= jv * (jd + st.r)
        jac_bar = -omega[..., None] * (
            v[:, None, :] * jd[..., None] + st.delta[:, None, :] * jv[..., None] + st.r[..., None] * v[:, None, :]
        )
        r_bar = -omega * jv
        x_bar = (
            x_bar
            + np.einsum("bni,bn->bi", st.jac, r_bar)
            + model.jacobian_vjp(st.x, jac_bar)
            - prior_info * v
        )
    return omega_bar


# ---------------------------------------------------------------------------
# window API


@dataclass
class WindowProblem:
    epochs: list[EpochObservations]
    packed: PackedEpochs
    factor_index: list[tuple[int, str]]
    information: np.ndarray
    origin: Geodetic

    @property
    def n_epochs(self) -> int:
        return len(self.epochs)

    @property
    def state_dim(self) -> int:
        return STATE_DIM * self.n_epochs

    @property
    def n_factors(self) -> int:
        return len(self.factor_index)

    def padded_information(self, information=None) -> np.ndarray:
        info = self.information if information is None else np.asarray(information, dtype=float)
        if info.shape != (self.n_factors,):
            raise ValueError(f"expected {self.n_factors} information values, got {info.shape}")
        out = np.zeros(self.packed.mask.shape)
        out[self.packed.mask] = info
        return out

    def model(self) -> PseudorangeFactors:
        return PseudorangeFactors.from_packed(self.packed)


@dataclass
class SolverOutput:
    state_hat: np.ndarray
    covariance_hat: np.ndarray
    per_epoch_en: list[tuple[np.ndarray, np.ndarray]]
    converged: bool
    gn_iterations: int
    blocks: BlockSolution = field(repr=False)


@dataclass
class SolverGradients:
    d_loss_d_information: np.ndarray
    converged: bool = True


def assemble_window(
    epochs: list[EpochObservations],
    information,
    origin: Geodetic,
    length: int = WINDOW_LENGTH,
) -> WindowProblem:
    if len(epochs) != length:
        raise ValueError(f"window needs exactly {length} epochs, got {len(epochs)}")
    for ep in epochs:
        if len(ep.observations) < MIN_OBSERVATIONS:
            raise ValueError(f"epoch {ep.epoch_index} has {len(ep.observations)} observations (< {MIN_OBSERVATIONS})")
    packed = pack_epochs(epochs, origin)
    factor_index = [(k, sid) for k, ids in enumerate(packed.sat_ids) for sid in ids]
    info = np.asarray(information, dtype=float)
    if info.shape != (len(factor_index),):
        raise ValueError(f"information has length {info.size}, window has {len(factor_index)} factors")
    return WindowProblem(list(epochs), packed, factor_index, info.copy(), origin)


def unobserved_clock_prior(packed_or_mask, constellation=None, info: float = CLOCK_PRIOR_INFO) -> np.ndarray:
    """Weak prior on clock slots with no factor in a block, shape (B, 7)."""
    if isinstance(packed_or_mask, PackedEpochs):
        mask, constellation = packed_or_mask.mask, packed_or_mask.constellation
    else:
        mask = packed_or_mask
    seen = np.zeros((mask.shape[0], N_CLOCKS), dtype=bool)
    for c in range(N_CLOCKS):
        seen[:, c] = np.any(mask & (constellation == c), axis=1)
    prior = np.zeros((mask.shape[0], STATE_DIM))
    prior[:, 3:] = np.where(seen, 0.0, info)
    return prior


def gauss_newton_solve(
    problem: WindowProblem,
    init,
    max_iter: int = 10,
    tol: float = 1e-4,
    cov_jitter: float = COV_JITTER,
) -> SolverOutput:
    """MAP estimate and Laplace covariance of the stacked window state."""
    n = problem.n_epochs
    x0 = np.asarray(init, dtype=float).reshape(n, STATE_DIM)
    omega = problem.padded_information()
    for k in range(n):
        if not np.any(omega[k] > 0):
            raise SolverError(f"epoch {problem.epochs[k].epoch_index} has no factor with positive information")
    sol = solve_blocks(
        problem.model(),
        omega,
        x0,
        unobserved_clock_prior(problem.packed),
        max_iter=max_iter,
        tol=tol,
        cov_jitter=cov_jitter,
    )
    cov = np.zeros((problem.state_dim, problem.state_dim))
    for k in range(n):
        s = slice(STATE_DIM * k, STATE_DIM * (k + 1))
        cov[s, s] = sol.cov[k]
    per_epoch = [(sol.x[k, :2].copy(), sol.cov[k, :2, :2].copy()) for k in range(n)]
    return SolverOutput(
        state_hat=sol.x.reshape(-1),
        covariance_hat=cov,
        per_epoch_en=per_epoch,
        converged=bool(sol.converged.all()),
        gn_iterations=int(sol.iterations.max(initial=0)),
        blocks=sol,
    )


def en_adjoints(n_blocks: int, d_en_mean, d_en_cov) -> tuple[np.ndarray, np.ndarray]:
    """Embed EN mean/covariance adjoints into full per-block state/covariance adjoints."""
    x_bar = np.zeros((n_blocks, STATE_DIM))
    cov_bar = np.zeros((n_blocks, STATE_DIM, STATE_DIM))
    x_bar[:, :2] = np.asarray(d_en_mean, dtype=float).reshape(n_blocks, 2)
    cov_bar[:, :2, :2] = np.asarray(d_en_cov, dtype=float).reshape(n_blocks, 2, 2)
    return x_bar, cov_bar


def backward(problem: WindowProblem, output: SolverOutput, d_loss_d_en_mean, d_loss_d_en_cov) -> SolverGradients:
    x_bar, cov_bar = en_adjoints(problem.n_epochs, d_loss_d_en_mean, d_loss_d_en_cov)
    omega_bar = backward_blocks(problem.model(), problem.padded_information(), output.blocks, x_bar, cov_bar)
    return SolverGradients(omega_bar[problem.packed.mask], converged=output.converged)


# ---------------------------------------------------------------------------
# geometry diagnostics


def weighted_hdop_block(los_enu, constellation, weights) -> float:
    """Weighted HDOP of a single epoch.

    ``G = [-los, -u_c]`` restricted to constellations with positive weight;
    weights are rescaled to unit mean over the satellites that carry weight.
    The EN block of ``(G'WG)^-1`` is taken through a Schur complement with a
    pseudo-inverse on the (up, clock) block, so an up/clock degeneracy that
    leaves horizontal position estimable does not raise.
    """
    los = np.asarray(los_enu, dtype=float)
    w = np.asarray(weights, dtype=float)
    c = np.asarray(constellation, dtype=int)
    use = w > 0
    if use.sum() < 3:
        raise SolverError("weighted HDOP needs at least 3 weighted satellites")
    los, w, c = los[use], w[use] / w[use].mean(), c[use]
    slots = sorted(set(c.tolist()))
    sel = (c[:, None] == np.array(slots)[None, :]).astype(float)
    g = -np.concatenate([los, sel], axis=1)
    h = g.T @ (w[:, None] * g)
    a, b, d = h[:2, :2], h[:2, 2:], h[2:, 2:]
    schur = a - b @ np.linalg.pinv(d, rcond=1e-12, hermitian=True) @ b.T
    if np.linalg.cond(schur) > 1e12:
        raise SolverError("horizontal position not observable in this geometry")
    return float(np.sqrt(np.trace(np.linalg.inv(schur))))


def weighted_hdop(problem: WindowProblem, information, at_state, epoch: int = -1) -> float:
    """Weighted HDOP of one epoch of the window, evaluated at the stacked state."""
    k = range(problem.n_epochs)[epoch]
    x = np.asarray(at_state, dtype=float).reshape(problem.n_epochs, STATE_DIM)[k]
    omega = problem.padded_information(information)[k]
    m = problem.packed.mask[k]
    d = x[:3] - problem.packed.sat_enu[k, m]
    los = d / np.linalg.norm(d, axis=1, keepdims=True)
    return weighted_hdop_block(los, problem.packed.constellation[k, m], omega[m])
