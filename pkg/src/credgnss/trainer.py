"""End-to-end training: WGN -> unrolled solver -> scoring rule, and back."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from . import losses
from .pipeline import PreparedRun, solve_rows
from .solver import backward_blocks, en_adjoints
from .wgn import FeatureStats, WgnConfig, WgnModel, backward as wgn_backward, forward as wgn_forward
from .wgn import model_from_dict, model_to_dict

log = logging.getLogger(__name__)

TRAIN_STATE_FORMAT = "credgnss-train-state"
TRAIN_STATE_VERSION = 1
_VALIDATION_STREAM = 2**31 - 1


class Objective(str, Enum):
    MAE = "mae"
    NLL = "nll"
    ES = "es"
    COMBINED = "combined"


@dataclass
class TrainConfig:
    objective: Objective = Objective.COMBINED
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    epochs_over_data: int = 30
    grad_clip_norm: float = 10.0
    seed: int = 0
    window_length: int = 5
    window_stride: int = 1
    val_fraction: float = 0.1
    alpha: float = 0.5
    beta: float = 0.5
    mc_samples: int = 2048
    solver_max_iter: int = 10
    solver_tol: float = 1e-4

    def __post_init__(self):
        self.objective = Objective(self.objective)
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        self.loss_config()

    def loss_config(self) -> losses.LossConfig:
        if self.objective is Objective.NLL:
            return losses.LossConfig(1.0, 0.0, self.mc_samples, self.seed)
        if self.objective is Objective.ES:
            return losses.LossConfig(0.0, 1.0, self.mc_samples, self.seed)
        return losses.LossConfig(self.alpha, self.beta, self.mc_samples, self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objective"] = self.objective.value
        return d


@dataclass
class TrainState:
    model: WgnModel
    m: dict
    v: dict
    step: int = 0
    pass_index: int = 0
    skipped: int = 0
    nonconverged: int = 0
    history: list = field(default_factory=list)
    best_val: float = float("inf")
    best_params: dict | None = None

    @classmethod
    def fresh(cls, model: WgnModel) -> "TrainState":
        zeros = {k: np.zeros_like(v) for k, v in model.params.items()}
        return cls(model, zeros, {k: np.zeros_like(v) for k, v in model.params.items()})


def make_windows(n_epochs: int, length: int = 5, stride: int = 1) -> list[np.ndarray]:
    """Row indices of overlapping windows, in order."""
    if n_epochs < length:
        raise ValueError(f"run has {n_epochs} epochs, a window needs {length}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return [np.arange(s, s + length) for s in range(0, n_epochs - length + 1, stride)]


def split_windows(windows, val_fraction: float):
    """Hold out the trailing contiguous block of windows for validation."""
    n_val = int(round(len(windows) * val_fraction))
    if n_val == 0:
        return list(windows), []
    return list(windows[:-n_val]), list(windows[-n_val:])


def _window_eps(cfg: TrainConfig, stream: int, window_ids, length: int) -> np.ndarray:
    k = cfg.mc_samples - cfg.mc_samples % 2
    blocks = [
        np.random.default_rng([cfg.seed, stream, int(w)]).standard_normal((length, k, 2))
        for w in window_ids
    ]
    return np.concatenate(blocks, axis=0)


@dataclass
class BatchResult:
    loss: float
    grads: dict | None
    per_block: np.ndarray
    d_en_cov_abs_max: float
    nonconverged: int
    omega: np.ndarray


def objective_terms(cfg: TrainConfig, mean, cov, truth, eps):
    """Per-block objective value and adjoints wrt EN mean/covariance."""
    if cfg.objective is Objective.MAE:
        value, d_mean = losses.mae(mean, truth)
        return value, d_mean, np.zeros_like(cov)
    return losses.combined(mean, cov, truth, cfg.loss_config(), eps=eps)


def batch_loss(model: WgnModel, run: PreparedRun, windows, cfg: TrainConfig, stream: int,
               window_ids=None, need_grad: bool = True) -> BatchResult:
    """Mean over windows of the mean per-epoch loss, with parameter gradients."""
    rows = np.concatenate(windows)
    length = len(windows[0])
    ids = [int(w[0]) for w in windows] if window_ids is None else window_ids
    feats = run.features(model.stats, rows)
    weights, cache = wgn_forward(model, feats, return_cache=True)
    solver_model, sol = solve_rows(run, rows, weights.omega, cfg.solver_max_iter, cfg.solver_tol)
    mean = sol.x[:, :2]
    cov = sol.cov[:, :2, :2]
    truth = run.packed.truth_enu[rows, :2]
    eps = None if cfg.objective is Objective.MAE or cfg.loss_config().beta == 0 else _window_eps(cfg, stream, ids,
                                                                                                  length)
    value, d_mean, d_cov = objective_terms(cfg, mean, cov, truth, eps)
    loss = float(value.mean())
    nonconv = int((~sol.converged).sum())
    if not need_grad:
        return BatchResult(loss, None, value, float(np.abs(d_cov).max()), nonconv, weights.omega)
    scale = 1.0 / len(rows)
    x_bar, cov_bar = en_adjoints(len(rows), d_mean * scale, d_cov * scale)
    omega_bar = backward_blocks(solver_model, weights.omega, sol, x_bar, cov_bar)
    grads = wgn_backward(model, cache, omega_bar)
    return BatchResult(loss, grads, value, float(np.abs(d_cov).max()), nonconv, weights.omega)


def _global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def adam_update(params: dict, grads: dict, m: dict, v: dict, step: int, cfg: TrainConfig) -> None:
    """In-place Adam update; ``step`` is 1-based. A zero learning rate leaves ``params`` untouched."""
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    for k, p in params.items():
        g = grads[k]
        m[k] = b1 * m[k] + (1.0 - b1) * g
        v[k] = b2 * v[k] + (1.0 - b2) * g * g
        if cfg.learning_rate > 0:
            p -= cfg.learning_rate * (m[k] / c1) / (np.sqrt(v[k] / c2) + cfg.adam_eps)


def train_step(state: TrainState, run: PreparedRun, windows, cfg: TrainConfig) -> tuple[TrainState, float]:
    res = batch_loss(state.model, run, windows, cfg, stream=state.step)
    state.nonconverged += res.nonconverged
    grads = res.grads
    norm = _global_norm(grads)
    if not (np.isfinite(res.loss) and np.isfinite(norm)):
        state.skipped += 1
        state.step += 1
        state.history.append({"step": state.step, "loss": res.loss, "grad_norm": norm, "skipped": state.skipped})
        log.warning("step %d skipped: non-finite loss or gradient", state.step)
        return state, res.loss
    if norm > cfg.grad_clip_norm:
        grads = {k: g * (cfg.grad_clip_norm / norm) for k, g in grads.items()}
    state.step += 1
    adam_update(state.model.params, grads, state.m, state.v, state.step, cfg)
    state.history.append({"step": state.step, "loss": res.loss, "grad_norm": norm, "skipped": state.skipped})
    return state, res.loss


def validation_loss(model: WgnModel, run: PreparedRun, windows, cfg: TrainConfig, chunk: int = 64) -> float:
    if not windows:
        return float("nan")
    total = 0.0
    for s in range(0, len(windows), chunk):
        part = windows[s:s + chunk]
        res = batch_loss(model, run, part, cfg, stream=_VALIDATION_STREAM, need_grad=False)
        total += res.loss * len(part)
    return total / len(windows)


def fit_stats(run: PreparedRun) -> FeatureStats:
    return FeatureStats.fit(run.raw, run.packed.mask)


@dataclass
class TrainResult:
    model: WgnModel
    state: TrainState
    val_history: list


def train(run: PreparedRun, cfg: TrainConfig, wgn_config: WgnConfig | None = None,
          state: TrainState | None = None, log_csv=None, state_path=None, stop_after_pass: int | None = None,
          progress=None) -> TrainResult:
    """Train a weighting network on ``run``; returns the best-validation model.

    ``state`` resumes from a saved :class:`TrainState`; passes already done
    are skipped. ``stop_after_pass`` ends training early (used to emulate an
    interruption).
    """
    if not run.has_truth:
        raise ValueError("training run lacks ground truth")
    windows = make_windows(run.n_epochs, cfg.window_length, cfg.window_stride)
    train_w, val_w = split_windows(windows, cfg.val_fraction)
    if state is None:
        wcfg = wgn_config or WgnConfig(seed=cfg.seed)
        state = TrainState.fresh(WgnModel.init(wcfg, fit_stats(run)))
    val_history = [h for h in state.history if "val_loss" in h]
    for p in range(state.pass_index, cfg.epochs_over_data):
        order = np.random.default_rng([cfg.seed, p]).permutation(len(train_w))
        for s in range(0, len(order), cfg.batch_size):
            batch = [train_w[i] for i in order[s:s + cfg.batch_size]]
            train_step(state, run, batch, cfg)
        val = validation_loss(state.model, run, val_w, cfg) if val_w else state.history[-1]["loss"]
        state.pass_index = p + 1
        state.history.append({"pass": p + 1, "val_loss": val, "step": state.step})
        val_history.append(state.history[-1])
        if val < state.best_val or state.best_params is None:
            state.best_val = val
            state.best_params = {k: v.copy() for k, v in state.model.params.items()}
        if progress:
            progress(p + 1, state.history[-2]["loss"] if len(state.history) > 1 else float("nan"), val)
        if state_path is not None:
            save_train_state(state, cfg, state_path)
        if stop_after_pass is not None and state.pass_index >= stop_after_pass:
            break
    if log_csv is not None:
        write_log_csv(state.history, log_csv)
    best = state.model.copy()
    if state.best_params is not None:
        best.params = {k: v.copy() for k, v in state.best_params.items()}
    return TrainResult(best, state, val_history)


def write_log_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "objective", "grad_norm", "skipped"])
        for h in history:
            if "grad_norm" in h:
                writer.writerow([h["step"], repr(h["loss"]), repr(h["grad_norm"]), h["skipped"]])


def _arrays_to_json(d):
    return {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in d.items()}


def _arrays_from_json(d):
    return {k: np.asarray(v["data"], dtype=float).reshape(v["shape"]) for k, v in d.items()}


def save_train_state(state: TrainState, cfg: TrainConfig, path) -> None:
    payload = {
        "format": TRAIN_STATE_FORMAT,
        "version": TRAIN_STATE_VERSION,
        "train_config": cfg.to_dict(),
        "model": model_to_dict(state.model),
        "adam_m": _arrays_to_json(state.m),
        "adam_v": _arrays_to_json(state.v),
        "step": state.step,
        "pass_index": state.pass_index,
        "skipped": state.skipped,
        "nonconverged": state.nonconverged,
        "history": state.history,
        "best_val": state.best_val,
        "best_params": None if state.best_params is None else _arrays_to_json(state.best_params),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_train_state(path) -> TrainState:
    with open(path) as fh:
        d = json.load(fh)
    if d.get("format") != TRAIN_STATE_FORMAT or d.get("version") != TRAIN_STATE_VERSION:
        raise ValueError(f"{path}: not a supported training-state file")
    return TrainState(
        model=model_from_dict(d["model"]),
        m=_arrays_from_json(d["adam_m"]),
        v=_arrays_from_json(d["adam_v"]),
        step=d["step"],
        pass_index=d["pass_index"],
        skipped=d["skipped"],
        nonconverged=d["nonconverged"],
        history=d["history"],
        best_val=d["best_val"],
        best_params=None if d["best_params"] is None else _arrays_from_json(d["best_params"]),
    )
