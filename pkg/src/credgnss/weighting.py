"""Classical per-satellite weighting baselines and the single-epoch WLS fix."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .geo import Geodetic
from .observation import (
    MIN_OBSERVATIONS,
    N_CLOCKS,
    EpochObservations,
    EpochState,
    PackedEpochs,
    pack_epochs,
)


class WeightingError(ValueError):
    pass


class SchemeKind(str, Enum):
    ELEVATION = "elevation"
    SIGMA_EPS = "sigma_eps"
    GOGPS = "gogps"


_DEFAULTS = {
    # sigma^2 = a^2 / sin^2(el)
    SchemeKind.ELEVATION: {"a": 1.5},
    # sigma^2 = a + b * 10^(-cn0/10)
    SchemeKind.SIGMA_EPS: {"a": 0.5, "b": 1.0e4},
    # sigma^2 = sigma0^2 * q(cn0) / sin^2(el), goGPS SNR mask (A, a, s0, s1)
    SchemeKind.GOGPS: {"sigma0": 1.0, "A": 30.0, "a": 20.0, "s0": 10.0, "s1": 50.0},
}


@dataclass
class WeightScheme:
    kind: SchemeKind
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = SchemeKind(self.kind)
        merged = dict(_DEFAULTS[self.kind])
        unknown = set(self.params) - set(merged)
        if unknown:
            raise WeightingError(f"unknown {self.kind.value} parameters: {sorted(unknown)}")
        merged.update(self.params)
        if any(not v > 0 for v in merged.values()):
            raise WeightingError(f"{self.kind.value} parameters must be strictly positive: {merged}")
        if self.kind is SchemeKind.GOGPS and not merged["s1"] > merged["s0"]:
            raise WeightingError("gogps requires s1 > s0")
        self.params = merged

    @classmethod
    def named(cls, name: str, **params) -> "WeightScheme":
        return cls(SchemeKind(name), params)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "params": dict(self.params)}


def gogps_snr_factor(cn0, A=30.0, a=20.0, s0=10.0, s1=50.0):
    """goGPS SNR variance factor: 1 above ``s1``, ``A`` at and below ``s0``."""
    s = np.clip(np.asarray(cn0, dtype=float), s0, s1)
    q = 10.0 ** (-(s - s1) / a) * ((A / 10.0 ** (-(s0 - s1) / a) - 1.0) / (s0 - s1) * (s - s1) + 1.0)
    return q


def scheme_variance(scheme: WeightScheme, elevation, cn0):
    """Pseudorange variance (m^2) of a classical scheme, vectorized over satellites."""
    el, cn0 = np.broadcast_arrays(np.asarray(elevation, dtype=float), np.asarray(cn0, dtype=float))
    if np.any(el <= 0) or np.any(el > np.pi / 2 + 1e-12):
        raise WeightingError("elevation must lie in (0, pi/2]")
    if np.any(cn0 < 0):
        raise WeightingError("cn0 must be non-negative")
    p = scheme.params
    s2 = np.sin(el) ** 2
    if scheme.kind is SchemeKind.ELEVATION:
        return p["a"] ** 2 / s2
    if scheme.kind is SchemeKind.SIGMA_EPS:
        return p["a"] + p["b"] * 10.0 ** (-cn0 / 10.0)
    q = gogps_snr_factor(cn0, p["A"], p["a"], p["s0"], p["s1"])
    return p["sigma0"] ** 2 * q / s2


@dataclass
class WlsSolution:
    state: EpochState
    residuals: np.ndarray  # canonical satellite order
    variances: np.ndarray
    converged: bool
    iterations: int
    elevation: np.ndarray
    azimuth: np.ndarray


def _sky(sat_enu, p):
    d = sat_enu - p
    rng = np.linalg.norm(d, axis=1)
    el = np.arcsin(np.clip(d[:, 2] / rng, -1.0, 1.0))
    az = np.mod(np.arctan2(d[:, 0], d[:, 1]), 2.0 * np.pi)
    return el, az


def solve_wls_arrays(sat_enu, pseudorange, correction, constellation, cn0, scheme: WeightScheme,
                     init=None, max_iter: int = 10, tol: float = 1e-4, min_elevation: float = 1e-3):
    """Single-epoch iterated WLS on canonical-order arrays.

    Only clock slots of constellations present in the epoch are estimated;
    absent slots keep their initial value. Weights are recomputed from the
    elevation seen from the current estimate.
    """
    n = len(pseudorange)
    if n < MIN_OBSERVATIONS:
        raise WeightingError(f"WLS needs at least {MIN_OBSERVATIONS} observations, got {n}")
    x = np.zeros(3 + N_CLOCKS) if init is None else np.array(init, dtype=float)
    slots = sorted(set(int(c) for c in constellation))
    sel = (np.asarray(constellation)[:, None] == np.array(slots)[None, :]).astype(float)
    cols = [0, 1, 2] + [3 + s for s in slots]
    converged = False
    it = 0
    var = None
    for it in range(1, max_iter + 1):
        d = x[:3] - sat_enu
        rng = np.linalg.norm(d, axis=1)
        r = pseudorange - rng - sel @ x[[3 + s for s in slots]] - correction
        el, _ = _sky(sat_enu, x[:3])
        var = scheme_variance(scheme, np.maximum(el, min_elevation), cn0)
        jac = -np.concatenate([d / rng[:, None], sel], axis=1)
        w = 1.0 / var
        h = jac.T @ (w[:, None] * jac)
        cond = np.linalg.cond(h)
        if not np.isfinite(cond) or cond > 1e14:
            raise WeightingError(f"singular WLS normal matrix (condition number {cond:.3e})")
        step = -np.linalg.solve(h, jac.T @ (w * r))
        x[cols] += step
        if np.linalg.norm(step) < tol:
            converged = True
            break
    d = x[:3] - sat_enu
    r = pseudorange - np.linalg.norm(d, axis=1) - sel @ x[[3 + s for s in slots]] - correction
    el, az = _sky(sat_enu, x[:3])
    return x, r, var, converged, it, el, az


def solve_wls(epoch: EpochObservations, scheme: WeightScheme, origin: Geodetic,
              init: EpochState | None = None, max_iter: int = 10, tol: float = 1e-4) -> WlsSolution:
    packed = pack_epochs([epoch], origin)
    return wls_from_packed(packed, 0, scheme, init, max_iter, tol)


def wls_from_packed(packed: PackedEpochs, row: int, scheme: WeightScheme, init: EpochState | None = None,
                    max_iter: int = 10, tol: float = 1e-4) -> WlsSolution:
    m = packed.mask[row]
    x, r, var, conv, it, el, az = solve_wls_arrays(
        packed.sat_enu[row, m], packed.pseudorange[row, m], packed.correction[row, m],
        packed.constellation[row, m], packed.cn0[row, m], scheme,
        None if init is None else init.as_vector(), max_iter, tol,
    )
    return WlsSolution(EpochState.from_vector(x), r, var, conv, it, el, az)


def wls_batch(packed: PackedEpochs, scheme: WeightScheme) -> list[WlsSolution]:
    return [wls_from_packed(packed, k, scheme) for k in range(packed.n_epochs)]


def scheme_information(packed: PackedEpochs, scheme: WeightScheme, wls: list[WlsSolution]) -> np.ndarray:
    """Padded per-factor information ``1 / sigma^2`` for a classical scheme, shape (E, N)."""
    out = np.zeros(packed.mask.shape)
    for k, sol in enumerate(wls):
        m = packed.mask[k]
        el = np.maximum(sol.elevation, 1e-3)
        out[k, m] = 1.0 / scheme_variance(scheme, el, packed.cn0[k, m])
    return out

