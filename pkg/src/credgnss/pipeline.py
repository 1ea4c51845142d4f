"""Per-run preprocessing shared by training and evaluation, plus batched solves."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geo import Geodetic
from .observation import EpochObservations, PackedEpochs, drop_unsolvable, pack_epochs
from .solver import BlockSolution, PseudorangeFactors, solve_blocks, unobserved_clock_prior
from .weighting import SchemeKind, WeightScheme, WlsSolution, wls_batch
from .wgn import FeatureStats, SatelliteFeatures, normalize, raw_features


@dataclass
class PreparedRun:
    """A run with its GoGPS-WLS fixes, per-satellite sky geometry and raw WGN features."""

    epochs: list[EpochObservations]
    origin: Geodetic
    packed: PackedEpochs
    wls: list[WlsSolution]
    x0: np.ndarray  # (E, 7) warm start
    elevation: np.ndarray  # (E, N) rad, seen from the WLS fix
    azimuth: np.ndarray  # (E, N) rad
    residual: np.ndarray  # (E, N) signed WLS residual
    raw: np.ndarray  # (E, N, 4)

    @property
    def n_epochs(self) -> int:
        return self.packed.n_epochs

    @property
    def has_truth(self) -> bool:
        return bool(np.all(np.isfinite(self.packed.truth_enu)))

    def features(self, stats: FeatureStats, rows=None) -> SatelliteFeatures:
        if rows is None:
            return normalize(self.raw, self.packed.mask, stats)
        return normalize(self.raw[rows], self.packed.mask[rows], stats)


def prepare_run(epochs: list[EpochObservations], origin: Geodetic,
                scheme: WeightScheme | None = None) -> PreparedRun:
    epochs = drop_unsolvable(list(epochs))
    if not epochs:
        raise ValueError("no solvable epochs")
    packed = pack_epochs(epochs, origin)
    scheme = scheme or WeightScheme(SchemeKind.GOGPS)
    wls = wls_batch(packed, scheme)
    shape = packed.mask.shape
    el, az, res = np.zeros(shape), np.zeros(shape), np.zeros(shape)
    for k, sol in enumerate(wls):
        m = packed.mask[k]
        el[k, m], az[k, m], res[k, m] = sol.elevation, sol.azimuth, sol.residuals
    x0 = np.stack([sol.state.as_vector() for sol in wls])
    return PreparedRun(epochs, origin, packed, wls, x0, el, az, res, raw_features(packed, el, res))


def solve_rows(run: PreparedRun, rows, omega, max_iter: int = 10, tol: float = 1e-4):
    """Solve the per-epoch blocks ``rows`` with padded information ``omega`` (len(rows), N)."""
    rows = np.asarray(rows, dtype=int)
    sub = run.packed.take(rows)
    model = PseudorangeFactors.from_packed(sub, reference=run.x0[rows])
    sol: BlockSolution = solve_blocks(model, omega, run.x0[rows], unobserved_clock_prior(sub),
                                      max_iter=max_iter, tol=tol)
    return model, sol
