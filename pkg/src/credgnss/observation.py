"""Multi-constellation pseudorange model for the 7-dim per-epoch state."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .geo import EcefPoint, EnuPoint, Geodetic, ecef_to_enu_array, unit_los_enu

log = logging.getLogger(__name__)

STATE_DIM = 7
N_CLOCKS = 4
MIN_OBSERVATIONS = 5


class Constellation(IntEnum):
    """Clock-bias slot; GPS and QZSS share a receiver clock."""

    GPS_QZSS = 0
    GALILEO = 1
    GLONASS = 2
    BEIDOU = 3

    @classmethod
    def from_sat_id(cls, sat_id: str) -> "Constellation":
        try:
            return _PREFIX[sat_id[0].upper()]
        except (KeyError, IndexError):
            raise ValueError(f"unknown constellation prefix in sat_id {sat_id!r}") from None


_PREFIX = {
    "G": Constellation.GPS_QZSS,
    "J": Constellation.GPS_QZSS,
    "E": Constellation.GALILEO,
    "R": Constellation.GLONASS,
    "C": Constellation.BEIDOU,
}


@dataclass(frozen=True)
class SatelliteObservation:
    sat_id: str
    constellation: Constellation
    sat_pos: EcefPoint
    pseudorange_obs: float
    cn0: float
    correction_sum: float = 0.0
    truth_contamination: float | None = None  # simulator label only

    def __post_init__(self):
        if not self.pseudorange_obs > 0:
            raise ValueError(f"{self.sat_id}: pseudorange must be positive")
        if not 0.0 <= self.cn0 <= 70.0:
            raise ValueError(f"{self.sat_id}: cn0 {self.cn0} outside [0, 70] dB-Hz")
        if not np.isfinite(self.correction_sum):
            raise ValueError(f"{self.sat_id}: non-finite correction")


@dataclass
class EpochState:
    position: EnuPoint
    clock_biases: np.ndarray  # [GPS/QZSS, Galileo, GLONASS, BeiDou], meters

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.position.as_array(), np.asarray(self.clock_biases, float)])

    @classmethod
    def from_vector(cls, x) -> "EpochState":
        x = np.asarray(x, dtype=float)
        if x.shape != (STATE_DIM,) or not np.all(np.isfinite(x)):
            raise ValueError("epoch state must be 7 finite scalars")
        return cls(EnuPoint(*x[:3]), x[3:].copy())

    @classmethod
    def zeros(cls) -> "EpochState":
        return cls.from_vector(np.zeros(STATE_DIM))


@dataclass
class EpochObservations:
    epoch_index: int
    time: float
    observations: list[SatelliteObservation]
    truth_position: EnuPoint | None = None
    truth_clock: np.ndarray | None = None  # simulator label only
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [o.sat_id for o in self.observations]
        if len(set(ids)) != len(ids):
            raise ValueError(f"epoch {self.epoch_index}: duplicate satellite ids")

    @property
    def solvable(self) -> bool:
        return len(self.observations) >= MIN_OBSERVATIONS

    def canonical(self) -> list[SatelliteObservation]:
        """Observations ordered by constellation, then sat_id."""
        return sorted(self.observations, key=lambda o: (int(o.constellation), o.sat_id))


def drop_unsolvable(epochs: list[EpochObservations]) -> list[EpochObservations]:
    kept = []
    for ep in epochs:
        if ep.solvable:
            kept.append(ep)
        else:
            log.warning("dropping epoch %d: %d observations < %d", ep.epoch_index,
                        len(ep.observations), MIN_OBSERVATIONS)
    return kept


def clock_selector(constellation: Constellation) -> np.ndarray:
    u = np.zeros(N_CLOCKS)
    u[int(constellation)] = 1.0
    return u


def predict_pseudorange(state: EpochState, obs: SatelliteObservation, origin: Geodetic) -> float:
    sat = ecef_to_enu_array(obs.sat_pos.as_array(), origin)
    geometric = np.linalg.norm(state.position.as_array() - sat)
    clock = clock_selector(obs.constellation) @ np.asarray(state.clock_biases, float)
    return float(geometric + clock + obs.correction_sum)


def residual(state: EpochState, obs: SatelliteObservation, origin: Geodetic) -> float:
    """Observed minus predicted pseudorange."""
    return obs.pseudorange_obs - predict_pseudorange(state, obs, origin)


def residual_jacobian(state: EpochState, obs: SatelliteObservation, origin: Geodetic) -> np.ndarray:
    sat = ecef_to_enu_array(obs.sat_pos.as_array(), origin)
    los = unit_los_enu(sat, state.position.as_array())
    return -np.concatenate([los, clock_selector(obs.constellation)])


@dataclass
class PackedEpochs:
    """Padded array view of a list of epochs, one row per epoch.

    Satellite rows follow the canonical order (constellation, sat_id); padded
    rows have ``mask == False`` and a dummy far-away satellite position.
    """

    sat_enu: np.ndarray  # (E, N, 3)
    pseudorange: np.ndarray  # (E, N)
    correction: np.ndarray  # (E, N)
    constellation: np.ndarray  # (E, N) int
    cn0: np.ndarray  # (E, N)
    contamination: np.ndarray  # (E, N), nan when unknown
    mask: np.ndarray  # (E, N) bool
    sat_ids: list[list[str]]
    truth_enu: np.ndarray  # (E, 3), nan when unknown
    truth_clock: np.ndarray  # (E, 4), nan when unknown
    epoch_index: np.ndarray  # (E,)
    time: np.ndarray  # (E,)

    @property
    def n_epochs(self) -> int:
        return self.mask.shape[0]

    def take(self, rows) -> "PackedEpochs":
        rows = np.asarray(rows, dtype=int)
        return PackedEpochs(
            sat_enu=self.sat_enu[rows],
            pseudorange=self.pseudorange[rows],
            correction=self.correction[rows],
            constellation=self.constellation[rows],
            cn0=self.cn0[rows],
            contamination=self.contamination[rows],
            mask=self.mask[rows],
            sat_ids=[self.sat_ids[r] for r in rows],
            truth_enu=self.truth_enu[rows],
            truth_clock=self.truth_clock[rows],
            epoch_index=self.epoch_index[rows],
            time=self.time[rows],
        )


_DUMMY_SAT = np.array([0.0, 0.0, 2.0e7])


def pack_epochs(epochs: list[EpochObservations], origin: Geodetic, width: int | None = None) -> PackedEpochs:
    n_max = max((len(ep.observations) for ep in epochs), default=0)
    width = n_max if width is None else max(width, n_max)
    e = len(epochs)
    sat_enu = np.tile(_DUMMY_SAT, (e, width, 1))
    pr = np.zeros((e, width))
    corr = np.zeros((e, width))
    const = np.zeros((e, width), dtype=int)
    cn0 = np.zeros((e, width))
    contam = np.full((e, width), np.nan)
    mask = np.zeros((e, width), dtype=bool)
    truth = np.full((e, 3), np.nan)
    truth_clock = np.full((e, N_CLOCKS), np.nan)
    sat_ids = []
    for k, ep in enumerate(epochs):
        obs = ep.canonical()
        m = len(obs)
        if m:
            sat_enu[k, :m] = ecef_to_enu_array([o.sat_pos.as_array() for o in obs], origin)
        pr[k, :m] = [o.pseudorange_obs for o in obs]
        corr[k, :m] = [o.correction_sum for o in obs]
        const[k, :m] = [int(o.constellation) for o in obs]
        cn0[k, :m] = [o.cn0 for o in obs]
        contam[k, :m] = [np.nan if o.truth_contamination is None else o.truth_contamination for o in obs]
        mask[k, :m] = True
        sat_ids.append([o.sat_id for o in obs])
        if ep.truth_position is not None:
            truth[k] = ep.truth_position.as_array()
        if ep.truth_clock is not None:
            truth_clock[k] = ep.truth_clock
    return PackedEpochs(
        sat_enu=sat_enu,
        pseudorange=pr,
        correction=corr,
        constellation=const,
        cn0=cn0,
        contamination=contam,
        mask=mask,
        sat_ids=sat_ids,
        truth_enu=truth,
        truth_clock=truth_clock,
        epoch_index=np.array([ep.epoch_index for ep in epochs], dtype=int),
        time=np.array([ep.time for ep in epochs], dtype=float),
    )
