"""Synthetic urban-canyon GNSS scenarios with labelled NLOS contamination."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .geo import EcefPoint, EnuPoint, Geodetic, enu_rotation, enu_to_ecef_array
from .observation import Constellation, EpochObservations, MIN_OBSERVATIONS, SatelliteObservation

GM_EARTH = 3.986004418e14
OMEGA_EARTH = 7.2921151467e-5
EARTH_RADIUS = 6378137.0


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class ShellSpec:
    prefix: str
    altitude_km: float
    inclination_deg: float
    planes: int
    raan_offset_deg: float = 0.0


SHELLS = {
    "GPS": ShellSpec("G", 20200.0, 55.0, 6, 0.0),
    "Galileo": ShellSpec("E", 23222.0, 56.0, 3, 15.0),
    "GLONASS": ShellSpec("R", 20200.0, 64.8, 3, 40.0),
    "BeiDou": ShellSpec("C", 21528.0, 55.0, 3, 75.0),
}


@dataclass
class Sector:
    """Azimuth sector ``[az_start, az_end)`` in degrees, clockwise from North; may wrap."""

    az_start_deg: float
    az_end_deg: float
    max_blocked_elevation_deg: float
    nlos_probability: float

    def contains(self, az_deg):
        a0, a1 = self.az_start_deg % 360.0, self.az_end_deg % 360.0
        az = np.mod(az_deg, 360.0)
        if a0 <= a1:
            return (az >= a0) & (az < a1)
        return (az >= a0) | (az < a1)


@dataclass
class ScenarioConfig:
    seed: int = 0
    n_epochs: int = 500
    epoch_interval: float = 1.0
    start_time: float = 0.0
    origin_lat_deg: float = 22.3193
    origin_lon_deg: float = 114.1694
    origin_height: float = 10.0
    waypoints: list = field(default_factory=lambda: [[0.0, 0.0], [0.0, 600.0], [300.0, 600.0], [300.0, 0.0]])
    speed: float = 6.0
    constellations: dict = field(default_factory=lambda: {"GPS": 24, "Galileo": 24, "GLONASS": 24, "BeiDou": 24})
    elevation_mask_deg: float = 10.0
    sectors: list = field(default_factory=list)
    background_nlos_probability: float = 0.0
    sigma0: float = 1.5
    elevation_exponent: float = 1.0
    bias_lognormal_mu: float = float(np.log(10.0))
    bias_lognormal_sigma: float = 0.8
    cn0_base: float = 45.0
    cn0_noise: float = 1.5
    nlos_cn0_penalty: list = field(default_factory=lambda: [6.0, 12.0])
    clock_rw_sigma: float = 0.5
    name: str = "custom"

    def __post_init__(self):
        self.sectors = [s if isinstance(s, Sector) else Sector(**s) for s in self.sectors]
        self.validate()

    def validate(self):
        if self.n_epochs < 1:
            raise SimulationError("n_epochs must be >= 1")
        for name in ("epoch_interval", "sigma0", "bias_lognormal_sigma", "clock_rw_sigma", "speed", "cn0_noise"):
            if not getattr(self, name) > 0:
                raise SimulationError(f"{name} must be > 0")
        for s in self.sectors:
            if not (0.0 <= s.az_start_deg < 360.0 and 0.0 <= s.az_end_deg <= 360.0):
                raise SimulationError(f"sector azimuths outside [0, 360): {s}")
            if not 0.0 <= s.nlos_probability <= 1.0:
                raise SimulationError(f"sector probability outside [0, 1]: {s}")
        if not 0.0 <= self.background_nlos_probability <= 1.0:
            raise SimulationError("background_nlos_probability outside [0, 1]")
        unknown = set(self.constellations) - set(SHELLS)
        if unknown:
            raise SimulationError(f"unknown constellations {sorted(unknown)}")
        if len(self.waypoints) < 2:
            raise SimulationError("need at least two waypoints")

    @property
    def origin(self) -> Geodetic:
        return Geodetic.from_degrees(self.origin_lat_deg, self.origin_lon_deg, self.origin_height)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise SimulationError(f"unknown scenario fields {sorted(unknown)}")
        return cls(**d)


@dataclass
class SimulatedRun:
    epochs: list[EpochObservations]
    config: ScenarioConfig
    origin: Geodetic
    metadata: dict = field(default_factory=dict)


def _street(az_center, half_width, blocked_el, p):
    return Sector((az_center - half_width) % 360.0, (az_center + half_width) % 360.0, blocked_el, p)


def presets() -> dict[str, ScenarioConfig]:
    """Medium/deep/harsh urban presets: a N-S street with facades to the East and West.

    Difficulty grows through facade blockage elevation, NLOS probability
    (0.05 / 0.15 / 0.30), median NLOS bias (10 / 20 / 40 m) and the clean
    noise floor sigma0 (1.5 / 2.25 / 3 m).
    """
    table = {
        "medium": (25.0, 0.05, 10.0, 1.5),
        "deep": (40.0, 0.15, 20.0, 2.25),
        "harsh": (55.0, 0.30, 40.0, 3.0),
    }
    out = {}
    for name, (blocked, p, median, sigma0) in table.items():
        out[name] = ScenarioConfig(
            name=name,
            sectors=[_street(90.0, 60.0, blocked, p), _street(270.0, 60.0, blocked, p)],
            background_nlos_probability=p / 3.0,
            sigma0=sigma0,
            bias_lognormal_mu=float(np.log(median)),
        )
    return out


def _trajectory(cfg: ScenarioConfig, times):
    """Ping-pong along the waypoint polyline at constant speed; returns (T, 3) ENU."""
    wp = np.asarray(cfg.waypoints, dtype=float)
    seg = np.linalg.norm(np.diff(wp, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    s = np.mod(cfg.speed * (times - times[0]), 2.0 * total)
    s = np.where(s > total, 2.0 * total - s, s)
    e = np.interp(s, cum, wp[:, 0])
    n = np.interp(s, cum, wp[:, 1])
    return np.stack([e, n, np.zeros_like(e)], axis=1)


def _shell_positions(cfg: ScenarioConfig, times):
    """ECEF satellite positions (T, S, 3) and ids for all configured shells."""
    ids, pos = [], []
    for name in SHELLS:
        count = int(cfg.constellations.get(name, 0))
        if count <= 0:
            continue
        shell = SHELLS[name]
        radius = EARTH_RADIUS + shell.altitude_km * 1e3
        rate = np.sqrt(GM_EARTH / radius**3)
        inc = np.radians(shell.inclination_deg)
        per_plane = int(np.ceil(count / shell.planes))
        for k in range(count):
            plane, slot = divmod(k, per_plane)
            raan = np.radians(shell.raan_offset_deg) + 2.0 * np.pi * plane / shell.planes
            phase = 2.0 * np.pi * slot / per_plane + np.pi * plane / (shell.planes * per_plane)
            u = phase + rate * times
            x_orb, y_orb = radius * np.cos(u), radius * np.sin(u)
            eci = np.stack(
                [
                    x_orb * np.cos(raan) - y_orb * np.cos(inc) * np.sin(raan),
                    x_orb * np.sin(raan) + y_orb * np.cos(inc) * np.cos(raan),
                    y_orb * np.sin(inc),
                ],
                axis=1,
            )
            theta = OMEGA_EARTH * times
            ecef = np.stack(
                [
                    np.cos(theta) * eci[:, 0] + np.sin(theta) * eci[:, 1],
                    -np.sin(theta) * eci[:, 0] + np.cos(theta) * eci[:, 1],
                    eci[:, 2],
                ],
                axis=1,
            )
            ids.append(f"{shell.prefix}{k + 1:02d}")
            pos.append(ecef)
    return ids, np.stack(pos, axis=1)


def generate(cfg: ScenarioConfig) -> SimulatedRun:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    origin = cfg.origin
    rot = enu_rotation(origin)
    times = cfg.start_time + cfg.epoch_interval * np.arange(cfg.n_epochs)
    truth_enu = _trajectory(cfg, times)
    truth_ecef = enu_to_ecef_array(truth_enu, origin)
    ids, sat_ecef = _shell_positions(cfg, times)
    consts = np.array([int(Constellation.from_sat_id(s)) for s in ids])
    n_sat = len(ids)

    # per-satellite correction offset (satellite clock etc.), known to the model
    sat_offset = rng.uniform(-50.0, 50.0, n_sat)
    clock0 = np.concatenate([[rng.normal(0.0, 1000.0)], rng.normal(0.0, 30.0, 3)])
    clock0[1:] += clock0[0]
    walk = np.cumsum(rng.normal(0.0, cfg.clock_rw_sigma * np.sqrt(cfg.epoch_interval), cfg.n_epochs))
    walk -= walk[0]

    epochs = []
    for t in range(cfg.n_epochs):
        d_ecef = sat_ecef[t] - truth_ecef[t]
        d_enu = d_ecef @ rot.T
        rng_m = np.linalg.norm(d_ecef, axis=1)
        el = np.arcsin(d_enu[:, 2] / np.linalg.norm(d_enu, axis=1))
        az = np.mod(np.arctan2(d_enu[:, 0], d_enu[:, 1]), 2.0 * np.pi)
        az_deg, el_deg = np.degrees(az), np.degrees(el)

        visible = el_deg > cfg.elevation_mask_deg
        p_nlos = np.full(n_sat, cfg.background_nlos_probability)
        for sec in cfg.sectors:
            inside = sec.contains(az_deg)
            visible &= ~(inside & (el_deg < sec.max_blocked_elevation_deg))
            p_nlos = np.where(inside, sec.nlos_probability, p_nlos)
        if visible.sum() < MIN_OBSERVATIONS:
            raise SimulationError(f"epoch {t}: only {int(visible.sum())} visible satellites")

        # draws are made for every satellite so the stream does not depend on visibility
        noise = rng.standard_normal(n_sat) * cfg.sigma0 / np.sin(np.maximum(el, 1e-3)) ** cfg.elevation_exponent
        is_nlos = rng.random(n_sat) < p_nlos
        bias = np.exp(rng.normal(cfg.bias_lognormal_mu, cfg.bias_lognormal_sigma, n_sat))
        penalty = rng.uniform(cfg.nlos_cn0_penalty[0], cfg.nlos_cn0_penalty[1], n_sat)
        cn0_noise = rng.normal(0.0, cfg.cn0_noise, n_sat)

        clock = clock0 + walk[t]
        contamination = np.where(is_nlos, bias, 0.0)
        corr = sat_offset + 2.4 / np.sin(np.maximum(el, 1e-3))
        pr = rng_m + clock[consts] + corr + noise + contamination
        cn0 = cfg.cn0_base + 10.0 * np.log10(np.sin(np.maximum(el, 1e-3))) + cn0_noise - np.where(is_nlos, penalty, 0.0)
        cn0 = np.clip(cn0, 0.0, 70.0)

        obs = [
            SatelliteObservation(
                sat_id=ids[s],
                constellation=Constellation(int(consts[s])),
                sat_pos=EcefPoint(*sat_ecef[t, s]),
                pseudorange_obs=float(pr[s]),
                cn0=float(cn0[s]),
                correction_sum=float(corr[s]),
                truth_contamination=float(contamination[s]),
            )
            for s in np.flatnonzero(visible)
        ]
        epochs.append(
            EpochObservations(
                epoch_index=t,
                time=float(times[t]),
                observations=obs,
                truth_position=EnuPoint(*truth_enu[t]),
                truth_clock=clock.copy(),
            )
        )
    meta = {"preset": cfg.name, "seed": cfg.seed, "n_epochs": cfg.n_epochs}
    return SimulatedRun(epochs, cfg, origin, meta)
