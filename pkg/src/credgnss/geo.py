"""WGS-84 frame conversions and satellite sky geometry."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)


class GeometryError(ValueError):
    """Raised for degenerate or non-finite geometry."""


@dataclass(frozen=True)
class EcefPoint:
    x: float
    y: float
    z: float

    def __post_init__(self):
        if not np.all(np.isfinite([self.x, self.y, self.z])):
            raise GeometryError(f"non-finite ECEF point {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)


@dataclass(frozen=True)
class EnuPoint:
    e: float
    n: float
    u: float

    def __post_init__(self):
        if not np.all(np.isfinite([self.e, self.n, self.u])):
            raise GeometryError(f"non-finite ENU point {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.e, self.n, self.u], dtype=float)


@dataclass(frozen=True)
class Geodetic:
    """Geodetic coordinates: latitude/longitude in radians, height in meters."""

    lat: float
    lon: float
    height: float = 0.0

    def __post_init__(self):
        if not np.all(np.isfinite([self.lat, self.lon, self.height])):
            raise GeometryError("non-finite geodetic origin")
        if not -np.pi / 2 <= self.lat <= np.pi / 2:
            raise GeometryError(f"latitude {self.lat} outside [-pi/2, pi/2]")

    @classmethod
    def from_degrees(cls, lat_deg: float, lon_deg: float, height: float = 0.0) -> "Geodetic":
        return cls(np.radians(lat_deg), np.radians(lon_deg), height)


@dataclass(frozen=True)
class SkyDirection:
    elevation: float
    azimuth: float


def geodetic_to_ecef(geo: Geodetic) -> np.ndarray:
    sl, cl = np.sin(geo.lat), np.cos(geo.lat)
    prime_vertical = WGS84_A / np.sqrt(1.0 - WGS84_E2 * sl * sl)
    return np.array(
        [
            (prime_vertical + geo.height) * cl * np.cos(geo.lon),
            (prime_vertical + geo.height) * cl * np.sin(geo.lon),
            (prime_vertical * (1.0 - WGS84_E2) + geo.height) * sl,
        ]
    )


def ecef_to_geodetic(xyz) -> Geodetic:
    """Iterative inverse of :func:`geodetic_to_ecef` (converges to ~1e-12 rad)."""
    x, y, z = np.asarray(xyz, dtype=float)
    lon = np.arctan2(y, x)
    p = np.hypot(x, y)
    lat = np.arctan2(z, p * (1.0 - WGS84_E2))
    height = 0.0
    for _ in range(10):
        sl = np.sin(lat)
        prime_vertical = WGS84_A / np.sqrt(1.0 - WGS84_E2 * sl * sl)
        height = p / np.cos(lat) - prime_vertical
        lat = np.arctan2(z, p * (1.0 - WGS84_E2 * prime_vertical / (prime_vertical + height)))
    return Geodetic(float(lat), float(lon), float(height))


def enu_rotation(origin: Geodetic) -> np.ndarray:
    """Rows are the East, North, Up unit vectors expressed in ECEF."""
    sl, cl = np.sin(origin.lat), np.cos(origin.lat)
    so, co = np.sin(origin.lon), np.cos(origin.lon)
    return np.array(
        [
            [-so, co, 0.0],
            [-sl * co, -sl * so, cl],
            [cl * co, cl * so, sl],
        ]
    )


def ecef_to_enu_array(xyz, origin: Geodetic) -> np.ndarray:
    """Vectorized ECEF -> ENU for an array of shape (..., 3)."""
    xyz = np.asarray(xyz, dtype=float)
    if not np.all(np.isfinite(xyz)):
        raise GeometryError("non-finite ECEF input")
    return (xyz - geodetic_to_ecef(origin)) @ enu_rotation(origin).T


def enu_to_ecef_array(enu, origin: Geodetic) -> np.ndarray:
    enu = np.asarray(enu, dtype=float)
    if not np.all(np.isfinite(enu)):
        raise GeometryError("non-finite ENU input")
    return enu @ enu_rotation(origin) + geodetic_to_ecef(origin)


def ecef_to_enu(p: EcefPoint, origin: Geodetic) -> EnuPoint:
    return EnuPoint(*ecef_to_enu_array(p.as_array(), origin))


def enu_to_ecef(p: EnuPoint, origin: Geodetic) -> EcefPoint:
    return EcefPoint(*enu_to_ecef_array(p.as_array(), origin))


def sky_direction_enu(sat_enu, receiver_enu) -> tuple[np.ndarray, np.ndarray]:
    """Elevation and azimuth (clockwise from North) for ENU positions, vectorized."""
    d = np.asarray(sat_enu, dtype=float) - np.asarray(receiver_enu, dtype=float)
    rng = np.linalg.norm(d, axis=-1)
    if np.any(rng <= 1.0):
        raise GeometryError("satellite and receiver coincide")
    up = np.clip(d[..., 2] / rng, -1.0, 1.0)
    elevation = np.arcsin(up)
    azimuth = np.mod(np.arctan2(d[..., 0], d[..., 1]), 2.0 * np.pi)
    return elevation, azimuth


def sky_direction(sat: EcefPoint, receiver: EcefPoint, origin: Geodetic) -> SkyDirection:
    """Direction of ``sat`` as seen from ``receiver`` in the local ENU frame.

    Elevation is clamped to be non-negative only by geometry: a satellite below
    the horizon plane has negative elevation and should be masked upstream.
    """
    rot = enu_rotation(origin)
    el, az = sky_direction_enu(rot @ sat.as_array(), rot @ receiver.as_array())
    return SkyDirection(float(el), float(az))


def unit_los_enu(sat_enu, receiver_enu) -> np.ndarray:
    """Unit vector from satellite to receiver; the gradient of range wrt receiver position."""
    d = np.asarray(receiver_enu, dtype=float) - np.asarray(sat_enu, dtype=float)
    rng = np.linalg.norm(d, axis=-1, keepdims=True)
    if np.any(rng <= 1.0):
        raise GeometryError("satellite and receiver coincide")
    return d / rng


def unit_los(sat: EcefPoint, receiver: EnuPoint, origin: Geodetic) -> np.ndarray:
    return unit_los_enu(ecef_to_enu_array(sat.as_array(), origin), receiver.as_array())
