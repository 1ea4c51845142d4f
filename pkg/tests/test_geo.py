import math

import numpy as np
import pytest

from credgnss import geo
from credgnss.geo import EcefPoint, EnuPoint, Geodetic


def _rot_oracle(lat, lon):
    # rows: East, North, Up
    return np.array([
        [-math.sin(lon), math.cos(lon), 0.0],
        [-math.sin(lat) * math.cos(lon), -math.sin(lat) * math.sin(lon), math.cos(lat)],
        [math.cos(lat) * math.cos(lon), math.cos(lat) * math.sin(lon), math.sin(lat)],
    ])


def test_wgs84_reference_points():
    # equator/prime meridian and pole: x = a, z = b = a (1 - f)
    assert np.allclose(geo.geodetic_to_ecef(Geodetic(0.0, 0.0, 0.0)), [6378137.0, 0.0, 0.0], atol=1e-9)
    b = 6378137.0 * (1 - 1 / 298.257223563)
    assert np.allclose(geo.geodetic_to_ecef(Geodetic(math.pi / 2, 0.0, 0.0)), [0.0, 0.0, b], atol=1e-6)


def test_origin_maps_to_zero(origin):
    p = EcefPoint(*geo.geodetic_to_ecef(origin))
    assert np.allclose(geo.ecef_to_enu(p, origin).as_array(), 0.0, atol=1e-9)


def test_displacement_along_up(origin):
    up = _rot_oracle(origin.lat, origin.lon)[2]
    p = EcefPoint(*(geo.geodetic_to_ecef(origin) + 100.0 * up))
    assert np.allclose(geo.ecef_to_enu(p, origin).as_array(), [0, 0, 100.0], atol=1e-6)
    # the geodetic up direction also means the same point is 100 m higher
    g = geo.ecef_to_geodetic(p.as_array())
    assert g.height == pytest.approx(origin.height + 100.0, abs=1e-6)


def test_round_trip(origin, rng):
    enu = rng.uniform(-50e3, 50e3, size=(1000, 3))
    ecef = geo.enu_to_ecef_array(enu, origin)
    back = geo.enu_to_ecef_array(geo.ecef_to_enu_array(ecef, origin), origin)
    assert np.max(np.abs(back - ecef)) < 1e-9 * 1e3  # float64 floor at 6e6 m magnitude
    assert np.max(np.abs(geo.ecef_to_enu_array(ecef, origin) - enu)) < 1e-6


def test_round_trip_scalar_api(origin):
    p = EnuPoint(120.0, -40.0, 3.0)
    q = geo.ecef_to_enu(geo.enu_to_ecef(p, origin), origin)
    assert np.allclose(q.as_array(), p.as_array(), atol=1e-9)


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        EcefPoint(float("nan"), 0.0, 0.0)
    with pytest.raises(ValueError):
        Geodetic(2.0, 0.0, 0.0)


def test_overhead_and_north_horizon(origin):
    el, az = geo.sky_direction_enu(np.array([0.0, 0.0, 2e7]), np.zeros(3))
    assert el == pytest.approx(math.pi / 2)
    el, az = geo.sky_direction_enu(np.array([0.0, 2e7, 0.0]), np.zeros(3))
    assert abs(el) < 1e-9 and abs(az) < 1e-9
    el, az = geo.sky_direction_enu(np.array([2e7, 0.0, 0.0]), np.zeros(3))
    assert az == pytest.approx(math.pi / 2)  # clockwise from North


def test_sky_direction_matches_rotation_oracle(origin, rng):
    rot = _rot_oracle(origin.lat, origin.lon)
    o = geo.geodetic_to_ecef(origin)
    for _ in range(200):
        rx = o + rng.normal(scale=500.0, size=3)
        sat = o + rng.normal(size=3) * 2e7
        d = rot @ (sat - rx)
        d /= np.linalg.norm(d)
        el_ref = math.asin(d[2])
        az_ref = math.atan2(d[0], d[1]) % (2 * math.pi)
        sd = geo.sky_direction(EcefPoint(*sat), EcefPoint(*rx), origin)
        assert abs(sd.elevation - el_ref) < 1e-12
        assert abs(sd.azimuth - az_ref) < 1e-12 or abs(abs(sd.azimuth - az_ref) - 2 * math.pi) < 1e-12


def test_coincident_points_rejected(origin):
    p = EcefPoint(*geo.geodetic_to_ecef(origin))
    with pytest.raises(geo.GeometryError):
        geo.sky_direction(p, p, origin)
    with pytest.raises(geo.GeometryError):
        geo.unit_los(p, EnuPoint(0.0, 0.0, 0.0), origin)


def test_unit_los_overhead(origin):
    sat = geo.enu_to_ecef(EnuPoint(0.0, 0.0, 2e7), origin)
    assert np.allclose(geo.unit_los(sat, EnuPoint(0.0, 0.0, 0.0), origin), [0, 0, -1], atol=1e-12)


def _range_diff(d, step):
    # |d + step| - |d - step| without cancelling two 2e7 m norms
    return np.dot(2.0 * step, 2.0 * d) / (np.linalg.norm(d + step) + np.linalg.norm(d - step))


def test_unit_los_norm_and_gradient(rng):
    sats = rng.normal(size=(1000, 3)) * 2e7
    rx = rng.normal(scale=100.0, size=(1000, 3))
    u = geo.unit_los_enu(sats, rx)
    assert np.max(np.abs(np.linalg.norm(u, axis=1) - 1.0)) < 1e-12
    h = 1e-3
    for k in range(20):
        fd = np.array([_range_diff(rx[k] - sats[k], h * e) / (2 * h) for e in np.eye(3)])
        assert np.max(np.abs(fd - u[k])) < 1e-6
