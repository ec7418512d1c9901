import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nextloc.geo import (
    MAX_LAT,
    MERCATOR_R,
    CoordinateScaler,
    DegenerateVarianceError,
    GeoDomainError,
    NormStats,
    denormalize,
    fit_norm_stats,
    from_mercator,
    geodesic_distance,
    mercator_scale_factor,
    normalize,
    to_mercator,
)

lons = st.floats(-180, 180, allow_nan=False)
lats = st.floats(-85.05, 85.05, allow_nan=False)


def test_origin_maps_to_zero():
    assert to_mercator(0.0, 0.0) == (0.0, 0.0)
    assert from_mercator(0.0, 0.0) == (0.0, 0.0)


def test_antimeridian_x_equals_r():
    x, y = to_mercator(180.0, 0.0)
    assert x == pytest.approx(20_037_508.34, abs=1e-6)
    assert y == 0.0


def test_xian_golden_values():
    # 40-digit evaluation of the projection formulas, recorded before the build
    x, y = to_mercator(108.94, 34.26)
    assert x == pytest.approx(12127145.325331111, abs=1e-6)
    assert y == pytest.approx(4063767.3319333591, abs=1e-6)


def test_inverse_at_y_equal_r():
    lon, lat = from_mercator(0.0, MERCATOR_R)
    assert lat == pytest.approx(85.05112877980659, abs=1e-12)
    assert MAX_LAT == pytest.approx(85.05112877980659, abs=1e-12)


@pytest.mark.parametrize("lat", [85.06, -86.0, 90.0, float("nan")])
def test_out_of_band_latitude_rejected(lat):
    with pytest.raises(GeoDomainError):
        to_mercator(0.0, lat)


def test_scale_factor_values():
    assert mercator_scale_factor(0.0) == 1.0
    assert mercator_scale_factor(60.0) == pytest.approx(2.0, rel=1e-12)
    assert mercator_scale_factor(34.26) == pytest.approx(1.2099337859589596, rel=1e-12)
    with pytest.raises(GeoDomainError):
        mercator_scale_factor(86.0)


def test_haversine_known_distances():
    assert geodesic_distance(10.0, 20.0, 10.0, 20.0) == 0.0
    assert geodesic_distance(0.0, 0.0, 180.0, 0.0) == pytest.approx(20015086.796020573, rel=1e-12)
    assert geodesic_distance(0.0, 0.0, 0.0, 0.01) == pytest.approx(1111.9492664455874, rel=1e-9)


@settings(max_examples=200, deadline=None)
@given(lons, lats)
def test_roundtrip_property(lon, lat):
    back = from_mercator(*to_mercator(lon, lat))
    assert abs(back.lon - lon) < 1e-9
    assert abs(back.lat - lat) < 1e-9


@settings(max_examples=100, deadline=None)
@given(lons, lats, st.floats(1e-6, 1.0), st.floats(1e-6, 1.0))
def test_projection_strictly_increasing(lon, lat, dlon, dlat):
    x0, y0 = to_mercator(lon, lat)
    x1, _ = to_mercator(min(lon + dlon, 180.0), lat)
    _, y1 = to_mercator(lon, min(lat + dlat, 85.05))
    assert (x1 > x0) or lon + dlon > 180.0 or lon == 180.0
    assert (y1 > y0) or lat == 85.05


@settings(max_examples=100, deadline=None)
@given(lons, lats, lons, lats)
def test_haversine_symmetric(a, b, c, d):
    assert geodesic_distance(a, b, c, d) == pytest.approx(geodesic_distance(c, d, a, b), abs=1e-6)


def test_fit_norm_stats_small_example():
    s = fit_norm_stats(np.array([[0.0, 0.0], [2.0, 2.0]]))
    assert (s.mean_x, s.mean_y, s.std_x, s.std_y) == (1.0, 1.0, 1.0, 1.0)


def test_degenerate_variance():
    with pytest.raises(DegenerateVarianceError):
        fit_norm_stats(np.array([[5.0, 1.0]] * 4))
    with pytest.raises(DegenerateVarianceError):
        fit_norm_stats(np.array([[1.0, 3.0], [2.0, 3.0]]))
    with pytest.raises(ValueError):
        NormStats(0.0, 0.0, 0.0, 1.0)


def test_gaussian_recovery_matches_streaming_reference(rng):
    xy = rng.normal([1000.0, -50.0], [30.0, 4.0], size=(10_000, 2))
    s = fit_norm_stats(xy)
    # Welford streaming mean/variance as an independent reference
    mean = np.zeros(2)
    m2 = np.zeros(2)
    for i, row in enumerate(xy, 1):
        delta = row - mean
        mean += delta / i
        m2 += delta * (row - mean)
    std = np.sqrt(m2 / len(xy))
    assert np.allclose(s.mean, mean, rtol=0, atol=1e-9)
    assert np.allclose(s.std, std, rtol=1e-10)
    se = np.array([30.0, 4.0]) / math.sqrt(len(xy))
    assert np.all(np.abs(s.mean - [1000.0, -50.0]) < 3 * se)


def test_normalize_identities():
    s = NormStats(10.0, 20.0, 2.0, 4.0)
    assert np.allclose(normalize([10.0, 20.0], s), [0.0, 0.0])
    assert np.allclose(normalize([12.0, 24.0], s), [1.0, 1.0])


@settings(max_examples=100, deadline=None)
@given(st.floats(-2e7, 2e7), st.floats(-2e7, 2e7))
def test_normalize_roundtrip(x, y):
    s = NormStats(1234.5, -987.25, 321.0, 77.5)
    back = denormalize(normalize([x, y], s), s)
    assert abs(back[0] - x) <= 1e-9 * max(1.0, abs(x)) and abs(back[1] - y) <= 1e-9 * max(1.0, abs(y))


@settings(max_examples=60, deadline=None)
@given(st.floats(0.01, 100), st.floats(0.01, 100), st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
def test_affine_equivariance(ax, ay, bx, by):
    xy = np.random.default_rng(0).normal(size=(50, 2)) * 800.0
    moved = xy * [ax, ay] + [bx, by]
    a = normalize(xy, fit_norm_stats(xy))
    b = normalize(moved, fit_norm_stats(moved))
    assert np.max(np.abs(a - b)) <= 1e-9


def test_normalized_fit_set_is_standard(rng):
    xy = rng.uniform(-3e4, 3e4, size=(500, 2)) + [1.2e7, 4e6]
    z = normalize(xy, fit_norm_stats(xy))
    assert np.all(np.abs(z.mean(axis=0)) < 1e-9)
    assert np.all(np.abs(z.std(axis=0) - 1) < 1e-9)


def test_coordinate_scaler_roundtrip(rng):
    xy = rng.normal(size=(40, 2)) * 100 + 5
    scaler = CoordinateScaler().fit(xy)
    z = scaler.transform(xy)
    assert np.allclose(scaler.inverse_transform(z), xy)
    assert np.allclose(z.mean(axis=0), 0.0, atol=1e-12)
