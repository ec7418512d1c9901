"""Web Mercator projection, geodesic distance and coordinate normalization."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

# half the equatorial circumference used by EPSG:3857
MERCATOR_R = 20_037_508.34
MERCATOR_D = 180.0
EARTH_RADIUS_M = 6_371_000.0
# latitude at which y reaches +/- MERCATOR_R
MAX_LAT = math.degrees(2.0 * math.atan(math.exp(math.pi)) - math.pi / 2.0)


class GeoDomainError(ValueError):
    """Coordinate outside the band where Web Mercator is defined."""


class DegenerateVarianceError(ValueError):
    """Normalization statistics requested for data with no spread on an axis."""


class GeoPoint(NamedTuple):
    lon: float
    lat: float


class MercatorPoint(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class NormStats:
    mean_x: float
    mean_y: float
    std_x: float
    std_y: float

    def __post_init__(self):
        for value in (self.mean_x, self.mean_y, self.std_x, self.std_y):
            if not math.isfinite(value):
                raise ValueError("normalization statistics must be finite")
        if self.std_x <= 0 or self.std_y <= 0:
            raise DegenerateVarianceError("standard deviations must be positive")

    @property
    def mean(self) -> np.ndarray:
        return np.array([self.mean_x, self.mean_y])

    @property
    def std(self) -> np.ndarray:
        return np.array([self.std_x, self.std_y])


def _check_lat(lat) -> None:
    lat = np.asarray(lat, dtype=float)
    if not np.all(np.isfinite(lat)) or np.any(np.abs(lat) > MAX_LAT):
        raise GeoDomainError(f"latitude outside Mercator band (|lat| <= {MAX_LAT:.5f})")


def to_mercator(lon, lat):
    """Project longitude/latitude in degrees to Web Mercator meters.

    Accepts scalars or arrays; scalars return a :class:`MercatorPoint`.
    """
    _check_lat(lat)
    lon_a = np.asarray(lon, dtype=float)
    if not np.all(np.isfinite(lon_a)) or np.any(np.abs(lon_a) > 180.0):
        raise GeoDomainError("longitude outside [-180, 180]")
    lat_rad = np.radians(np.asarray(lat, dtype=float))
    x = lon_a * MERCATOR_R / MERCATOR_D
    # ln(tan(pi/4 + lat/2)) written as asinh(tan(lat)): same function, exact at 0
    # and better conditioned; R/D per degree == R/pi per radian
    y = np.arcsinh(np.tan(lat_rad)) * MERCATOR_R / np.pi
    if x.ndim == 0:
        return MercatorPoint(float(x), float(y))
    return x, y


def from_mercator(x, y):
    """Inverse of :func:`to_mercator`."""
    x_a = np.asarray(x, dtype=float)
    y_a = np.asarray(y, dtype=float)
    lon = x_a * MERCATOR_D / MERCATOR_R
    # 2*atan(exp(t)) - pi/2 == atan(sinh(t))
    lat = np.degrees(np.arctan(np.sinh(y_a * np.pi / MERCATOR_R)))
    if lon.ndim == 0:
        return GeoPoint(float(lon), float(lat))
    return lon, lat


def mercator_scale_factor(lat):
    """Local length inflation 1/cos(lat) of the Mercator projection."""
    _check_lat(lat)
    lat_a = np.asarray(lat, dtype=float)
    out = 1.0 / np.cos(np.radians(lat_a))
    return float(out) if out.ndim == 0 else out


def geodesic_distance(lon1, lat1, lon2, lat2):
    """Haversine distance in meters on a sphere of radius 6,371 km."""
    phi1 = np.radians(np.asarray(lat1, dtype=float))
    phi2 = np.radians(np.asarray(lat2, dtype=float))
    d_phi = phi2 - phi1
    d_lambda = np.radians(np.asarray(lon2, dtype=float) - np.asarray(lon1, dtype=float))
    a = np.sin(d_phi / 2.0) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(d_lambda / 2.0) ** 2
    out = 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))
    return float(out) if out.ndim == 0 else out


def fit_norm_stats(xy) -> NormStats:
    """Per-axis mean and population standard deviation of an (n, 2) array of meters."""
    xy = np.asarray(xy, dtype=float)
    if xy.ndim != 2 or xy.shape[1] != 2:
        raise ValueError(f"expected an (n, 2) array, got shape {xy.shape}")
    if len(xy) < 2:
        raise DegenerateVarianceError("need at least two records to fit statistics")
    mean = xy.mean(axis=0)
    std = xy.std(axis=0)
    if np.any(std <= 0):
        raise DegenerateVarianceError("coordinates have zero spread on at least one axis")
    return NormStats(float(mean[0]), float(mean[1]), float(std[0]), float(std[1]))


def normalize(xy, stats: NormStats) -> np.ndarray:
    return (np.asarray(xy, dtype=float) - stats.mean) / stats.std


def denormalize(xy_norm, stats: NormStats) -> np.ndarray:
    return np.asarray(xy_norm, dtype=float) * stats.std + stats.mean


class CoordinateScaler(TransformerMixin, BaseEstimator):
    """Standardize Mercator coordinates with statistics fit over visit records.

    Unlike a generic scaler this refuses degenerate axes instead of silently
    dividing by one.
    """

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        self.stats_ = fit_norm_stats(X)
        self.n_features_in_ = 2
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        return normalize(check_array(X, dtype=float), self.stats_)

    def inverse_transform(self, X):
        check_is_fitted(self, "stats_")
        return denormalize(check_array(X, dtype=float), self.stats_)
