"""Coordinate-regression next-location prediction with a partially-frozen transformer."""

from .estimator import NextLocPredictor
from .geo import CoordinateScaler, GeoPoint, MercatorPoint, NormStats
from .ingest import CityDataset, Location, TrajectoryPair, VisitRecord

__version__ = "0.1.0"

__all__ = [
    "CityDataset",
    "CoordinateScaler",
    "GeoPoint",
    "Location",
    "MercatorPoint",
    "NextLocPredictor",
    "NormStats",
    "TrajectoryPair",
    "VisitRecord",
]
