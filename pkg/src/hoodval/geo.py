"""Small geodesic helpers shared by the feature and fold machinery.

All coordinates are (lon, lat) in degrees, WGS84-ish.  City-scale work is
done either with great-circle (haversine) distances or on a local
equirectangular plane in meters; both use the same mean Earth radius so
they agree to well below a meter at the scales we care about.
"""

from __future__ import annotations

import math

import numpy as np

EARTH_RADIUS_M = 6371000.0


def haversine_m(lon1: float, lat1: float, lon2: float, lat2: float) -> float:
    """Great-circle distance in meters between two (lon, lat) points."""
    phi1 = math.radians(lat1)
    phi2 = math.radians(lat2)
    dphi = phi2 - phi1
    dlam = math.radians(lon2 - lon1)
    a = math.sin(dphi / 2.0) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(a)))


def haversine_many_m(lon: float, lat: float, lons: np.ndarray, lats: np.ndarray) -> np.ndarray:
    """Vectorized haversine from one point to arrays of points."""
    phi1 = math.radians(lat)
    phi2 = np.radians(lats)
    dphi = phi2 - phi1
    dlam = np.radians(lons) - math.radians(lon)
    a = np.sin(dphi / 2.0) ** 2 + math.cos(phi1) * np.cos(phi2) * np.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.minimum(1.0, np.sqrt(a)))


def pairwise_haversine_m(lons: np.ndarray, lats: np.ndarray) -> np.ndarray:
    """Full n x n great-circle distance matrix in meters."""
    phi = np.radians(np.asarray(lats, dtype=float))
    lam = np.radians(np.asarray(lons, dtype=float))
    dphi = phi[:, None] - phi[None, :]
    dlam = lam[:, None] - lam[None, :]
    a = np.sin(dphi / 2.0) ** 2 + np.cos(phi)[:, None] * np.cos(phi)[None, :] * np.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.minimum(1.0, np.sqrt(a)))


class LocalProjection:
    """Equirectangular projection onto a meter plane around a reference point.

    Adequate for single-city extents (tens of km); distances distort by
    well under 0.1% there, and we only use the plane for areas, tiling and
    point-to-polygon distances, never for the contracted great-circle
    predicates.
    """

    def __init__(self, ref_lon: float, ref_lat: float):
        self.ref_lon = float(ref_lon)
        self.ref_lat = float(ref_lat)
        self._coslat = math.cos(math.radians(self.ref_lat))

    def to_plane(self, lon, lat):
        """(lon, lat) degrees -> (x, y) meters. Accepts scalars or arrays."""
        x = np.radians(np.asarray(lon, dtype=float) - self.ref_lon) * EARTH_RADIUS_M * self._coslat
        y = np.radians(np.asarray(lat, dtype=float) - self.ref_lat) * EARTH_RADIUS_M
        if x.ndim == 0:
            return float(x), float(y)
        return x, y

    def to_lonlat(self, x, y):
        """(x, y) meters -> (lon, lat) degrees. Accepts scalars or arrays."""
        lon = self.ref_lon + np.degrees(np.asarray(x, dtype=float) / (EARTH_RADIUS_M * self._coslat))
        lat = self.ref_lat + np.degrees(np.asarray(y, dtype=float) / EARTH_RADIUS_M)
        if lon.ndim == 0:
            return float(lon), float(lat)
        return lon, lat

    def project_ring(self, ring):
        """Project a sequence of (lon, lat) pairs to plane coordinates."""
        arr = np.asarray(ring, dtype=float)
        x, y = self.to_plane(arr[:, 0], arr[:, 1])
        return np.column_stack([x, y])


def ring_area_m2(ring) -> float:
    """Planar shoelace area of a (lon, lat) ring, in square meters.

    Projects around the ring's own bounding-box center, so the value is a
    local approximation good to city-block scale.
    """
    arr = np.asarray(ring, dtype=float)
    proj = LocalProjection(arr[:, 0].mean(), arr[:, 1].mean())
    xy = proj.project_ring(arr)
    x, y = xy[:, 0], xy[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))
