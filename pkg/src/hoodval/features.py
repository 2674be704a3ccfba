"""Per-block feature rows: walkability, transit, urban fabric,
cultural/industry presence, security perception and living conditions.

Everything here produces one row per census block (the ego-place feature
matrix); egohood-level smoothing of these rows lives in the egohood
module.  Missing values are NaN throughout and stay missing: downstream
the tree learner routes them along learned default directions.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field

import numpy as np
from shapely.geometry import Point
from shapely.strtree import STRtree

from . import roadnet
from .egohood import FeatureTable, build_contiguity
from .geo import LocalProjection, haversine_many_m
from .geomodel import CensusBlock, CityDataset, HoodvalError

log = logging.getLogger(__name__)

# Maximum walking distance: one mile, which puts the score at ~0.986 for a
# 500 m walk and at e^-5 right at the limit.
DEFAULT_MAX_WALK_M = 1609.34

WALK_CATEGORIES = ("coffee", "entertainment", "shopping", "restaurant_bar",
                   "school", "grocery", "library", "park")


@dataclass
class WalkParams:
    max_walk_m: float = DEFAULT_MAX_WALK_M
    k_by_category: dict[str, int] = field(default_factory=lambda: {
        "restaurant_bar": 10, "shopping": 5, "park": 2,
    })
    default_k: int = 1

    def k_for(self, category: str) -> int:
        return self.k_by_category.get(category, self.default_k)


def decay_score(d_m: float, params: WalkParams) -> float:
    """Distance decay in [0, 1]: exp(-5 (d/M)^5) up to M, exactly 0 beyond.

    Stays ~1 for short walks, drops fast approaching M, and amenities past
    M contribute nothing.
    """
    if d_m < 0:
        raise ValueError(f"distance must be >= 0, got {d_m}")
    M = params.max_walk_m
    if d_m > M:
        return 0.0
    return math.exp(-5.0 * (d_m / M) ** 5)


def mean_decay_score(distances_m: list[float], params: WalkParams) -> float:
    """Mean decay over the k-nearest distances already selected; 0 when no
    amenity is reachable."""
    if not distances_m:
        return 0.0
    return float(np.mean([decay_score(d, params) for d in distances_m]))


def lum_entropy(class_areas) -> float:
    """Land-use mix: normalized entropy of the class area shares.

    1 at equal shares, 0 for single-use; NaN when nothing is classified.
    The 0*log(0) terms are dropped.
    """
    areas = np.asarray(class_areas, dtype=float)
    total = areas.sum()
    if total <= 0:
        return float("nan")
    p = areas / total
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum() / math.log(len(areas)))


_BRACKET_RANGE = re.compile(r"^(\d{4})_(\d{4})$")
_BRACKET_DECADE = re.compile(r"^(\d{4})s$")
_BRACKET_OPEN_LO = re.compile(r"^(?:pre|before)_(\d{4})$")
_BRACKET_OPEN_HI = re.compile(r"^(?:post|after)_(\d{4})$")


def bracket_midpoint(label: str) -> float:
    """Representative construction year for a census year bracket.

    Closed brackets map to their midpoint, decades to mid-decade, and the
    open ends to 9 years before / 5 years after the stated year; "pre_1919"
    therefore lands on 1910.
    """
    norm = label.strip().lower().replace("-", "_").replace(" ", "_")
    m = _BRACKET_RANGE.match(norm)
    if m:
        return (int(m.group(1)) + int(m.group(2))) / 2.0
    m = _BRACKET_DECADE.match(norm)
    if m:
        return int(m.group(1)) + 5.0
    m = _BRACKET_OPEN_LO.match(norm)
    if m:
        return int(m.group(1)) - 9.0
    m = _BRACKET_OPEN_HI.match(norm)
    if m:
        return int(m.group(1)) + 5.0
    if norm.isdigit():
        return float(norm)
    raise ValueError(f"unrecognized year bracket label: {label!r}")


def fabric_features(egohood_blocks: list[CensusBlock]) -> dict[str, float]:
    """Jacobs-style urban-fabric aggregates over the ego-place plus its
    egohood blocks (the block itself is part of its own egohood)."""
    areas = [b.area_m2 for b in egohood_blocks]
    out: dict[str, float] = {"avg_block_size_m2": float(np.mean(areas))}
    for name in ("buildings_total", "buildings_residential", "buildings_commercial",
                 "companies", "employees", "shops", "population"):
        out[name] = float(sum(getattr(b, name) for b in egohood_blocks))
    out["company_avg_size"] = out["employees"] / out["companies"] if out["companies"] > 0 else 0.0

    bracket_counts: dict[str, int] = {}
    for b in egohood_blocks:
        for label, n in b.buildings_by_year_bracket.items():
            bracket_counts[label] = bracket_counts.get(label, 0) + n
    total = sum(bracket_counts.values())
    if total > 0:
        years = np.array([bracket_midpoint(l) for l in bracket_counts])
        weights = np.array([bracket_counts[l] for l in bracket_counts], dtype=float)
        mean = float(np.average(years, weights=weights))
        var = float(np.average((years - mean) ** 2, weights=weights))
        out["building_year_mean"] = mean
        out["building_year_std"] = math.sqrt(var)
    else:
        out["building_year_mean"] = float("nan")
        out["building_year_std"] = float("nan")
    for label, n in bracket_counts.items():
        out[f"buildings_{label}"] = float(n)
    return out


def cultural_company_count(egohood_blocks: list[CensusBlock],
                           cultural_codes=None) -> float:
    from .geomodel import CULTURAL_ATECO_CODES

    codes = CULTURAL_ATECO_CODES if cultural_codes is None else cultural_codes
    return float(sum(n for b in egohood_blocks
                     for code, n in b.companies_by_ateco.items() if code in codes))


def security_mean(block: CensusBlock, points) -> float:
    """Average security score of the points inside the block polygon;
    NaN when no point falls inside."""
    poly = block.shape()
    scores = [p.score for p in points if poly.covers(Point(p.location))]
    if not scores:
        return float("nan")
    return float(np.mean(scores))


class FeatureComputer:
    """Computes the full per-block feature table for one city dataset.

    Shares one cutoff Dijkstra per block across all walk categories and
    one multi-source Dijkstra per station/industry layer across all
    blocks.  All shared state is read-only after construction.
    """

    def __init__(self, dataset: CityDataset, walk_params: WalkParams | None = None,
                 egohood_radius_m: float = 1000.0,
                 graph: roadnet.RoadGraph | None = None):
        self.dataset = dataset
        self.params = walk_params or WalkParams()
        self.egohood_radius_m = egohood_radius_m
        self.blocks = sorted(dataset.blocks, key=lambda b: b.id)
        self.block_ids = [b.id for b in self.blocks]

        self.graph = graph if graph is not None else roadnet.build_graph(dataset.road_edges)
        self.snap_index = roadnet.SnapIndex(self.graph)
        self.amenity_nodes = roadnet.snap_amenities(dataset.amenities, self.snap_index)
        self.block_nodes = [self.snap_index.snap(*b.centroid) for b in self.blocks]

        contiguity = build_contiguity(self.blocks, radius_m=egohood_radius_m)
        # egohood membership for aggregation includes the ego block itself
        self._egohood_members = [np.concatenate(([i], contiguity.neighbors(i))).astype(int)
                                 for i in range(len(self.blocks))]

        self._rail_map = self._station_map("rail_station")
        self._metro_map = self._station_map("metro_station")
        self._industry_map = self._station_map("industrial_area")

        clons = np.array([b.centroid[0] for b in self.blocks])
        clats = np.array([b.centroid[1] for b in self.blocks])
        self._proj = LocalProjection(float(clons.mean()), float(clats.mean()))
        self._landuse_polys = []
        for lu in dataset.landuse:
            ring = self._proj.project_ring(lu.polygon)
            from shapely.geometry import Polygon as ShPolygon

            self._landuse_polys.append((lu.klass, ShPolygon(ring)))
        self._landuse_tree = (STRtree([p for _, p in self._landuse_polys])
                              if self._landuse_polys else None)

        self._security_by_block = self._bucket_security_points()

        airports = [a.location for a in dataset.amenities if a.category == "airport"]
        self._airport_lons = np.array([p[0] for p in airports])
        self._airport_lats = np.array([p[1] for p in airports])
        stops = [a.location for a in dataset.amenities if a.category == "bus_stop"]
        self._bus_lons = np.array([p[0] for p in stops])
        self._bus_lats = np.array([p[1] for p in stops])

    def _station_map(self, category: str) -> dict[str, float]:
        nodes = self.amenity_nodes.get(category, [])
        if not nodes:
            return {}
        return roadnet.multi_source_distances(self.graph, sorted(set(nodes)))

    def _bucket_security_points(self) -> list[list]:
        buckets: list[list] = [[] for _ in self.blocks]
        polys = [b.shape() for b in self.blocks]
        tree = STRtree(polys)
        for p in self.dataset.security_points:
            pt = Point(p.location)
            for i in tree.query(pt):
                if polys[i].covers(pt):
                    buckets[i].append(p)
        return buckets

    # -- individual feature families -------------------------------------

    def category_walkability(self, block_index: int, category: str,
                             dist_map: dict[str, float] | None = None) -> float:
        """Mean decay score over the k nearest reachable amenities of the
        category; 0 when none is reachable within the walking limit."""
        if dist_map is None:
            dist_map = roadnet.network_distances(
                self.graph, self.block_nodes[block_index], self.params.max_walk_m)
        nodes = self.amenity_nodes.get(category, [])
        nearest = roadnet.k_nearest_from_map(
            dist_map, nodes, self.params.k_for(category), self.params.max_walk_m)
        return mean_decay_score(nearest, self.params)

    def transit_features(self, block_index: int) -> dict[str, float]:
        node = self.block_nodes[block_index]
        block = self.blocks[block_index]
        out = {
            "dist_rail_m": self._rail_map.get(node, float("nan")),
            "dist_metro_m": self._metro_map.get(node, float("nan")),
        }
        if self._airport_lons.size:
            d = haversine_many_m(block.centroid[0], block.centroid[1],
                                 self._airport_lons, self._airport_lats)
            out["dist_airport_m"] = float(d.min())
        else:
            out["dist_airport_m"] = float("nan")
        if self._bus_lons.size:
            d = haversine_many_m(block.centroid[0], block.centroid[1],
                                 self._bus_lons, self._bus_lats)
            out["bus_stops"] = float((d < self.egohood_radius_m).sum())
        else:
            out["bus_stops"] = 0.0
        return out

    def landuse_shares(self, block_index: int) -> dict[str, float]:
        """Intersection area (m^2) of each land-use class with the 1 km
        egohood buffer around the block centroid."""
        areas = {k: 0.0 for k in ("urban", "commercial", "green")}
        if self._landuse_tree is None:
            return areas
        cx, cy = self._proj.to_plane(*self.blocks[block_index].centroid)
        buffer = Point(cx, cy).buffer(self.egohood_radius_m, quad_segs=64)
        for i in self._landuse_tree.query(buffer):
            klass, poly = self._landuse_polys[i]
            inter = poly.intersection(buffer)
            if not inter.is_empty:
                areas[klass] += inter.area
        return areas

    def lum(self, block_index: int) -> float:
        shares = self.landuse_shares(block_index)
        return lum_entropy([shares["urban"], shares["commercial"], shares["green"]])

    def block_row(self, block_index: int) -> dict[str, float]:
        block = self.blocks[block_index]
        dist_map = roadnet.network_distances(
            self.graph, self.block_nodes[block_index], self.params.max_walk_m)
        row: dict[str, float] = {}
        for cat in WALK_CATEGORIES:
            row[f"walk_{cat}"] = self.category_walkability(block_index, cat, dist_map)
        row.update(self.transit_features(block_index))
        shares = self.landuse_shares(block_index)
        row["lum"] = lum_entropy([shares["urban"], shares["commercial"], shares["green"]])
        row["area_urban"] = shares["urban"]
        row["area_commercial"] = shares["commercial"]
        row["area_green"] = shares["green"]
        hood = [self.blocks[j] for j in self._egohood_members[block_index]]
        row.update(fabric_features(hood))
        row["cultural_companies"] = cultural_company_count(hood)
        row["heavy_industries"] = float(sum(b.heavy_industries for b in hood))
        row["dist_industrial_m"] = self._industry_map.get(
            self.block_nodes[block_index], float("nan"))
        row["security_mean"] = (float(np.mean([p.score for p in self._security_by_block[block_index]]))
                                if self._security_by_block[block_index] else float("nan"))
        row["avg_property_tax"] = block.avg_property_tax
        return row

    def feature_table(self) -> FeatureTable:
        rows = [self.block_row(i) for i in range(len(self.blocks))]
        columns = feature_column_order(rows)
        values = np.full((len(rows), len(columns)), np.nan)
        index = {c: j for j, c in enumerate(columns)}
        for i, row in enumerate(rows):
            for name, v in row.items():
                values[i, index[name]] = v
        if np.isinf(values).any():
            raise HoodvalError("internal: infinite value in feature table")
        return FeatureTable(block_ids=list(self.block_ids), columns=columns, values=values)


_BASE_COLUMNS = (
    [f"walk_{c}" for c in WALK_CATEGORIES]
    + ["dist_rail_m", "dist_metro_m", "dist_airport_m", "bus_stops",
       "lum", "area_urban", "area_commercial", "area_green",
       "avg_block_size_m2",
       "buildings_total", "buildings_residential", "buildings_commercial",
       "building_year_mean", "building_year_std"]
)
_TAIL_COLUMNS = [
    "company_avg_size", "companies", "employees", "shops", "population",
    "cultural_companies", "heavy_industries", "dist_industrial_m",
    "security_mean", "avg_property_tax",
]


def feature_column_order(rows: list[dict[str, float]]) -> list[str]:
    """Fixed column order: the documented base columns, then the
    data-dependent year-bracket counts (sorted), then the tail."""
    brackets = sorted({k for row in rows for k in row if k.startswith("buildings_")
                       and k not in _BASE_COLUMNS})
    return list(_BASE_COLUMNS) + brackets + list(_TAIL_COLUMNS)


def feature_schema_rows(columns: list[str]) -> list[tuple[str, str, str]]:
    """(name, unit, source layer) triplets for the features.schema sidecar."""
    out = []
    for c in columns:
        if c.startswith("walk_"):
            out.append((c, "score_0_1", "roads+amenities"))
        elif c in ("dist_rail_m", "dist_metro_m", "dist_industrial_m"):
            out.append((c, "m", "roads+amenities"))
        elif c == "dist_airport_m":
            out.append((c, "m", "amenities"))
        elif c == "bus_stops":
            out.append((c, "count", "amenities"))
        elif c == "lum":
            out.append((c, "entropy_0_1", "landuse"))
        elif c.startswith("area_"):
            out.append((c, "m2", "landuse"))
        elif c == "avg_block_size_m2":
            out.append((c, "m2", "blocks"))
        elif c in ("building_year_mean", "building_year_std"):
            out.append((c, "year", "blocks"))
        elif c == "company_avg_size":
            out.append((c, "employees_per_company", "blocks"))
        elif c == "security_mean":
            out.append((c, "score_0_10", "security"))
        elif c == "avg_property_tax":
            out.append((c, "euro_per_year", "blocks"))
        else:
            out.append((c, "count", "blocks"))
    return out
