"""Synthetic city generator for end-to-end testing.

Lays out a rectangular grid of census blocks with a lattice road network,
category-stratified amenities placed on road nodes, a three-class
land-use mosaic, security survey points and property listings.  Listing
prices follow a recorded linear oracle over a few property attributes and
a few neighborhood feature columns; the neighborhood columns are computed
by this package's own feature pipeline on the generated layers, so with
zero noise a full rerun of the pipeline reproduces every price exactly.

The oracle weights, the standardization constants and the achieved
neighborhood variance share are written to oracle.json next to the
layers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from . import egohood as eh
from .features import FeatureComputer
from .geo import EARTH_RADIUS_M, ring_area_m2
from .geomodel import (
    BOOLEAN_ATTRIBUTES,
    CATEGORICAL_ATTRIBUTES,
    NUMERIC_ATTRIBUTES,
    BlockIndex,
    CityDataset,
    HoodvalError,
    Listing,
    assign_listings,
    load_amenities,
    load_blocks,
    load_landuse,
    load_roads,
    load_security,
)

DEFAULT_DENSITIES = {
    "coffee": 0.25,
    "entertainment": 0.15,
    "shopping": 0.35,
    "restaurant_bar": 0.6,
    "school": 0.2,
    "grocery": 0.3,
    "library": 0.1,
    "park": 0.25,
    "metro_station": 0.03,
    "rail_station": 0.015,
    "airport": 0.0008,
    "bus_stop": 1.0,
    "industrial_area": 0.02,
}

# categories that must exist at all when their density is positive
_AT_LEAST_ONE = {"metro_station", "rail_station", "airport", "industrial_area"}

_CATEGORICAL_LEVELS = {
    "energy_certification": ["A", "B", "C", "D", "E", "F", "G"],
    "heating_type": ["autonomous", "central"],
    "fixtures": ["single_glass", "double_glass"],
    "sun_exposition": ["north", "south", "east", "west"],
    "kitchen_type": ["habitable", "kitchenette", "open"],
    "place_type": ["city_center", "suburb", "hamlet"],
    "property_class": ["economic", "medium", "luxury"],
    "property_type": ["residential", "mixed"],
    "condition": ["new", "good", "to_renovate"],
    "property_kind": ["apartment", "apartment", "apartment", "attic",
                      "detached", "semi_detached", "loft", "open_space"],
}

_YEAR_BRACKETS = ["pre_1919", "1919_1945", "1946_1960", "1961_1975",
                  "1976_1990", "1991_2005", "post_2005"]

_ORACLE_PROPERTY_TERMS = ["property:square_meters", "property:rooms",
                          "property:bathrooms", "property:garden",
                          "property:terrace"]
_ORACLE_HOOD_CANDIDATES = [
    "ego-place:walk_restaurant_bar", "ego-place:walk_shopping",
    "ego-place:lum", "ego-place:security_mean", "egohood:population",
    "egohood:walk_park", "ego-place:population", "egohood:security_mean",
]


@dataclass
class SynthSpec:
    seed: int = 0
    blocks: int = 400
    listings: int = 3000
    cell_side_m: float = 500.0
    origin: tuple[float, float] = (7.6, 45.0)
    amenity_density: dict[str, float] = field(
        default_factory=lambda: dict(DEFAULT_DENSITIES))
    noise_scale: float = 0.02
    neighborhood_share: float = 0.6
    price_std: float = 120000.0
    intercept: float = 450000.0

    def __post_init__(self):
        if self.blocks < 9 or self.listings < 1:
            raise HoodvalError("need at least 9 blocks and 1 listing")
        if not (0.0 < self.neighborhood_share < 1.0):
            raise HoodvalError("neighborhood share must lie in (0, 1)")
        if self.noise_scale < 0:
            raise HoodvalError("noise scale must be non-negative")


class _Grid:
    def __init__(self, spec: SynthSpec):
        self.cols = int(math.ceil(math.sqrt(spec.blocks)))
        self.rows = int(math.ceil(spec.blocks / self.cols))
        self.n = spec.blocks
        lon0, lat0 = spec.origin
        deg = 180.0 / math.pi
        self.dlat = spec.cell_side_m / EARTH_RADIUS_M * deg
        self.dlon = spec.cell_side_m / (EARTH_RADIUS_M * math.cos(math.radians(lat0))) * deg
        self.lon0, self.lat0 = lon0, lat0

    def corner(self, i: int, j: int) -> tuple[float, float]:
        return (self.lon0 + j * self.dlon, self.lat0 + i * self.dlat)

    def cells(self):
        k = 0
        for i in range(self.rows):
            for j in range(self.cols):
                if k >= self.n:
                    return
                yield k, i, j
                k += 1

    def cell_ring(self, i: int, j: int) -> list[tuple[float, float]]:
        a = self.corner(i, j)
        b = self.corner(i, j + 1)
        c = self.corner(i + 1, j + 1)
        d = self.corner(i + 1, j)
        return [a, b, c, d, a]

    def urbanity(self, i: int, j: int) -> float:
        """Smooth 0..1 field peaking mid-grid, so population, land use and
        security vary spatially instead of being i.i.d. noise."""
        ci, cj = (self.rows - 1) / 2.0, (self.cols - 1) / 2.0
        r = math.hypot((i - ci) / max(self.rows, 1), (j - cj) / max(self.cols, 1))
        wave = 0.15 * math.sin(2.1 * i) * math.cos(1.7 * j)
        return min(1.0, max(0.0, math.exp(-3.0 * r * r) + wave + 0.1))


def _write_blocks(path: Path, grid: _Grid, rng) -> list[dict]:
    feats = []
    for k, i, j in grid.cells():
        ring = grid.cell_ring(i, j)
        u = grid.urbanity(i, j)
        pop = int(rng.poisson(40 + 400 * u))
        total = int(rng.integers(5, 20) + 30 * u)
        resident = int(round(total * rng.uniform(0.5, 0.9)))
        commercial = min(total - resident, int(rng.integers(0, 4) + 6 * u))
        companies = int(rng.poisson(3 + 25 * u))
        employees = int(companies * rng.uniform(2.0, 12.0))
        shops = int(rng.poisson(1 + 10 * u))
        heavy = int(rng.random() < 0.06 * (1.2 - u)) * int(rng.integers(1, 3))
        labels = sorted(rng.choice(len(_YEAR_BRACKETS),
                                   size=int(rng.integers(2, 5)), replace=False).tolist())
        brackets = {_YEAR_BRACKETS[b]: int(rng.integers(1, 1 + max(2, total // 2)))
                    for b in labels}
        ateco: dict[str, int] = {}
        for code in ("58", "62", "63", "71", "73", "74", "90", "91",
                     "10", "41", "47", "68"):
            if rng.random() < 0.25 * (0.4 + u):
                ateco[code] = int(rng.integers(1, 5))
        props = {
            "id": f"b{i:03d}_{j:03d}",
            "area_m2": ring_area_m2(ring),
            "centroid": [(ring[0][0] + ring[1][0]) / 2.0,
                         (ring[0][1] + ring[2][1]) / 2.0],
            "population": pop,
            "buildings_total": total,
            "buildings_residential": resident,
            "buildings_commercial": max(commercial, 0),
            "companies": companies,
            "employees": employees,
            "shops": shops,
            "heavy_industries": heavy,
            "buildings_by_year_bracket": brackets,
            "companies_by_ateco": ateco,
            "avg_property_tax": round(600.0 + 2200.0 * u + rng.uniform(0, 300), 2),
            "company_avg_size": round(employees / companies, 3) if companies else 0.0,
        }
        feats.append({"type": "Feature", "properties": props,
                      "geometry": {"type": "Polygon", "coordinates": [ring]}})
    doc = {"type": "FeatureCollection", "features": feats}
    path.write_text(json.dumps(doc, sort_keys=True) + "\n")
    return feats


def _write_roads(path: Path, grid: _Grid) -> list[str]:
    """Full lattice over the cell corners; returns the node id list."""
    lines = ["edge_id,node_a_id,node_b_id,lon_a,lat_a,lon_b,lat_b,length_m"]
    node_ids = []
    from .geo import haversine_m

    for i in range(grid.rows + 1):
        for j in range(grid.cols + 1):
            node_ids.append(f"n{i:03d}_{j:03d}")
    for i in range(grid.rows + 1):
        for j in range(grid.cols + 1):
            a = grid.corner(i, j)
            if j < grid.cols:
                b = grid.corner(i, j + 1)
                lines.append(f"eh{i:03d}_{j:03d},n{i:03d}_{j:03d},n{i:03d}_{j + 1:03d},"
                             f"{a[0]!r},{a[1]!r},{b[0]!r},{b[1]!r},"
                             f"{haversine_m(a[0], a[1], b[0], b[1])!r}")
            if i < grid.rows:
                c = grid.corner(i + 1, j)
                lines.append(f"ev{i:03d}_{j:03d},n{i:03d}_{j:03d},n{i + 1:03d}_{j:03d},"
                             f"{a[0]!r},{a[1]!r},{c[0]!r},{c[1]!r},"
                             f"{haversine_m(a[0], a[1], c[0], c[1])!r}")
    path.write_text("\n".join(lines) + "\n")
    return node_ids


def _write_amenities(path: Path, grid: _Grid, spec: SynthSpec, rng) -> None:
    lines = ["id,category,lon,lat,wkt_polygon"]
    for cat in sorted(spec.amenity_density):
        dens = spec.amenity_density[cat]
        count = int(round(dens * spec.blocks))
        if dens > 0 and cat in _AT_LEAST_ONE:
            count = max(count, 1)
        for k in range(count):
            i = int(rng.integers(0, grid.rows + 1))
            j = int(rng.integers(0, grid.cols + 1))
            lon, lat = grid.corner(i, j)
            lines.append(f"a_{cat}_{k:04d},{cat},{lon!r},{lat!r},")
    path.write_text("\n".join(lines) + "\n")


def _write_landuse(path: Path, grid: _Grid, rng) -> None:
    feats = []
    for k, i, j in grid.cells():
        u = grid.urbanity(i, j)
        shares = np.array([
            0.30 + 0.45 * u,
            0.10 + 0.25 * abs(math.cos(0.9 * j)),
            0.20 + 0.40 * (1.0 - u),
        ])
        shares = np.maximum(shares, 0.05)
        shares = shares / shares.sum()
        x0, y0 = grid.corner(i, j)
        x = x0
        for klass, w in zip(("urban", "commercial", "green"), shares):
            x1 = x + float(w) * grid.dlon
            ring = [(x, y0), (x1, y0), (x1, y0 + grid.dlat), (x, y0 + grid.dlat), (x, y0)]
            feats.append({"type": "Feature",
                          "properties": {"klass": klass},
                          "geometry": {"type": "Polygon", "coordinates": [ring]}})
            x = x1
    doc = {"type": "FeatureCollection", "features": feats}
    path.write_text(json.dumps(doc, sort_keys=True) + "\n")


def _write_security(path: Path, grid: _Grid, rng) -> None:
    lines = ["lon,lat,score"]
    for k, i, j in grid.cells():
        x0, y0 = grid.corner(i, j)
        u = grid.urbanity(i, j)
        for _ in range(int(rng.integers(1, 4))):
            lon = x0 + grid.dlon * rng.uniform(0.1, 0.9)
            lat = y0 + grid.dlat * rng.uniform(0.1, 0.9)
            score = float(np.clip(3.0 + 4.0 * u + rng.normal(0.0, 1.2), 0.1, 9.9))
            lines.append(f"{lon!r},{lat!r},{score!r}")
    path.write_text("\n".join(lines) + "\n")


def _make_listings(grid: _Grid, spec: SynthSpec, blocks, rng) -> list[Listing]:
    pop = np.array([b.population for b in blocks], dtype=float)
    if pop.sum() <= 0:
        pop = np.ones(len(blocks))
    p = pop / pop.sum()
    cell_of = {b.id: (int(b.id[1:4]), int(b.id[5:8])) for b in blocks}
    picks = rng.choice(len(blocks), size=spec.listings, p=p)

    listings = []
    for n, bi in enumerate(picks):
        b = blocks[int(bi)]
        i, j = cell_of[b.id]
        x0, y0 = grid.corner(i, j)
        lon = x0 + grid.dlon * rng.uniform(0.05, 0.95)
        lat = y0 + grid.dlat * rng.uniform(0.05, 0.95)

        attrs: dict[str, object] = {}
        attrs["square_meters"] = round(float(np.exp(rng.normal(4.35, 0.35))), 1)
        attrs["rooms"] = float(rng.integers(1, 7))
        attrs["bathrooms"] = float(rng.integers(1, 4))
        attrs["bedrooms"] = max(attrs["rooms"] - float(rng.integers(1, 3)), 0.0)
        attrs["built_year"] = (None if rng.random() < 0.10
                               else float(rng.integers(1900, 2021)))
        attrs["monthly_expenses"] = (None if rng.random() < 0.15
                                     else round(float(np.exp(rng.normal(4.6, 0.5))), 2))
        attrs["property_taxes"] = (None if rng.random() < 0.08
                                   else round(float(rng.uniform(500, 4000)), 2))
        attrs["floor_number"] = (None if rng.random() < 0.10
                                 else float(rng.integers(0, 11)))
        for name, prob in (("garden", 0.25), ("furnished", 0.40), ("terrace", 0.35),
                           ("spa", 0.05), ("cellar", 0.30), ("garage", 0.35),
                           ("fireplace", 0.10)):
            attrs[name] = None if rng.random() < 0.05 else bool(rng.random() < prob)
        for name in CATEGORICAL_ATTRIBUTES:
            levels = _CATEGORICAL_LEVELS[name]
            value = levels[int(rng.integers(0, len(levels)))]
            if name not in ("property_kind", "condition") and rng.random() < 0.03:
                value = None
            attrs[name] = value

        posted = date(2023, 1, 1) + timedelta(days=int(rng.integers(0, 365)))
        listings.append(Listing(id=f"L{n:06d}", location=(lon, lat),
                                asked_price=None, posted_date=posted,
                                property_attributes=attrs))
    return listings


def reconstruct_prices(oracle: dict, labels: list[str], x: np.ndarray) -> np.ndarray:
    """Apply the recorded oracle terms to a design matrix; the term order
    and operation order match generation, so zero-noise prices round-trip
    bit for bit."""
    col = {lab: j for j, lab in enumerate(labels)}
    price = np.full(x.shape[0], float(oracle["intercept"]))
    for term in oracle["terms"]:
        j = col[term["column"]]
        price += float(term["weight"]) * (x[:, j] - float(term["mean"])) / float(term["std"])
    return price


def _price_oracle(design: eh.DesignMatrix, spec: SynthSpec, rng) -> tuple[np.ndarray, dict]:
    labels = design.labels
    col = {lab: j for j, lab in enumerate(labels)}

    def usable(lab: str) -> bool:
        if lab not in col:
            return False
        v = design.x[:, col[lab]]
        return bool(np.isfinite(v).all() and float(np.std(v)) > 1e-9)

    prop_terms = [lab for lab in _ORACLE_PROPERTY_TERMS if usable(lab)]
    hood_terms = [lab for lab in _ORACLE_HOOD_CANDIDATES if usable(lab)][:6]
    if len(prop_terms) < 3 or len(hood_terms) < 3:
        raise HoodvalError("synthetic city lacks usable oracle columns; "
                           "raise amenity densities or the block count")

    def standardized_sum(terms):
        w = rng.uniform(0.6, 1.4, size=len(terms))
        parts = []
        for lab, wk in zip(terms, w):
            v = design.x[:, col[lab]]
            parts.append({"column": lab, "mean": float(v.mean()),
                          "std": float(v.std()), "weight": float(wk)})
        total = np.zeros(design.x.shape[0])
        for t in parts:
            total += t["weight"] * (design.x[:, col[t["column"]]] - t["mean"]) / t["std"]
        return total, parts

    f0, prop_parts = standardized_sum(prop_terms)
    g0, hood_parts = standardized_sum(hood_terms)
    s = spec.neighborhood_share
    t_var = spec.price_std ** 2
    a = math.sqrt((1.0 - s) * t_var / float(np.var(f0)))
    b = math.sqrt(s * t_var / float(np.var(g0)))
    for t in prop_parts:
        t["weight"] *= a
    for t in hood_parts:
        t["weight"] *= b

    oracle = {
        "seed": spec.seed,
        "noise_scale": spec.noise_scale,
        "intercept": spec.intercept,
        "price_std": spec.price_std,
        "neighborhood_share_target": s,
        "terms": prop_parts + hood_parts,
        "groups": {"property": prop_terms, "neighborhood": hood_terms},
    }
    base = reconstruct_prices(oracle, labels, design.x)
    low = float(base.min())
    if low <= 1000.0:
        oracle["intercept"] = spec.intercept + (1000.0 - low)
        base = reconstruct_prices(oracle, labels, design.x)

    signal_f = a * f0
    signal_g = b * g0
    oracle["neighborhood_share_achieved"] = float(
        np.var(signal_g) / np.var(signal_f + signal_g))

    if spec.noise_scale > 0:
        price = base + spec.noise_scale * spec.price_std * rng.standard_normal(base.shape[0])
        price = np.maximum(price, 1000.0)
    else:
        price = base
    return price, oracle


def _write_listings(path: Path, listings: list[Listing]) -> None:
    cols = (["id", "lon", "lat", "asked_price", "posted_date"]
            + list(NUMERIC_ATTRIBUTES) + list(BOOLEAN_ATTRIBUTES)
            + list(CATEGORICAL_ATTRIBUTES))
    lines = [",".join(cols)]
    for l in listings:
        rec = [l.id, repr(l.location[0]), repr(l.location[1]),
               eh.format_cell(float(l.asked_price)), l.posted_date.isoformat()]
        a = l.property_attributes
        for name in NUMERIC_ATTRIBUTES:
            v = a.get(name)
            rec.append("" if v is None else repr(float(v)))
        for name in BOOLEAN_ATTRIBUTES:
            v = a.get(name)
            rec.append("" if v is None else ("true" if v else "false"))
        for name in CATEGORICAL_ATTRIBUTES:
            v = a.get(name)
            rec.append("" if v is None else str(v))
        lines.append(",".join(rec))
    path.write_text("\n".join(lines) + "\n")


def synth_city(spec: SynthSpec, out_dir) -> dict[str, Path]:
    """Generate all six layers plus oracle.json and city.cfg in out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    grid = _Grid(spec)

    paths = {name: out / fname for name, fname in (
        ("blocks", "blocks.geojson"), ("roads", "roads.csv"),
        ("amenities", "amenities.csv"), ("landuse", "landuse.geojson"),
        ("security", "security.csv"), ("listings", "listings.csv"),
    )}
    _write_blocks(paths["blocks"], grid, rng)
    _write_roads(paths["roads"], grid)
    _write_amenities(paths["amenities"], grid, spec, rng)
    _write_landuse(paths["landuse"], grid, rng)
    _write_security(paths["security"], grid, rng)

    # reload the context layers so prices rest on exactly what a consumer
    # of the files will see (float round-trip included)
    blocks = load_blocks(paths["blocks"])
    dataset = CityDataset(
        blocks=blocks,
        listings=[],
        amenities=load_amenities(paths["amenities"]),
        landuse=load_landuse(paths["landuse"]),
        security_points=load_security(paths["security"]),
        road_edges=load_roads(paths["roads"]),
    )
    listings = _make_listings(grid, spec, sorted(blocks, key=lambda b: b.id), rng)
    assigned, excluded = assign_listings(listings, BlockIndex(blocks))
    if excluded:
        raise HoodvalError(f"{len(excluded)} synthetic listings fell outside all blocks")

    computer = FeatureComputer(dataset)
    f = computer.feature_table()
    w = eh.build_contiguity(blocks)
    e = eh.egohood_features(eh.row_normalize(w), f)
    design = eh.assemble_design_matrix(assigned, f, e)

    prices, oracle = _price_oracle(design, spec, rng)
    priced = {lid: float(p) for lid, p in zip(design.ids, prices)}
    for l in assigned:
        l.asked_price = priced[l.id]
    _write_listings(paths["listings"], assigned)

    oracle_path = out / "oracle.json"
    oracle_path.write_text(json.dumps(oracle, sort_keys=True, indent=2) + "\n")
    paths["oracle"] = oracle_path

    cfg_path = out / "city.cfg"
    cfg_lines = [f"{name}={paths[name].name}" for name in
                 ("blocks", "listings", "amenities", "landuse", "security", "roads")]
    cfg_lines.append(f"seed={spec.seed}")
    cfg_path.write_text("\n".join(cfg_lines) + "\n")
    paths["config"] = cfg_path
    return paths
