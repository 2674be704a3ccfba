"""Domain model and ingestion for the city layers.

Six file-based layers feed the pipeline: census blocks (GeoJSON), listings
(CSV), amenities (CSV), land use (GeoJSON), security-perception points
(CSV) and road segments (CSV).  This module parses and validates them,
applies the listing filter rules, and assigns each listing to the census
block that contains it (its ego-place).
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from datetime import date
from pathlib import Path

import numpy as np
from shapely.geometry import Point, Polygon
from shapely.strtree import STRtree

from .geo import haversine_many_m

log = logging.getLogger(__name__)

AMENITY_CATEGORIES = (
    "coffee",
    "entertainment",
    "shopping",
    "restaurant_bar",
    "school",
    "grocery",
    "library",
    "park",
    "metro_station",
    "rail_station",
    "airport",
    "bus_stop",
    "industrial_area",
)

LANDUSE_CLASSES = ("urban", "commercial", "green")

# ATECO macro-categories counted as cultural/creative companies.
CULTURAL_ATECO_CODES = frozenset({"58", "59", "62", "63", "71", "73", "74", "90", "91"})

# The 25 textual property attributes and how each one is encoded.
NUMERIC_ATTRIBUTES = (
    "square_meters",
    "built_year",
    "monthly_expenses",
    "floor_number",
    "property_taxes",
    "rooms",
    "bathrooms",
    "bedrooms",
)
BOOLEAN_ATTRIBUTES = (
    "garden",
    "furnished",
    "terrace",
    "spa",
    "cellar",
    "garage",
    "fireplace",
)
CATEGORICAL_ATTRIBUTES = (
    "energy_certification",
    "heating_type",
    "fixtures",
    "sun_exposition",
    "kitchen_type",
    "place_type",
    "property_class",
    "property_type",
    "condition",
    "property_kind",
)
PROPERTY_ATTRIBUTES = NUMERIC_ATTRIBUTES + BOOLEAN_ATTRIBUTES + CATEGORICAL_ATTRIBUTES

_TRUE_WORDS = {"1", "true", "yes", "y"}
_FALSE_WORDS = {"0", "false", "no", "n"}


class HoodvalError(Exception):
    """Base class for all package errors."""


class LayerLoadError(HoodvalError):
    """A layer file is missing or cannot be parsed at all."""


class SchemaError(HoodvalError):
    """A row or feature violates the layer schema."""


class UnassignableListingError(HoodvalError):
    """A listing falls outside every block and the fallback radius."""


@dataclass
class CensusBlock:
    id: str
    polygon: list[list[tuple[float, float]]]  # exterior ring first
    centroid: tuple[float, float]
    area_m2: float
    population: int = 0
    buildings_total: int = 0
    buildings_residential: int = 0
    buildings_commercial: int = 0
    buildings_by_year_bracket: dict[str, int] = field(default_factory=dict)
    companies: int = 0
    company_avg_size: float = 0.0
    employees: int = 0
    shops: int = 0
    heavy_industries: int = 0
    avg_property_tax: float = 0.0
    companies_by_ateco: dict[str, int] = field(default_factory=dict)

    def shape(self) -> Polygon:
        return Polygon(self.polygon[0], self.polygon[1:])


@dataclass
class Listing:
    id: str
    location: tuple[float, float] | None
    asked_price: float | None
    posted_date: date | None
    property_attributes: dict[str, object]
    ego_place_id: str | None = None


@dataclass
class Amenity:
    id: str
    category: str
    location: tuple[float, float]
    polygon: list[tuple[float, float]] | None = None


@dataclass
class LandUsePolygon:
    klass: str
    polygon: list[tuple[float, float]]
    area_m2: float


@dataclass
class SecurityPoint:
    location: tuple[float, float]
    score: float


@dataclass
class RoadEdge:
    node_a: str
    node_b: str
    lonlat_a: tuple[float, float]
    lonlat_b: tuple[float, float]
    length_m: float


@dataclass
class CityDataset:
    blocks: list[CensusBlock]
    listings: list[Listing]
    amenities: list[Amenity]
    landuse: list[LandUsePolygon]
    security_points: list[SecurityPoint]
    road_edges: list[RoadEdge]

    def block_by_id(self) -> dict[str, CensusBlock]:
        return {b.id: b for b in self.blocks}


def _require_file(path: str | Path, layer: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise LayerLoadError(f"layer '{layer}': file not found: {p}")
    return p


def _parse_float(raw: str | None, layer: str, row: int, col: str) -> float | None:
    if raw is None or raw == "":
        return None
    try:
        return float(raw)
    except ValueError:
        raise SchemaError(f"layer '{layer}' row {row}: column '{col}' is not numeric: {raw!r}") from None


def _parse_bool(raw: str, layer: str, row: int, col: str) -> bool:
    word = raw.strip().lower()
    if word in _TRUE_WORDS:
        return True
    if word in _FALSE_WORDS:
        return False
    raise SchemaError(f"layer '{layer}' row {row}: column '{col}' is not boolean: {raw!r}")


def load_blocks(path: str | Path) -> list[CensusBlock]:
    p = _require_file(path, "blocks")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise LayerLoadError(f"layer 'blocks': invalid GeoJSON: {exc}") from None
    feats = doc.get("features")
    if doc.get("type") != "FeatureCollection" or feats is None:
        raise LayerLoadError("layer 'blocks': expected a GeoJSON FeatureCollection")

    blocks: list[CensusBlock] = []
    seen: set[str] = set()
    for i, feat in enumerate(feats):
        geom = feat.get("geometry") or {}
        if geom.get("type") != "Polygon":
            raise SchemaError(f"layer 'blocks' feature {i}: geometry must be a Polygon")
        rings = [[(float(x), float(y)) for x, y in ring] for ring in geom["coordinates"]]
        props = feat.get("properties") or {}
        bid = props.get("id")
        if bid is None:
            raise SchemaError(f"layer 'blocks' feature {i}: missing 'id'")
        bid = str(bid)
        if bid in seen:
            raise SchemaError(f"layer 'blocks' feature {i}: duplicate block id {bid!r}")
        seen.add(bid)

        if "centroid" in props:
            cx, cy = props["centroid"]
            centroid = (float(cx), float(cy))
        else:
            c = Polygon(rings[0]).centroid
            centroid = (c.x, c.y)
        area = float(props.get("area_m2", 0.0))
        if area <= 0:
            raise SchemaError(f"layer 'blocks' feature {i} (id {bid}): area_m2 must be positive")
        xs = [x for x, _ in rings[0]]
        ys = [y for _, y in rings[0]]
        if not (min(xs) <= centroid[0] <= max(xs) and min(ys) <= centroid[1] <= max(ys)):
            raise SchemaError(f"layer 'blocks' feature {i} (id {bid}): centroid outside polygon bounding box")

        counts = {}
        for name in ("population", "buildings_total", "buildings_residential",
                     "buildings_commercial", "companies", "employees", "shops",
                     "heavy_industries"):
            v = int(props.get(name, 0))
            if v < 0:
                raise SchemaError(f"layer 'blocks' feature {i} (id {bid}): {name} must be >= 0")
            counts[name] = v
        brackets = {str(k): int(v) for k, v in (props.get("buildings_by_year_bracket") or {}).items()}
        ateco = {str(k): int(v) for k, v in (props.get("companies_by_ateco") or {}).items()}
        if any(v < 0 for v in brackets.values()) or any(v < 0 for v in ateco.values()):
            raise SchemaError(f"layer 'blocks' feature {i} (id {bid}): bracket counts must be >= 0")

        blocks.append(CensusBlock(
            id=bid,
            polygon=rings,
            centroid=centroid,
            area_m2=area,
            buildings_by_year_bracket=brackets,
            company_avg_size=float(props.get("company_avg_size", 0.0)),
            avg_property_tax=float(props.get("avg_property_tax", 0.0)),
            companies_by_ateco=ateco,
            **counts,
        ))
    return blocks


def load_listings(path: str | Path) -> list[Listing]:
    p = _require_file(path, "listings")
    listings: list[Listing] = []
    with p.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        required = {"id", "lon", "lat", "asked_price", "posted_date"}
        missing = required - set(reader.fieldnames)
        if missing:
            raise LayerLoadError(f"layer 'listings': missing columns {sorted(missing)}")
        for i, rec in enumerate(reader):
            lon = _parse_float(rec.get("lon"), "listings", i, "lon")
            lat = _parse_float(rec.get("lat"), "listings", i, "lat")
            location = (lon, lat) if lon is not None and lat is not None else None
            price = _parse_float(rec.get("asked_price"), "listings", i, "asked_price")
            if price is not None and price <= 0:
                raise SchemaError(f"layer 'listings' row {i}: asked_price must be positive")
            raw_date = (rec.get("posted_date") or "").strip()
            if raw_date:
                try:
                    posted = date.fromisoformat(raw_date)
                except ValueError:
                    raise SchemaError(f"layer 'listings' row {i}: bad posted_date {raw_date!r}") from None
            else:
                posted = None

            attrs: dict[str, object] = {}
            for name in NUMERIC_ATTRIBUTES:
                attrs[name] = _parse_float(rec.get(name), "listings", i, name)
            for name in BOOLEAN_ATTRIBUTES:
                raw = (rec.get(name) or "").strip()
                attrs[name] = _parse_bool(raw, "listings", i, name) if raw else None
            for name in CATEGORICAL_ATTRIBUTES:
                raw = (rec.get(name) or "").strip()
                attrs[name] = raw if raw else None

            listings.append(Listing(
                id=str(rec["id"]),
                location=location,
                asked_price=price,
                posted_date=posted,
                property_attributes=attrs,
            ))
    return listings


def load_amenities(path: str | Path) -> list[Amenity]:
    p = _require_file(path, "amenities")
    out: list[Amenity] = []
    with p.open(newline="") as fh:
        reader = csv.DictReader(fh)
        for i, rec in enumerate(reader):
            cat = (rec.get("category") or "").strip()
            if cat not in AMENITY_CATEGORIES:
                raise SchemaError(
                    f"layer 'amenities' row {i}: unknown category {cat!r}; "
                    f"allowed: {', '.join(AMENITY_CATEGORIES)}")
            lon = _parse_float(rec.get("lon"), "amenities", i, "lon")
            lat = _parse_float(rec.get("lat"), "amenities", i, "lat")
            if lon is None or lat is None:
                raise SchemaError(f"layer 'amenities' row {i}: missing coordinates")
            poly = None
            wkt = (rec.get("wkt_polygon") or "").strip()
            if wkt:
                poly = _parse_wkt_polygon(wkt, i)
                if len(poly) < 3:
                    raise SchemaError(f"layer 'amenities' row {i}: polygon needs >= 3 vertices")
            out.append(Amenity(id=str(rec.get("id", i)), category=cat, location=(lon, lat), polygon=poly))
    return out


def _parse_wkt_polygon(wkt: str, row: int) -> list[tuple[float, float]]:
    body = wkt.strip()
    if not body.upper().startswith("POLYGON"):
        raise SchemaError(f"layer 'amenities' row {row}: expected POLYGON wkt, got {wkt[:30]!r}")
    inner = body[body.index("((") + 2:body.index("))")]
    pts = []
    for pair in inner.split(","):
        x, y = pair.split()
        pts.append((float(x), float(y)))
    # drop an explicit closing vertex
    if len(pts) > 1 and pts[0] == pts[-1]:
        pts = pts[:-1]
    return pts


def load_landuse(path: str | Path) -> list[LandUsePolygon]:
    from .geo import ring_area_m2

    p = _require_file(path, "landuse")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise LayerLoadError(f"layer 'landuse': invalid GeoJSON: {exc}") from None
    out: list[LandUsePolygon] = []
    for i, feat in enumerate(doc.get("features", [])):
        props = feat.get("properties") or {}
        klass = props.get("klass")
        if klass not in LANDUSE_CLASSES:
            raise SchemaError(
                f"layer 'landuse' feature {i}: unknown klass {klass!r}; "
                f"allowed: {', '.join(LANDUSE_CLASSES)}")
        geom = feat.get("geometry") or {}
        if geom.get("type") != "Polygon":
            raise SchemaError(f"layer 'landuse' feature {i}: geometry must be a Polygon")
        ring = [(float(x), float(y)) for x, y in geom["coordinates"][0]]
        out.append(LandUsePolygon(klass=klass, polygon=ring, area_m2=ring_area_m2(ring)))
    return out


def load_security(path: str | Path) -> list[SecurityPoint]:
    p = _require_file(path, "security")
    out: list[SecurityPoint] = []
    with p.open(newline="") as fh:
        reader = csv.DictReader(fh)
        for i, rec in enumerate(reader):
            lon = _parse_float(rec.get("lon"), "security", i, "lon")
            lat = _parse_float(rec.get("lat"), "security", i, "lat")
            score = _parse_float(rec.get("score"), "security", i, "score")
            if lon is None or lat is None or score is None:
                raise SchemaError(f"layer 'security' row {i}: lon, lat and score are required")
            if not (0.0 < score < 10.0):
                raise SchemaError(f"layer 'security' row {i}: score must lie in (0, 10), got {score}")
            out.append(SecurityPoint(location=(lon, lat), score=score))
    return out


def load_roads(path: str | Path) -> list[RoadEdge]:
    p = _require_file(path, "roads")
    out: list[RoadEdge] = []
    with p.open(newline="") as fh:
        reader = csv.DictReader(fh)
        for i, rec in enumerate(reader):
            length = _parse_float(rec.get("length_m"), "roads", i, "length_m")
            coords = [_parse_float(rec.get(c), "roads", i, c) for c in ("lon_a", "lat_a", "lon_b", "lat_b")]
            if length is None or any(c is None for c in coords):
                raise SchemaError(f"layer 'roads' row {i}: incomplete edge record")
            out.append(RoadEdge(
                node_a=str(rec["node_a_id"]),
                node_b=str(rec["node_b_id"]),
                lonlat_a=(coords[0], coords[1]),
                lonlat_b=(coords[2], coords[3]),
                length_m=length,
            ))
    return out


def load_dataset(paths: dict[str, str | Path]) -> CityDataset:
    """Load and validate all six layers.

    ``paths`` maps layer names (blocks, listings, amenities, landuse,
    security, roads) to file paths.
    """
    for layer in ("blocks", "listings", "amenities", "landuse", "security", "roads"):
        if layer not in paths:
            raise LayerLoadError(f"layer '{layer}': no path configured")
    dataset = CityDataset(
        blocks=load_blocks(paths["blocks"]),
        listings=load_listings(paths["listings"]),
        amenities=load_amenities(paths["amenities"]),
        landuse=load_landuse(paths["landuse"]),
        security_points=load_security(paths["security"]),
        road_edges=load_roads(paths["roads"]),
    )
    ids = [l.id for l in dataset.listings]
    if len(set(ids)) != len(ids):
        raise SchemaError("layer 'listings': listing ids are not unique")
    return dataset


# ---------------------------------------------------------------------------
# Listing filtering


@dataclass
class FilterRules:
    """What survives the intake filter.

    Kinds outside ``allowed_kinds`` (e.g. foreclosure auctions) are dropped,
    as are listings whose condition is in ``exclude_conditions`` (buildings
    under construction) or whose posting is older than ``max_age_days``
    relative to ``reference_date``.
    """

    allowed_kinds: frozenset[str] = frozenset({
        "apartment", "attic", "detached", "semi_detached", "loft", "open_space",
    })
    exclude_conditions: frozenset[str] = frozenset({"under_construction"})
    max_age_days: int = 365
    reference_date: date = date(2024, 1, 1)


def filter_listings(listings: list[Listing], rules: FilterRules) -> list[Listing]:
    """Apply the intake rules; total and order-preserving."""
    kept = []
    for l in listings:
        if l.location is None or l.asked_price is None:
            continue
        kind = l.property_attributes.get("property_kind")
        if kind not in rules.allowed_kinds:
            continue
        cond = l.property_attributes.get("condition")
        if cond in rules.exclude_conditions:
            continue
        if l.posted_date is None:
            continue
        age = (rules.reference_date - l.posted_date).days
        if age < 0 or age > rules.max_age_days:
            continue
        kept.append(l)
    return kept


# ---------------------------------------------------------------------------
# Ego-place assignment

FALLBACK_RADIUS_M = 250.0


class BlockIndex:
    """Spatial index over census blocks for containment and nearest-centroid
    queries.  Blocks are kept sorted by id so that every tie resolves to the
    lexicographically smallest id."""

    def __init__(self, blocks: list[CensusBlock]):
        self.blocks = sorted(blocks, key=lambda b: b.id)
        self.ids = [b.id for b in self.blocks]
        self._polys = [b.shape() for b in self.blocks]
        self._tree = STRtree(self._polys)
        self._clons = np.array([b.centroid[0] for b in self.blocks], dtype=float)
        self._clats = np.array([b.centroid[1] for b in self.blocks], dtype=float)

    def containing(self, lon: float, lat: float) -> list[str]:
        """Ids of blocks covering the point (boundary counts), sorted."""
        pt = Point(lon, lat)
        cand = self._tree.query(pt)
        hits = [self.ids[i] for i in cand if self._polys[i].covers(pt)]
        return sorted(hits)

    def nearest_centroid(self, lon: float, lat: float) -> tuple[str, float]:
        d = haversine_many_m(lon, lat, self._clons, self._clats)
        i = int(np.argmin(d))  # first minimum = smallest id (sorted order)
        return self.ids[i], float(d[i])


def assign_ego_place(location: tuple[float, float], index: BlockIndex,
                     fallback_radius_m: float = FALLBACK_RADIUS_M) -> str:
    """Block containing the point; ties on shared boundaries resolve to the
    smallest block id, and points just outside the tessellation fall back to
    the nearest centroid within ``fallback_radius_m``."""
    lon, lat = location
    hits = index.containing(lon, lat)
    if hits:
        return hits[0]
    bid, dist = index.nearest_centroid(lon, lat)
    if dist <= fallback_radius_m:
        return bid
    raise UnassignableListingError(
        f"point ({lon:.6f}, {lat:.6f}) is outside every block and farther than "
        f"{fallback_radius_m:.0f} m from the nearest centroid ({dist:.0f} m)")


def assign_listings(listings: list[Listing], index: BlockIndex) -> tuple[list[Listing], list[tuple[str, str]]]:
    """Assign every listing to its ego-place.

    Returns the assigned listings plus (listing id, reason) pairs for the
    ones that could not be placed; those are excluded.
    """
    assigned: list[Listing] = []
    excluded: list[tuple[str, str]] = []
    for l in listings:
        if l.location is None:
            excluded.append((l.id, "no coordinates"))
            continue
        try:
            bid = assign_ego_place(l.location, index)
        except UnassignableListingError as exc:
            log.warning("listing %s unassignable: %s", l.id, exc)
            excluded.append((l.id, str(exc)))
            continue
        assigned.append(replace(l, ego_place_id=bid))
    return assigned, excluded
