"""Spatial contiguity, egohood aggregation and design-matrix assembly.

Blocks within 1 km of each other (centroid to centroid, strictly) are
egohood neighbors.  The binary contiguity matrix W has a zero diagonal;
row-normalizing it turns the egohood aggregate E into a plain neighbor
average of the block feature matrix F, with missing values dropped from
each mean.  The design matrix concatenates the encoded property
attributes with both the ego-place row (F) and the egohood row (E),
tagging every column with its feature group.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .geo import haversine_many_m
from .geomodel import (
    BOOLEAN_ATTRIBUTES,
    CATEGORICAL_ATTRIBUTES,
    NUMERIC_ATTRIBUTES,
    HoodvalError,
    Listing,
)

log = logging.getLogger(__name__)

GROUP_PROPERTY = "property"
GROUP_EGO_PLACE = "ego-place"
GROUP_EGOHOOD = "egohood"


def format_cell(x: float) -> str:
    """Round-trip float formatting; NaN becomes the empty cell."""
    if isinstance(x, float) and np.isnan(x):
        return ""
    return repr(float(x))


def parse_cell(s: str) -> float:
    return float(s) if s != "" else float("nan")


@dataclass
class FeatureTable:
    """Rectangular block-by-feature matrix with ids sorted and unique."""

    block_ids: list[str]
    columns: list[str]
    values: np.ndarray

    def __post_init__(self):
        if len(set(self.block_ids)) != len(self.block_ids):
            raise HoodvalError("feature table block ids must be unique")
        if list(self.block_ids) != sorted(self.block_ids):
            order = np.argsort(self.block_ids)
            self.values = self.values[order]
            self.block_ids = [self.block_ids[i] for i in order]
        if self.values.shape != (len(self.block_ids), len(self.columns)):
            raise HoodvalError("feature table shape does not match ids/columns")

    def col(self, name: str) -> int:
        return self.columns.index(name)

    def row_index(self) -> dict[str, int]:
        return {bid: i for i, bid in enumerate(self.block_ids)}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["block_id"] + self.columns)
            for bid, row in zip(self.block_ids, self.values):
                w.writerow([bid] + [format_cell(v) for v in row])

    @classmethod
    def read_csv(cls, path) -> "FeatureTable":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            ids, rows = [], []
            for rec in reader:
                ids.append(rec[0])
                rows.append([parse_cell(c) for c in rec[1:]])
        return cls(block_ids=ids, columns=header[1:],
                   values=np.array(rows, dtype=float).reshape(len(ids), len(header) - 1))


@dataclass
class ContiguityMatrix:
    """Sparse block adjacency; binary or row-normalized."""

    block_ids: list[str]
    matrix: sp.csr_matrix
    row_normalized: bool = False

    @property
    def n(self) -> int:
        return len(self.block_ids)

    def neighbors(self, i: int) -> np.ndarray:
        return self.matrix.indices[self.matrix.indptr[i]:self.matrix.indptr[i + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.matrix.indptr)

    def isolated(self) -> np.ndarray:
        return self.degrees() == 0


def build_contiguity(blocks, radius_m: float = 1000.0) -> ContiguityMatrix:
    """Binary W with W_ij = 1 iff i != j and the great-circle centroid
    distance is strictly below ``radius_m``.  Symmetric, zero diagonal."""
    ordered = sorted(blocks, key=lambda b: b.id)
    ids = [b.id for b in ordered]
    lons = np.array([b.centroid[0] for b in ordered])
    lats = np.array([b.centroid[1] for b in ordered])
    n = len(ordered)

    rows, cols = [], []
    for i in range(n):
        d = haversine_many_m(lons[i], lats[i], lons, lats)
        hits = np.nonzero(d < radius_m)[0]
        hits = hits[hits != i]
        rows.extend([i] * len(hits))
        cols.extend(hits.tolist())
    mat = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    return ContiguityMatrix(block_ids=ids, matrix=mat, row_normalized=False)


def row_normalize(w: ContiguityMatrix) -> ContiguityMatrix:
    """Divide each non-empty row by its degree; isolated rows stay all-zero."""
    if w.row_normalized:
        return w
    deg = w.degrees().astype(float)
    inv = np.zeros_like(deg)
    nz = deg > 0
    inv[nz] = 1.0 / deg[nz]
    mat = sp.diags(inv) @ w.matrix
    iso = int((~nz).sum())
    if iso:
        log.info("%d isolated block(s) in the contiguity matrix", iso)
    return ContiguityMatrix(block_ids=list(w.block_ids), matrix=mat.tocsr(),
                            row_normalized=True)


def egohood_features(wn: ContiguityMatrix, f: FeatureTable) -> FeatureTable:
    """Neighbor-average aggregation E of the block features F.

    Missing values are excluded from each mean by renormalizing the row
    weights over the non-missing neighbors; isolated blocks copy their own
    row.
    """
    if not wn.row_normalized:
        raise HoodvalError("egohood aggregation expects a row-normalized matrix")
    if wn.n != len(f.block_ids) or wn.block_ids != f.block_ids:
        raise HoodvalError("contiguity matrix and feature table are not aligned")

    present = np.isfinite(f.values)
    filled = np.where(present, f.values, 0.0)
    num = wn.matrix @ filled
    den = wn.matrix @ present.astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        e = np.where(den > 0, num / den, np.nan)
    iso = wn.isolated()
    if iso.any():
        e[iso] = f.values[iso]
    return FeatureTable(block_ids=list(f.block_ids), columns=list(f.columns), values=e)


# ---------------------------------------------------------------------------
# Design matrix


@dataclass
class DesignColumn:
    group: str
    name: str
    attribute: str | None = None  # source property attribute
    level: str | None = None      # one-hot level, if any

    @property
    def label(self) -> str:
        return f"{self.group}:{self.name}"


class PropertyEncoder:
    """Encodes the 25 textual attributes into numeric columns.

    Numerics pass through (missing -> NaN), booleans become 0/1 with
    missing meaning absent, categoricals are one-hot over the observed
    levels with an all-zero row for missing.
    """

    def __init__(self, levels: dict[str, list[str]]):
        self.levels = levels
        self.columns: list[DesignColumn] = []
        for a in NUMERIC_ATTRIBUTES:
            self.columns.append(DesignColumn(GROUP_PROPERTY, a, attribute=a))
        for a in BOOLEAN_ATTRIBUTES:
            self.columns.append(DesignColumn(GROUP_PROPERTY, a, attribute=a))
        for a in CATEGORICAL_ATTRIBUTES:
            for lvl in self.levels.get(a, []):
                self.columns.append(DesignColumn(GROUP_PROPERTY, f"{a}={lvl}",
                                                 attribute=a, level=lvl))

    @classmethod
    def fit(cls, listings: list[Listing]) -> "PropertyEncoder":
        levels: dict[str, list[str]] = {}
        for a in CATEGORICAL_ATTRIBUTES:
            observed = {l.property_attributes.get(a) for l in listings}
            levels[a] = sorted(v for v in observed if v is not None)
        return cls(levels)

    def encode(self, listing: Listing) -> np.ndarray:
        out = np.empty(len(self.columns))
        attrs = listing.property_attributes
        for j, col in enumerate(self.columns):
            v = attrs.get(col.attribute)
            if col.level is not None:
                out[j] = 1.0 if v == col.level else 0.0
            elif col.attribute in BOOLEAN_ATTRIBUTES:
                out[j] = 1.0 if v else 0.0
            else:
                out[j] = float("nan") if v is None else float(v)
        return out

    def to_dict(self) -> dict:
        return {"levels": self.levels}

    @classmethod
    def from_dict(cls, d: dict) -> "PropertyEncoder":
        return cls(levels={k: list(v) for k, v in d["levels"].items()})


@dataclass
class DesignMatrix:
    ids: list[str]
    x: np.ndarray
    y: np.ndarray
    columns: list[DesignColumn]

    @property
    def labels(self) -> list[str]:
        return [c.label for c in self.columns]

    def group_indices(self, group: str) -> np.ndarray:
        return np.array([j for j, c in enumerate(self.columns) if c.group == group], dtype=int)

    def write_csv(self, design_path, targets_path) -> None:
        with open(design_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id"] + self.labels)
            for i, lid in enumerate(self.ids):
                w.writerow([lid] + [format_cell(v) for v in self.x[i]])
        with open(targets_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "asked_price"])
            for lid, yv in zip(self.ids, self.y):
                w.writerow([lid, format_cell(yv)])


def read_design_csv(design_path, targets_path=None):
    """Read design.csv (and optionally targets.csv) back into arrays.

    Returns (ids, x, columns) or (ids, x, columns, y).
    """
    with open(design_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        ids, rows = [], []
        for rec in reader:
            ids.append(rec[0])
            rows.append([parse_cell(c) for c in rec[1:]])
    columns = []
    for lab in header[1:]:
        group, name = lab.split(":", 1)
        columns.append(DesignColumn(group, name))
    x = np.array(rows, dtype=float).reshape(len(ids), len(columns))
    if targets_path is None:
        return ids, x, columns
    with open(targets_path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        target = {rec[0]: parse_cell(rec[1]) for rec in reader}
    y = np.array([target[i] for i in ids])
    return ids, x, columns, y


def assemble_design_matrix(listings: list[Listing], f: FeatureTable, e: FeatureTable,
                           encoder: PropertyEncoder | None = None) -> DesignMatrix:
    """One row per assigned listing: encoded property attributes, then the
    F row of its ego-place, then the E row.  Listings pointing at unknown
    blocks are excluded with a logged reason."""
    if f.block_ids != e.block_ids:
        raise HoodvalError("F and E tables are not aligned")
    if encoder is None:
        encoder = PropertyEncoder.fit(listings)
    row_of = f.row_index()

    columns = list(encoder.columns)
    columns += [DesignColumn(GROUP_EGO_PLACE, c) for c in f.columns]
    columns += [DesignColumn(GROUP_EGOHOOD, c) for c in e.columns]

    ids, xs, ys = [], [], []
    for l in listings:
        if l.ego_place_id is None or l.ego_place_id not in row_of:
            log.warning("listing %s skipped: unknown ego-place %r", l.id, l.ego_place_id)
            continue
        i = row_of[l.ego_place_id]
        xs.append(np.concatenate([encoder.encode(l), f.values[i], e.values[i]]))
        ys.append(float("nan") if l.asked_price is None else l.asked_price)
        ids.append(l.id)
    x = np.array(xs, dtype=float).reshape(len(ids), len(columns))
    return DesignMatrix(ids=ids, x=x, y=np.array(ys, dtype=float), columns=columns)


def write_design_schema(path, encoder: PropertyEncoder, feature_columns: list[str]) -> None:
    doc = {
        "property_encoder": encoder.to_dict(),
        "feature_columns": list(feature_columns),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_design_schema(path) -> tuple[PropertyEncoder, list[str]]:
    with open(path) as fh:
        doc = json.load(fh)
    return PropertyEncoder.from_dict(doc["property_encoder"]), list(doc["feature_columns"])
