"""Spatially independent cross-validation folds.

Census blocks are partitioned into square tiles on a local plane, tiles
are dealt to K folds greedily (shuffled order, always to the currently
lightest fold by listing count), and each rotation designates one fold as
holdout, one for validation and the rest for training.  Two spatial
independence constraints are then enforced by discarding listings, never
training ones:

  (i)  validation and holdout listings whose block lies strictly within
       the buffer radius of any block containing a training listing;
  (ii) holdout listings whose block lies strictly within the radius of
       any block still containing a validation listing.

``verify_folds`` re-checks a finished assignment from scratch, without
reusing any of the distance code above it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .geo import LocalProjection, haversine_many_m
from .geomodel import CensusBlock, HoodvalError, Listing

DEFAULT_TILE_SIDE_M = 3000.0
DEFAULT_K = 5


def tile_blocks(blocks: list[CensusBlock],
                tile_side_m: float = DEFAULT_TILE_SIDE_M) -> dict[tuple[int, int], list[str]]:
    """Square tiling of block centroids; the grid origin sits at the
    minimum projected centroid so the tiling is data-determined."""
    if tile_side_m <= 0:
        raise HoodvalError("tile side must be positive")
    ordered = sorted(blocks, key=lambda b: b.id)
    lons = np.array([b.centroid[0] for b in ordered])
    lats = np.array([b.centroid[1] for b in ordered])
    proj = LocalProjection(float(lons.mean()), float(lats.mean()))
    x, y = proj.to_plane(lons, lats)
    x0, y0 = x.min(), y.min()
    tiles: dict[tuple[int, int], list[str]] = {}
    for b, xi, yi in zip(ordered, x, y):
        key = (int(math.floor((xi - x0) / tile_side_m)),
               int(math.floor((yi - y0) / tile_side_m)))
        tiles.setdefault(key, []).append(b.id)
    return tiles


@dataclass
class FoldAssignment:
    k: int
    seed: int
    tile_side_m: float
    fold_of_block: dict[str, int]
    fold_of_listing: dict[str, int]
    listing_block: dict[str, str]
    fold_sizes: list[int]


def assign_folds(blocks: list[CensusBlock], listings: list[Listing],
                 k: int = DEFAULT_K, tile_side_m: float = DEFAULT_TILE_SIDE_M,
                 seed: int = 0) -> FoldAssignment:
    """Deal tiles to folds, heaviest-first decisions avoided on purpose:
    plain shuffled order keeps the assignment seed-reproducible while the
    lightest-fold rule keeps listing counts close."""
    tiles = tile_blocks(blocks, tile_side_m)
    if len(tiles) < k:
        raise HoodvalError(
            f"only {len(tiles)} non-empty tiles for {k} folds; "
            f"use a smaller tile side than {tile_side_m} m")

    block_fold: dict[str, int] = {}
    listing_block: dict[str, str] = {}
    weight: dict[tuple[int, int], int] = {key: 0 for key in tiles}
    tile_of_block = {bid: key for key, bids in tiles.items() for bid in bids}
    for l in listings:
        if l.ego_place_id is None:
            raise HoodvalError(f"listing {l.id} has no ego-place; assign listings first")
        if l.ego_place_id not in tile_of_block:
            raise HoodvalError(f"listing {l.id} references unknown block {l.ego_place_id}")
        listing_block[l.id] = l.ego_place_id
        weight[tile_of_block[l.ego_place_id]] += 1

    keys = sorted(tiles)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(keys))
    sizes = [0] * k
    for idx in order:
        key = keys[idx]
        fold = min(range(k), key=lambda f: (sizes[f], f))
        sizes[fold] += weight[key]
        for bid in tiles[key]:
            block_fold[bid] = fold

    listing_fold = {lid: block_fold[bid] for lid, bid in listing_block.items()}
    return FoldAssignment(k=k, seed=seed, tile_side_m=tile_side_m,
                          fold_of_block=block_fold, fold_of_listing=listing_fold,
                          listing_block=listing_block, fold_sizes=sizes)


@dataclass
class RotationSplit:
    rotation: int
    train_folds: tuple[int, ...]
    val_fold: int
    holdout_fold: int
    train_ids: list[str] = field(default_factory=list)
    val_ids: list[str] = field(default_factory=list)
    holdout_ids: list[str] = field(default_factory=list)
    discarded: list[tuple[str, str, str]] = field(default_factory=list)  # id, role, reason


def rotation_roles(k: int, rotation: int) -> tuple[tuple[int, ...], int, int]:
    holdout = (k - 1 + rotation) % k
    val = (k - 2 + rotation) % k
    train = tuple(f for f in range(k) if f not in (holdout, val))
    return train, val, holdout


def make_rotation(assignment: FoldAssignment, rotation: int,
                  blocks: list[CensusBlock], listings: list[Listing],
                  radius_m: float = 1000.0) -> RotationSplit:
    """Split listings by rotated fold roles and enforce both constraints."""
    train_folds, val_fold, holdout_fold = rotation_roles(assignment.k, rotation)
    split = RotationSplit(rotation=rotation, train_folds=train_folds,
                          val_fold=val_fold, holdout_fold=holdout_fold)

    centroid = {b.id: b.centroid for b in blocks}
    role_of = {}
    for l in listings:
        fold = assignment.fold_of_listing[l.id]
        role_of[l.id] = ("holdout" if fold == holdout_fold
                         else "val" if fold == val_fold else "train")

    def near_any(bid: str, other_blocks: list[str]) -> bool:
        if not other_blocks:
            return False
        lon, lat = centroid[bid]
        lons = np.array([centroid[o][0] for o in other_blocks])
        lats = np.array([centroid[o][1] for o in other_blocks])
        return bool((haversine_many_m(lon, lat, lons, lats) < radius_m).any())

    train_blocks = sorted({assignment.listing_block[l.id] for l in listings
                           if role_of[l.id] == "train"})
    # constraint (i): candidate blocks near any training block are out
    near_train: dict[str, bool] = {}
    for l in listings:
        if role_of[l.id] == "train":
            continue
        bid = assignment.listing_block[l.id]
        if bid not in near_train:
            near_train[bid] = near_any(bid, train_blocks)

    surviving_val = [l for l in listings if role_of[l.id] == "val"
                     and not near_train[assignment.listing_block[l.id]]]
    val_blocks = sorted({assignment.listing_block[l.id] for l in surviving_val})

    near_val: dict[str, bool] = {}
    for l in listings:
        role = role_of[l.id]
        bid = assignment.listing_block[l.id]
        if role == "train":
            split.train_ids.append(l.id)
        elif role == "val":
            if near_train[bid]:
                split.discarded.append((l.id, "val", "near-training-block"))
            else:
                split.val_ids.append(l.id)
        else:
            if near_train[bid]:
                split.discarded.append((l.id, "holdout", "near-training-block"))
                continue
            if bid not in near_val:
                near_val[bid] = near_any(bid, val_blocks)
            if near_val[bid]:
                split.discarded.append((l.id, "holdout", "near-validation-block"))
            else:
                split.holdout_ids.append(l.id)
    return split


def all_rotations(assignment: FoldAssignment, blocks: list[CensusBlock],
                  listings: list[Listing], radius_m: float = 1000.0) -> list[RotationSplit]:
    return [make_rotation(assignment, r, blocks, listings, radius_m)
            for r in range(assignment.k)]


def write_folds_csv(path, assignment: FoldAssignment, splits: list[RotationSplit]) -> None:
    """Wide per-listing table: base fold plus the role taken in every
    rotation (train/val/holdout/discarded)."""
    role_by_rot: list[dict[str, str]] = []
    for s in splits:
        roles = {}
        for lid in s.train_ids:
            roles[lid] = "train"
        for lid in s.val_ids:
            roles[lid] = "val"
        for lid in s.holdout_ids:
            roles[lid] = "holdout"
        for lid, _, _ in s.discarded:
            roles[lid] = "discarded"
        role_by_rot.append(roles)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["listing_id", "block_id", "fold"]
                   + [f"rotation_{s.rotation}" for s in splits])
        for lid in sorted(assignment.fold_of_listing):
            w.writerow([lid, assignment.listing_block[lid],
                        assignment.fold_of_listing[lid]]
                       + [roles[lid] for roles in role_by_rot])


def read_folds_csv(path) -> tuple[dict[str, int], dict[str, str], list[dict[str, str]]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rotations = len(header) - 3
        fold_of, block_of = {}, {}
        roles: list[dict[str, str]] = [{} for _ in range(rotations)]
        for rec in reader:
            fold_of[rec[0]] = int(rec[2])
            block_of[rec[0]] = rec[1]
            for r in range(rotations):
                roles[r][rec[0]] = rec[3 + r]
    return fold_of, block_of, roles


# ---------------------------------------------------------------------------
# Independent verifier.  Deliberately reimplements the distance test in
# plain Python so a bug upstream cannot hide itself.


def _gc_dist_m(lon1, lat1, lon2, lat2):
    rad = math.pi / 180.0
    p1, p2 = lat1 * rad, lat2 * rad
    s1 = math.sin((p2 - p1) / 2.0)
    s2 = math.sin((lon2 - lon1) * rad / 2.0)
    a = s1 * s1 + math.cos(p1) * math.cos(p2) * s2 * s2
    return 2.0 * 6371000.0 * math.asin(min(1.0, math.sqrt(a)))


def verify_folds(blocks: list[CensusBlock], listings: list[Listing],
                 assignment: FoldAssignment, splits: list[RotationSplit],
                 radius_m: float = 1000.0) -> list[str]:
    """Exhaustively re-check every rotation; returns human-readable
    violation strings, empty when the folds are clean."""
    violations: list[str] = []
    centroid = {b.id: b.centroid for b in blocks}
    block_of = {l.id: l.ego_place_id for l in listings}
    all_ids = {l.id for l in listings}

    if sorted(assignment.fold_of_listing) != sorted(all_ids):
        violations.append("fold assignment does not cover the listing set exactly")
    for lid, fold in assignment.fold_of_listing.items():
        if not (0 <= fold < assignment.k):
            violations.append(f"listing {lid} has out-of-range fold {fold}")

    for s in splits:
        ids = list(s.train_ids) + list(s.val_ids) + list(s.holdout_ids) \
            + [lid for lid, _, _ in s.discarded]
        if sorted(ids) != sorted(all_ids):
            violations.append(f"rotation {s.rotation}: roles do not partition the listings")
        for lid in s.train_ids:
            if assignment.fold_of_listing[lid] not in s.train_folds:
                violations.append(f"rotation {s.rotation}: {lid} trains from a non-train fold")
        for lid, _, _ in s.discarded:
            if assignment.fold_of_listing[lid] in s.train_folds:
                violations.append(f"rotation {s.rotation}: training listing {lid} was discarded")

        train_blocks = sorted({block_of[lid] for lid in s.train_ids})
        val_blocks = sorted({block_of[lid] for lid in s.val_ids})

        def too_close(bid, others):
            lon, lat = centroid[bid]
            for o in others:
                olon, olat = centroid[o]
                if _gc_dist_m(lon, lat, olon, olat) < radius_m:
                    return o
            return None

        for lid in list(s.val_ids) + list(s.holdout_ids):
            hit = too_close(block_of[lid], train_blocks)
            if hit is not None:
                violations.append(
                    f"rotation {s.rotation}: kept listing {lid} (block {block_of[lid]}) "
                    f"is within {radius_m} m of training block {hit}")
        for lid in s.holdout_ids:
            hit = too_close(block_of[lid], val_blocks)
            if hit is not None:
                violations.append(
                    f"rotation {s.rotation}: holdout listing {lid} (block {block_of[lid]}) "
                    f"is within {radius_m} m of validation block {hit}")
    return violations
