"""Command-line pipeline driver.

Subcommands cover the whole experiment protocol: synth (test fixture),
ingest, features, egohood, folds, train, evaluate, nowcast and explain.
Every stage reads and writes only its documented files, verifies input
hashes against manifest.json in the output directory, and refuses to run
on stale upstream artifacts.  Logs go to stderr; data goes to files.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from datetime import date
from pathlib import Path

import numpy as np

from . import egohood as eh
from . import evaluation as ev
from . import gbt
from . import spatialcv as scv
from .artifacts import Manifest
from .config import Settings, load_config
from .features import FeatureComputer, WalkParams, feature_schema_rows
from .geomodel import (
    BOOLEAN_ATTRIBUTES,
    CATEGORICAL_ATTRIBUTES,
    NUMERIC_ATTRIBUTES,
    BlockIndex,
    CityDataset,
    FilterRules,
    HoodvalError,
    assign_listings,
    filter_listings,
    load_amenities,
    load_blocks,
    load_landuse,
    load_listings,
    load_roads,
    load_security,
)
from .synth import SynthSpec, synth_city

log = logging.getLogger("hoodval")

VARIANTS = ("property", "full", "open")
VARIANT_TITLE = {
    "property": "Property",
    "full": "Property+Neighborhood",
    "open": "Property+Neighborhood-Open",
}
# columns unavailable under an open data license
OPEN_EXCLUDED = frozenset({
    "property:property_taxes",
    "ego-place:security_mean",
    "egohood:security_mean",
    "ego-place:avg_property_tax",
    "egohood:avg_property_tax",
})


def variant_labels(labels: list[str], variant: str) -> list[str]:
    """Column selection is the only thing a variant changes."""
    if variant == "full":
        return list(labels)
    if variant == "open":
        return [l for l in labels if l not in OPEN_EXCLUDED]
    if variant == "property":
        return [l for l in labels if l.startswith("property:")]
    raise HoodvalError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")


def _settings(args) -> Settings:
    cfg_path = Path(args.config)
    file_values = load_config(cfg_path)
    overrides = {}
    for key in ("seed", "variant", "tile_side_m", "k_folds", "egohood_radius_m",
                "max_walk_m", "reference_date", "max_age_days", "learning_rate",
                "n_estimators", "max_depth", "reg_lambda", "reg_alpha",
                "min_child_weight", "gamma", "early_stopping_rounds"):
        if hasattr(args, key):
            overrides[key] = getattr(args, key)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise HoodvalError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return Settings(file_values, overrides, cfg_path.parent)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _train_config(s: Settings) -> gbt.TrainConfig:
    return gbt.TrainConfig(
        learning_rate=s.get("learning_rate", 0.001, float),
        n_estimators=s.get("n_estimators", 4000, int),
        max_depth=s.get("max_depth", 20, int),
        reg_lambda=s.get("reg_lambda", 5.0, float),
        reg_alpha=s.get("reg_alpha", 1.0, float),
        min_child_weight=s.get("min_child_weight", 3.0, float),
        gamma=s.get("gamma", 0.0, float),
        early_stopping_rounds=s.get("early_stopping_rounds", 50, int),
    )


_CLEAN_COLUMNS = (["id", "lon", "lat", "asked_price", "posted_date", "ego_place_id"]
                  + list(NUMERIC_ATTRIBUTES) + list(BOOLEAN_ATTRIBUTES)
                  + list(CATEGORICAL_ATTRIBUTES))


def write_clean_listings(path, listings) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_CLEAN_COLUMNS)
        for l in listings:
            rec = [l.id, repr(float(l.location[0])), repr(float(l.location[1])),
                   eh.format_cell(float(l.asked_price)) if l.asked_price is not None else "",
                   l.posted_date.isoformat() if l.posted_date else "",
                   l.ego_place_id or ""]
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
            w.writerow(rec)


def read_clean_listings(path):
    base = load_listings(path)
    with open(path, newline="") as fh:
        egos = [(rec.get("ego_place_id") or "").strip() or None
                for rec in csv.DictReader(fh)]
    if len(egos) != len(base):
        raise HoodvalError(f"{path}: malformed clean listing table")
    return [replace(l, ego_place_id=e) for l, e in zip(base, egos)]


# ---------------------------------------------------------------------------
# stages


def cmd_synth(args) -> int:
    out = _out_dir(args)
    spec = SynthSpec(seed=args.seed, blocks=args.blocks, listings=args.listings,
                     cell_side_m=args.cell_side, noise_scale=args.noise,
                     neighborhood_share=args.share)
    paths = synth_city(spec, out)
    manifest = Manifest.load(out)
    for p in sorted(paths.values()):
        manifest.record_output(p, "synth")
    manifest.save()
    log.info("synthetic city written to %s (%d blocks, %d listings)",
             out, spec.blocks, spec.listings)
    return 0


def cmd_ingest(args) -> int:
    s = _settings(args)
    out = _out_dir(args)
    manifest = Manifest.load(out)
    layers = s.layer_paths()
    for p in layers.values():
        manifest.check_input(p, "ingest")

    dataset = CityDataset(
        blocks=load_blocks(layers["blocks"]),
        listings=load_listings(layers["listings"]),
        amenities=load_amenities(layers["amenities"]),
        landuse=load_landuse(layers["landuse"]),
        security_points=load_security(layers["security"]),
        road_edges=load_roads(layers["roads"]),
    )
    rules = FilterRules(
        max_age_days=s.get("max_age_days", 365, int),
        reference_date=date.fromisoformat(s.get("reference_date", "2024-01-01")),
    )
    kept = filter_listings(dataset.listings, rules)
    assigned, excluded = assign_listings(kept, BlockIndex(dataset.blocks))

    clean_path = out / "listings_clean.csv"
    write_clean_listings(clean_path, assigned)
    report_path = out / "ingest_report.txt"
    lines = [f"listings in:        {len(dataset.listings)}",
             f"after filtering:    {len(kept)}",
             f"assigned to blocks: {len(assigned)}",
             f"unassignable:       {len(excluded)}"]
    for lid, reason in excluded:
        lines.append(f"  {lid}: {reason}")
    report_path.write_text("\n".join(lines) + "\n")

    manifest.record_output(clean_path, "ingest")
    manifest.record_output(report_path, "ingest")
    manifest.save()
    log.info("ingest: %d/%d listings kept", len(assigned), len(dataset.listings))
    return 0


def cmd_features(args) -> int:
    s = _settings(args)
    out = _out_dir(args)
    manifest = Manifest.load(out)
    layers = s.layer_paths()
    for name in ("blocks", "amenities", "landuse", "security", "roads"):
        manifest.check_input(layers[name], "features")

    dataset = CityDataset(
        blocks=load_blocks(layers["blocks"]),
        listings=[],
        amenities=load_amenities(layers["amenities"]),
        landuse=load_landuse(layers["landuse"]),
        security_points=load_security(layers["security"]),
        road_edges=load_roads(layers["roads"]),
    )
    params = WalkParams(max_walk_m=s.get("max_walk_m", 1609.34, float))
    computer = FeatureComputer(dataset, walk_params=params,
                               egohood_radius_m=s.get("egohood_radius_m", 1000.0, float))
    table = computer.feature_table()
    features_path = out / "features.csv"
    table.write_csv(features_path)

    schema_path = out / "features_schema.csv"
    with open(schema_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "unit", "source"])
        for row in feature_schema_rows(table.columns):
            w.writerow(row)

    manifest.record_output(features_path, "features")
    manifest.record_output(schema_path, "features")
    manifest.save()
    log.info("features: %d blocks x %d columns", len(table.block_ids), len(table.columns))
    return 0


def cmd_egohood(args) -> int:
    s = _settings(args)
    out = _out_dir(args)
    manifest = Manifest.load(out)
    features_path = out / "features.csv"
    clean_path = out / "listings_clean.csv"
    blocks_path = s.path("blocks")
    for p in (features_path, clean_path, blocks_path):
        manifest.check_input(p, "egohood")

    blocks = load_blocks(blocks_path)
    f = eh.FeatureTable.read_csv(features_path)
    w = eh.build_contiguity(blocks, s.get("egohood_radius_m", 1000.0, float))
    e = eh.egohood_features(eh.row_normalize(w), f)
    egohood_path = out / "egohood.csv"
    e.write_csv(egohood_path)

    listings = read_clean_listings(clean_path)
    encoder = eh.PropertyEncoder.fit(listings)
    design = eh.assemble_design_matrix(listings, f, e, encoder=encoder)
    design_path = out / "design.csv"
    targets_path = out / "targets.csv"
    design.write_csv(design_path, targets_path)
    schema_path = out / "design_schema.json"
    eh.write_design_schema(schema_path, encoder, f.columns)

    for p in (egohood_path, design_path, targets_path, schema_path):
        manifest.record_output(p, "egohood")
    manifest.save()
    log.info("egohood: design matrix %d x %d", len(design.ids), len(design.columns))
    return 0


def cmd_folds(args) -> int:
    s = _settings(args)
    out = _out_dir(args)
    manifest = Manifest.load(out)
    clean_path = out / "listings_clean.csv"
    blocks_path = s.path("blocks")
    for p in (clean_path, blocks_path):
        manifest.check_input(p, "folds")

    blocks = load_blocks(blocks_path)
    listings = read_clean_listings(clean_path)
    radius = s.get("egohood_radius_m", 1000.0, float)
    assignment = scv.assign_folds(
        blocks, listings,
        k=s.get("k_folds", 5, int),
        tile_side_m=s.get("tile_side_m", 3000.0, float),
        seed=s.get("seed", 0, int))
    splits = scv.all_rotations(assignment, blocks, listings, radius)
    violations = scv.verify_folds(blocks, listings, assignment, splits, radius)
    if violations:
        for v in violations[:20]:
            log.error("fold violation: %s", v)
        raise HoodvalError(f"{len(violations)} spatial independence violations")

    folds_path = out / "folds.csv"
    scv.write_folds_csv(folds_path, assignment, splits)
    manifest.record_output(folds_path, "folds")
    manifest.save()
    for sp in splits:
        log.info("rotation %d: %d train / %d val / %d holdout / %d discarded",
                 sp.rotation, len(sp.train_ids), len(sp.val_ids),
                 len(sp.holdout_ids), len(sp.discarded))
    return 0


def _load_design(out: Path, manifest: Manifest, stage: str):
    design_path = out / "design.csv"
    targets_path = out / "targets.csv"
    folds_path = out / "folds.csv"
    for p in (design_path, targets_path, folds_path):
        manifest.check_input(p, stage)
    ids, x, columns, y = eh.read_design_csv(design_path, targets_path)
    _, _, roles = scv.read_folds_csv(folds_path)
    missing = [i for i in ids if i not in roles[0]]
    if missing:
        raise HoodvalError(f"{len(missing)} design rows missing from folds.csv; rerun folds")
    return ids, x, [c.label for c in columns], y, roles


def cmd_train(args) -> int:
    s = _settings(args)
    out = _out_dir(args)
    variant = args.variant
    manifest = Manifest.load(out)
    ids, x, labels, y, roles = _load_design(out, manifest, f"train-{variant}")

    selected = variant_labels(labels, variant)
    col_index = {lab: j for j, lab in enumerate(labels)}
    idx = np.array([col_index[lab] for lab in selected], dtype=int)
    cfg = _train_config(s)

    report_lines = [f"variant: {variant} ({VARIANT_TITLE[variant]})",
                    f"columns: {len(selected)} of {len(labels)}"]
    outputs = []
    for r in range(len(roles)):
        tr = [i for i, lid in enumerate(ids) if roles[r][lid] == "train"]
        va = [i for i, lid in enumerate(ids) if roles[r][lid] == "val"]
        if not tr:
            raise HoodvalError(f"rotation {r}: no training rows")
        ytr = y[tr]
        if not np.isfinite(ytr).all():
            raise HoodvalError(f"rotation {r}: training rows with missing prices")
        val_x = x[np.array(va, dtype=int)][:, idx] if va else None
        val_y = y[va] if va else None
        if not va:
            log.warning("rotation %d: empty validation set, training without early stopping", r)
        model = gbt.fit(x[np.array(tr, dtype=int)][:, idx], ytr, selected, cfg,
                        val_x=val_x, val_y=val_y)
        model_path = out / f"model_{variant}_r{r}.json"
        model.save(model_path)
        outputs.append(model_path)
        best_mae = model.val_mae[model.best_round] if model.val_mae else float("nan")
        report_lines.append(
            f"rotation {r}: n_train={len(tr)} n_val={len(va)} "
            f"best_round={model.best_round} val_mae={best_mae!r}")
        log.info("%s", report_lines[-1])

    report_path = out / f"train_report_{variant}.txt"
    report_path.write_text("\n".join(report_lines) + "\n")
    outputs.append(report_path)
    for p in outputs:
        manifest.record_output(p, f"train-{variant}")
    manifest.save()
    return 0


def _load_variant_models(out: Path, manifest: Manifest, variant: str, k: int, stage: str):
    models = []
    for r in range(k):
        p = out / f"model_{variant}_r{r}.json"
        if not p.is_file():
            raise HoodvalError(
                f"missing model for variant {variant!r} rotation {r}; "
                f"run: hoodval train --variant {variant}")
        manifest.check_input(p, stage)
        models.append(gbt.GBTModel.load(p))
    return models


def cmd_evaluate(args) -> int:
    s = _settings(args)
    out = _out_dir(args)
    manifest = Manifest.load(out)
    ids, x, labels, y, roles = _load_design(out, manifest, "evaluate")
    k = len(roles)
    col_index = {lab: j for j, lab in enumerate(labels)}

    if args.variants:
        variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    else:
        variants = [v for v in VARIANTS if (out / f"model_{v}_r0.json").is_file()]
    if not variants:
        raise HoodvalError("no trained variants found; run the train stage first")

    text = []
    reports: dict[str, ev.RunReport] = {}
    outputs = []
    for variant in variants:
        models = _load_variant_models(out, manifest, variant, k, "evaluate")
        rotation_evals = []
        pred_rows = []
        for r, model in enumerate(models):
            idx = np.array([col_index[lab] for lab in model.feature_names], dtype=int)
            ho = [i for i, lid in enumerate(ids) if roles[r][lid] == "holdout"]
            if not ho:
                raise HoodvalError(f"rotation {r}: empty holdout set")
            rows = np.array(ho, dtype=int)
            pred = model.predict(x[rows][:, idx])
            rotation_evals.append(ev.RotationEval(
                rotation=r, ids=[ids[i] for i in ho], y=y[rows], pred=pred))
            pred_rows.extend((ids[i], r, y[i], p) for i, p in zip(ho, pred))
        report = ev.evaluate_run(rotation_evals, k=k)
        reports[variant] = report

        pred_path = out / f"predictions_{variant}.csv"
        with open(pred_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "rotation", "asked_price", "prediction"])
            for lid, r, yv, pv in pred_rows:
                w.writerow([lid, r, eh.format_cell(float(yv)), eh.format_cell(float(pv))])
        outputs.append(pred_path)

        table = ev.combined_importance(models)
        imp_path = out / f"importance_{variant}.csv"
        ev.write_importance_csv(imp_path, table)
        outputs.append(imp_path)

        text.append(f"== {VARIANT_TITLE[variant]} ==")
        text.append(ev.format_run_report(report))
        shares = " ".join(f"{g}={table.group_share[g]:.4f}"
                          for g in sorted(table.group_share))
        hood = sum(v for g, v in table.group_share.items() if g != "property")
        text.append(f"gain shares: {shares}")
        text.append(f"neighborhood (ego-place+egohood) share: {hood:.4f}")
        text.append("")

    text.append("== comparison ==")
    text.append(ev.comparison_table(
        {VARIANT_TITLE[v]: reports[v] for v in variants}))
    eval_path = out / "evaluation.txt"
    eval_path.write_text("\n".join(text))
    outputs.append(eval_path)
    for p in outputs:
        manifest.record_output(p, "evaluate")
    manifest.save()
    sys.stdout.write(text[-1])
    return 0


def cmd_nowcast(args) -> int:
    s = _settings(args)
    out = _out_dir(args)
    variant = args.variant
    manifest = Manifest.load(out)
    schema_path = out / "design_schema.json"
    features_path = out / "features.csv"
    egohood_path = out / "egohood.csv"
    blocks_path = s.path("blocks")
    listings_path = Path(args.listings)
    for p in (schema_path, features_path, egohood_path, blocks_path, listings_path):
        manifest.check_input(p, "nowcast")
    models = _load_variant_models(out, manifest, variant, s.get("k_folds", 5, int),
                                  "nowcast")

    encoder, feature_columns = eh.read_design_schema(schema_path)
    f = eh.FeatureTable.read_csv(features_path)
    e = eh.FeatureTable.read_csv(egohood_path)
    if f.columns != feature_columns or e.columns != feature_columns:
        raise HoodvalError("feature tables do not match design_schema.json; rerun egohood")

    blocks = load_blocks(blocks_path)
    raw = load_listings(listings_path)
    located = [l for l in raw if l.location is not None]
    if len(located) < len(raw):
        log.warning("nowcast: %d listings without coordinates skipped",
                    len(raw) - len(located))
    assigned, excluded = assign_listings(located, BlockIndex(blocks))
    design = eh.assemble_design_matrix(assigned, f, e, encoder=encoder)

    col_index = {lab: j for j, lab in enumerate(design.labels)}
    preds = np.zeros(len(design.ids))
    for model in models:
        try:
            idx = np.array([col_index[lab] for lab in model.feature_names], dtype=int)
        except KeyError as exc:
            raise HoodvalError(f"model feature {exc} missing from design; rerun egohood") from exc
        preds += model.predict(design.x[:, idx])
    preds /= len(models)

    nowcast_path = out / f"nowcast_{variant}.csv"
    with open(nowcast_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "prediction"])
        for lid, p in zip(design.ids, preds):
            w.writerow([lid, eh.format_cell(float(p))])
    manifest.record_output(nowcast_path, "nowcast")
    manifest.save()
    log.info("nowcast: %d predictions (%d unassignable)", len(design.ids), len(excluded))
    return 0


def cmd_explain(args) -> int:
    s = _settings(args)
    out = _out_dir(args)
    variant = args.variant
    manifest = Manifest.load(out)
    ids, x, labels, y, roles = _load_design(out, manifest, "explain")
    models = _load_variant_models(out, manifest, variant, len(roles), "explain")

    if args.listing not in ids:
        raise HoodvalError(f"listing {args.listing!r} not in the design matrix")
    row = ids.index(args.listing)
    rotation = next((r for r in range(len(roles))
                     if roles[r][args.listing] == "holdout"), 0)
    model = models[rotation]
    col_index = {lab: j for j, lab in enumerate(labels)}
    idx = np.array([col_index[lab] for lab in model.feature_names], dtype=int)
    report = ev.path_contributions(model, x[row, idx], listing_id=args.listing)

    text_path = out / f"explanation_{args.listing}.txt"
    header = f"variant {variant}, rotation {rotation} model\n"
    text_path.write_text(header + ev.format_explanation(report, k=8))
    contrib_path = out / f"contributions_{args.listing}.csv"
    ev.write_contributions_csv(contrib_path, [report])
    for p in (text_path, contrib_path):
        manifest.record_output(p, "explain")
    manifest.save()
    sys.stdout.write(header + ev.format_explanation(report, k=8))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hoodval",
        description="Neighborhood-aware housing price estimation pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("--out", required=True, help="output directory")
        if config:
            p.add_argument("--config", required=True, help="key=value config file")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                           help="override any config key (repeatable)")

    p = sub.add_parser("synth", help="generate a synthetic test city")
    common(p, config=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blocks", type=int, default=400)
    p.add_argument("--listings", type=int, default=3000)
    p.add_argument("--cell-side", type=float, default=500.0)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--share", type=float, default=0.6,
                   help="target share of price variance on neighborhood features")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="filter listings and assign ego-places")
    common(p)
    p.add_argument("--reference-date", dest="reference_date")
    p.add_argument("--max-age-days", dest="max_age_days", type=int)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("features", help="compute per-block features")
    common(p)
    p.add_argument("--max-walk", dest="max_walk_m", type=float)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("egohood", help="aggregate egohoods and build the design matrix")
    common(p)
    p.set_defaults(func=cmd_egohood)

    p = sub.add_parser("folds", help="spatially independent cross-validation folds")
    common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--tile-side", dest="tile_side_m", type=float)
    p.add_argument("--k", dest="k_folds", type=int)
    p.set_defaults(func=cmd_folds)

    p = sub.add_parser("train", help="train boosted-tree models per rotation")
    common(p)
    p.add_argument("--variant", choices=VARIANTS, default="full")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="holdout metrics and variant comparison")
    common(p)
    p.add_argument("--variants", help="comma-separated variant list (default: all trained)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("nowcast", help="predict prices for new listings")
    common(p)
    p.add_argument("--listings", required=True, help="listing CSV to price")
    p.add_argument("--variant", choices=VARIANTS, default="full")
    p.set_defaults(func=cmd_nowcast)

    p = sub.add_parser("explain", help="per-feature contribution breakdown for one listing")
    common(p)
    p.add_argument("--listing", required=True, help="listing id")
    p.add_argument("--variant", choices=VARIANTS, default="full")
    p.set_defaults(func=cmd_explain)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except HoodvalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
