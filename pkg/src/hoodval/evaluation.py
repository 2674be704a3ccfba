"""Error metrics, prediction decomposition and feature importance.

A prediction decomposes exactly into bias + signed per-feature
contributions by walking each tree's decision path and crediting the
tested feature with the change in expected value at every step; the
telescoping sum makes bias + contributions equal the model output up to
float addition order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .geomodel import HoodvalError
from .egohood import format_cell
from .gbt import GBTModel


def mae(y_true, y_pred) -> float:
    y = np.asarray(y_true, dtype=float)
    x = np.asarray(y_pred, dtype=float)
    if y.shape != x.shape or y.size == 0:
        raise HoodvalError("mae needs one or more (y, x) pairs of equal length")
    return float(np.mean(np.abs(y - x)))


def mdape(y_true, y_pred) -> float:
    """Median absolute percentage error; the even-length median averages
    the two central values."""
    y = np.asarray(y_true, dtype=float)
    x = np.asarray(y_pred, dtype=float)
    if y.shape != x.shape or y.size == 0:
        raise HoodvalError("mdape needs one or more (y, x) pairs of equal length")
    if (y == 0).any():
        raise HoodvalError("mdape undefined for zero targets")
    return float(np.median(np.abs((y - x) / y)) * 100.0)


@dataclass
class ContributionReport:
    listing_id: str
    bias: float
    contributions: dict[str, float]
    prediction: float

    def top_positive(self, k: int = 8) -> list[tuple[str, float]]:
        pos = [(n, v) for n, v in self.contributions.items() if v > 0]
        return sorted(pos, key=lambda t: (-t[1], t[0]))[:k]

    def top_negative(self, k: int = 8) -> list[tuple[str, float]]:
        neg = [(n, v) for n, v in self.contributions.items() if v < 0]
        return sorted(neg, key=lambda t: (t[1], t[0]))[:k]


def path_contributions(model: GBTModel, x_row, listing_id: str = "") -> ContributionReport:
    x = np.asarray(x_row, dtype=float).ravel()
    if x.shape[0] != len(model.feature_names):
        raise HoodvalError(
            f"input has {x.shape[0]} features, model expects {len(model.feature_names)}")
    lr = model.config.learning_rate
    bias = model.base_score
    contrib = np.zeros(len(model.feature_names))
    for t in model.trees:
        bias += lr * float(t.value[0])
        i = 0
        while t.feature[i] >= 0:
            f = t.feature[i]
            v = x[f]
            nxt = t.left[i] if (t.default_left[i] if math.isnan(v)
                                else v < t.threshold[i]) else t.right[i]
            contrib[f] += lr * (t.value[nxt] - t.value[i])
            i = nxt
    contributions = {model.feature_names[j]: float(contrib[j])
                     for j in range(len(contrib)) if contrib[j] != 0.0}
    prediction = bias + float(contrib.sum())
    return ContributionReport(listing_id=listing_id, bias=bias,
                              contributions=contributions, prediction=prediction)


@dataclass
class ImportanceTable:
    rows: list[tuple[str, float, int, str]]  # feature, gain, splits, group
    group_gain: dict[str, float]
    group_share: dict[str, float]

    def gain_of(self, feature: str) -> float:
        for name, gain, _, _ in self.rows:
            if name == feature:
                return gain
        raise KeyError(feature)


def _default_group(feature_name: str) -> str:
    return feature_name.split(":", 1)[0] if ":" in feature_name else "other"


def feature_importance(model: GBTModel, grouping=None) -> ImportanceTable:
    """Total split gain per feature, descending; gains are also summed per
    group and normalized to shares."""
    gains = model.gain_by_feature()
    splits = model.splits_by_feature()
    group_fn = grouping or _default_group
    rows = [(name, gains[name], splits[name], group_fn(name))
            for name in model.feature_names]
    rows.sort(key=lambda r: (-r[1], r[0]))
    group_gain: dict[str, float] = {}
    for _, gain, _, group in rows:
        group_gain[group] = group_gain.get(group, 0.0) + gain
    total = sum(group_gain.values())
    group_share = {g: (v / total if total > 0 else 0.0) for g, v in group_gain.items()}
    return ImportanceTable(rows=rows, group_gain=group_gain, group_share=group_share)


def combined_importance(models: list[GBTModel], grouping=None) -> ImportanceTable:
    """Importance over several models of the same feature space (e.g. the
    five rotation models of one variant), gains and split counts summed."""
    if not models:
        raise HoodvalError("no models to combine")
    names = models[0].feature_names
    for m in models[1:]:
        if m.feature_names != names:
            raise HoodvalError("models disagree on feature names")
    group_fn = grouping or _default_group
    gains = {n: 0.0 for n in names}
    splits = {n: 0 for n in names}
    for m in models:
        for n, v in m.gain_by_feature().items():
            gains[n] += v
        for n, v in m.splits_by_feature().items():
            splits[n] += v
    rows = [(n, gains[n], splits[n], group_fn(n)) for n in names]
    rows.sort(key=lambda r: (-r[1], r[0]))
    group_gain: dict[str, float] = {}
    for _, gain, _, group in rows:
        group_gain[group] = group_gain.get(group, 0.0) + gain
    total = sum(group_gain.values())
    group_share = {g: (v / total if total > 0 else 0.0) for g, v in group_gain.items()}
    return ImportanceTable(rows=rows, group_gain=group_gain, group_share=group_share)


@dataclass
class RotationEval:
    rotation: int
    ids: list[str]
    y: np.ndarray
    pred: np.ndarray


@dataclass
class RunReport:
    per_rotation: list[tuple[int, int, float, float]]  # rotation, n, mae, mdape
    pooled_n: int
    pooled_mae: float
    pooled_mdape: float


def evaluate_run(rotations: list[RotationEval], k: int = 5) -> RunReport:
    """Per-rotation and pooled holdout errors; requires one evaluation per
    rotation 0..k-1."""
    seen = sorted(r.rotation for r in rotations)
    if seen != list(range(k)):
        raise HoodvalError(f"expected rotations {list(range(k))}, got {seen}")
    per = []
    ys, preds = [], []
    for r in sorted(rotations, key=lambda r: r.rotation):
        per.append((r.rotation, len(r.ids), mae(r.y, r.pred), mdape(r.y, r.pred)))
        ys.append(r.y)
        preds.append(r.pred)
    y_all = np.concatenate(ys)
    p_all = np.concatenate(preds)
    return RunReport(per_rotation=per, pooled_n=int(y_all.size),
                     pooled_mae=mae(y_all, p_all), pooled_mdape=mdape(y_all, p_all))


def comparison_table(reports: dict[str, RunReport]) -> str:
    """Variant comparison rows, one line per model variant."""
    width = max((len(v) for v in reports), default=7)
    lines = [f"{'variant'.ljust(width)}  {'n':>6}  {'MAE':>14}  {'MdAPE':>8}"]
    for name, rep in reports.items():
        lines.append(f"{name.ljust(width)}  {rep.pooled_n:>6}  "
                     f"{rep.pooled_mae:>14.2f}  {rep.pooled_mdape:>7.2f}%")
    return "\n".join(lines) + "\n"


def format_run_report(report: RunReport) -> str:
    lines = ["rotation  n_holdout        MAE    MdAPE"]
    for rot, n, m, md in report.per_rotation:
        lines.append(f"{rot:>8}  {n:>9}  {m:>9.2f}  {md:>6.2f}%")
    lines.append(f"{'pooled':>8}  {report.pooled_n:>9}  "
                 f"{report.pooled_mae:>9.2f}  {report.pooled_mdape:>6.2f}%")
    return "\n".join(lines) + "\n"


def format_explanation(report: ContributionReport, k: int = 8) -> str:
    lines = [f"listing {report.listing_id}",
             f"prediction: {report.prediction:.2f}",
             f"bias:       {report.bias:.2f}",
             "",
             "top positive contributions:"]
    for name, v in report.top_positive(k):
        lines.append(f"  {v:>+14.2f}  {name}")
    lines.append("top negative contributions:")
    for name, v in report.top_negative(k):
        lines.append(f"  {v:>+14.2f}  {name}")
    residual = report.prediction - report.bias - sum(report.contributions.values())
    lines.append("")
    lines.append(f"check: bias + contributions - prediction = {residual:.3e}")
    return "\n".join(lines) + "\n"


def write_predictions_csv(path, ids, y, pred) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "asked_price", "prediction"])
        for lid, yv, pv in zip(ids, y, pred):
            w.writerow([lid, format_cell(float(yv)), format_cell(float(pv))])


def write_contributions_csv(path, reports: list[ContributionReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "feature", "value"])
        for rep in reports:
            w.writerow([rep.listing_id, "__bias__", format_cell(rep.bias)])
            for name in sorted(rep.contributions):
                w.writerow([rep.listing_id, name, format_cell(rep.contributions[name])])


def write_importance_csv(path, table: ImportanceTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "gain", "splits", "group"])
        for name, gain, splits, group in table.rows:
            w.writerow([name, format_cell(gain), splits, group])
