"""Regularized gradient-boosted regression trees, squared-error objective.

Second-order boosting with g = prediction - target and h = 1 per row.
Leaf weights solve the L1/L2-penalized one-dimensional problem in closed
form and split gains measure the exact objective decrease, so both can be
audited numerically.  Split search is exact greedy over midpoint
thresholds with sparsity-aware handling: rows missing the split feature
follow a per-node default direction chosen by gain.

The learning rate is applied at prediction time; trees store raw leaf
weights.  Internal nodes carry the cover-weighted mean of their subtree
leaf weights, which the per-feature contribution decomposition consumes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .geomodel import HoodvalError

MODEL_FORMAT = "hoodval-gbt"
MODEL_VERSION = 1


class ModelLoadError(HoodvalError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    n_estimators: int = 4000
    max_depth: int = 20
    reg_lambda: float = 5.0
    reg_alpha: float = 1.0
    min_child_weight: float = 3.0
    gamma: float = 0.0
    early_stopping_rounds: int = 50

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise HoodvalError("learning rate must be positive")
        if self.n_estimators < 0 or self.max_depth < 1:
            raise HoodvalError("bad tree budget")
        if self.reg_lambda < 0 or self.reg_alpha < 0 or self.gamma < 0:
            raise HoodvalError("penalties must be non-negative")
        if self.min_child_weight < 0:
            raise HoodvalError("min_child_weight must be non-negative")


def soft_threshold(g: float, alpha: float) -> float:
    if g > alpha:
        return g - alpha
    if g < -alpha:
        return g + alpha
    return 0.0


def leaf_weight(g_sum: float, h_sum: float, reg_lambda: float, reg_alpha: float) -> float:
    """Minimizer of  w*G + 0.5*(H + lambda)*w^2 + alpha*|w|."""
    return -soft_threshold(g_sum, reg_alpha) / (h_sum + reg_lambda)


def _score(g_sum, h_sum, reg_lambda, reg_alpha):
    # |ST(g, a)| == max(|g| - a, 0), and only the square is used
    if reg_alpha:
        s = np.maximum(np.abs(g_sum) - reg_alpha, 0.0)
    else:
        s = np.abs(g_sum)
    return s * s / (h_sum + reg_lambda)


def split_gain(gl, hl, gr, hr, reg_lambda: float, reg_alpha: float, gamma: float):
    """Objective decrease of splitting a node into (gl,hl) and (gr,hr)."""
    return 0.5 * (_score(gl, hl, reg_lambda, reg_alpha)
                  + _score(gr, hr, reg_lambda, reg_alpha)
                  - _score(gl + gr, hl + hr, reg_lambda, reg_alpha)) - gamma


@dataclass
class Tree:
    """Flat node arrays; feature == -1 marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    default_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray      # cover-weighted subtree mean of leaf weights
    cover: np.ndarray
    gain: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def is_leaf(self, i: int) -> bool:
        return self.feature[i] < 0

    def predict(self, x: np.ndarray) -> np.ndarray:
        n = x.shape[0]
        node = np.zeros(n, dtype=np.int64)
        while True:
            feat = self.feature[node]
            live = feat >= 0
            if not live.any():
                break
            rows = np.nonzero(live)[0]
            cur = node[rows]
            vals = x[rows, self.feature[cur]]
            go_left = np.where(np.isnan(vals), self.default_left[cur],
                               vals < self.threshold[cur])
            node[rows] = np.where(go_left, self.left[cur], self.right[cur])
        return self.value[node]

    def depth(self) -> int:
        d = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                d[self.left[i]] = d[i] + 1
                d[self.right[i]] = d[i] + 1
        return int(d.max()) if self.n_nodes else 0

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "default_left": self.default_left.astype(int).tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "cover": self.cover.tolist(),
            "gain": self.gain.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(feature=np.asarray(d["feature"], dtype=np.int64),
                   threshold=np.asarray(d["threshold"], dtype=float),
                   default_left=np.asarray(d["default_left"], dtype=bool),
                   left=np.asarray(d["left"], dtype=np.int64),
                   right=np.asarray(d["right"], dtype=np.int64),
                   value=np.asarray(d["value"], dtype=float),
                   cover=np.asarray(d["cover"], dtype=float),
                   gain=np.asarray(d["gain"], dtype=float))


@dataclass
class _Split:
    gain: float
    feature: int
    threshold: float
    default_left: bool


class _TreeBuilder:
    """Grows one tree.  Feature columns are argsorted once at the root
    (NaNs last) and the per-column orderings are partitioned alongside the
    rows on every split, so no node below the root sorts anything."""

    def __init__(self, x: np.ndarray, g: np.ndarray, h: np.ndarray, cfg: TrainConfig):
        self.x = x
        self.g = g
        self.h = h
        self.cfg = cfg
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.default_left: list[bool] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[float] = []
        self.cover: list[float] = []
        self.gain: list[float] = []
        self.leaf_rows: list[tuple[np.ndarray, float]] = []

    def _new_node(self) -> int:
        for lst, v in ((self.feature, -1), (self.threshold, 0.0), (self.default_left, True),
                       (self.left, -1), (self.right, -1), (self.value, 0.0),
                       (self.cover, 0.0), (self.gain, 0.0)):
            lst.append(v)
        return len(self.feature) - 1

    def _best_split(self, ids: np.ndarray, order: np.ndarray,
                    g_all: float, h_all: float) -> _Split | None:
        """Exact greedy over every feature at once.

        ``order`` columns hold this node's row ids sorted by that feature
        with NaNs last, so candidate cuts fall only at strict-increase
        positions inside the present prefix; positions touching the NaN
        tail compare false and mask themselves out.  Ties resolve to the
        lowest feature index, then the lowest threshold, then routing
        missing values left.
        """
        cfg = self.cfg
        n = ids.shape[0]
        if n < 2:
            return None
        sv = np.take_along_axis(self._xl, order, axis=0)
        sg = np.cumsum(self._gl[order], axis=0)
        sh = np.cumsum(self._hl[order], axis=0)

        cuttable = sv[:-1] < sv[1:]  # false at and beyond the NaN tail
        if not cuttable.any():
            return None
        n_feat = sv.shape[1]
        cnt = n - np.isnan(sv).sum(axis=0)
        has_present = cnt > 0
        cols = np.arange(n_feat)
        g_miss = g_all - np.where(has_present, sg[np.maximum(cnt - 1, 0), cols], 0.0)
        h_miss = h_all - np.where(has_present, sh[np.maximum(cnt - 1, 0), cols], 0.0)

        gl_p = sg[:-1]
        hl_p = sh[:-1]
        lam, alpha, mcw = cfg.reg_lambda, cfg.reg_alpha, cfg.min_child_weight
        parent = _score(g_all, h_all, lam, alpha)

        # cut positions inside the NaN tail double-count missing hessians;
        # they are masked below, so their garbage gains never survive
        with np.errstate(divide="ignore", invalid="ignore"):
            # option A: missing rows go left; option B: right
            gl_a, hl_a = gl_p + g_miss, hl_p + h_miss
            hr_a = h_all - hl_a
            gain_a = 0.5 * (_score(gl_a, hl_a, lam, alpha)
                            + _score(g_all - gl_a, hr_a, lam, alpha)
                            - parent) - cfg.gamma
            gain_a = np.where(cuttable & (hl_a >= mcw) & (hr_a >= mcw), gain_a, -np.inf)

            hr_b = h_all - hl_p
            gain_b = 0.5 * (_score(gl_p, hl_p, lam, alpha)
                            + _score(g_all - gl_p, hr_b, lam, alpha)
                            - parent) - cfg.gamma
            gain_b = np.where(cuttable & (hl_p >= mcw) & (hr_b >= mcw), gain_b, -np.inf)

        use_left = gain_a >= gain_b  # ties send missing left
        gains = np.where(use_left, gain_a, gain_b)

        # feature-major flattening makes argmax prefer the lowest feature
        # index and then the lowest threshold on exact ties
        flat = np.ascontiguousarray(gains.T).ravel()
        k = int(np.argmax(flat))
        best_gain = float(flat[k])
        if not np.isfinite(best_gain) or best_gain <= 0:
            return None
        j, i = divmod(k, gains.shape[0])
        a, b = float(sv[i, j]), float(sv[i + 1, j])
        thr = (a + b) / 2.0
        if not (a < thr):
            thr = b
        return _Split(gain=best_gain, feature=j, threshold=thr,
                      default_left=bool(use_left[i, j]))

    def build(self, rows: np.ndarray, order: np.ndarray | None = None) -> int:
        self._rows = rows
        if order is None:
            # local copies so sort order indices address the row subset directly
            self._xl = self.x[rows]
            self._gl = self.g[rows]
            self._hl = self.h[rows]
            order = np.argsort(self._xl, axis=0, kind="stable")
        else:
            # precomputed whole-matrix order: rows must be arange(n)
            self._xl = self.x
            self._gl = self.g
            self._hl = self.h
        root = self._grow(np.arange(rows.shape[0]), order, depth=0)
        # fill subtree values bottom-up: leaves already hold their weight
        for i in range(len(self.feature) - 1, -1, -1):
            if self.feature[i] >= 0:
                cl, cr = self.left[i], self.right[i]
                tot = self.cover[cl] + self.cover[cr]
                self.value[i] = (self.cover[cl] * self.value[cl]
                                 + self.cover[cr] * self.value[cr]) / tot
        return root

    def _grow(self, ids: np.ndarray, order: np.ndarray, depth: int) -> int:
        """ids index into the build() row subset; order is (len(ids), F)."""
        node = self._new_node()
        g_sum = float(self._gl[ids].sum())
        h_sum = float(self._hl[ids].sum())
        self.cover[node] = h_sum

        split = None
        if depth < self.cfg.max_depth:
            split = self._best_split(ids, order, g_sum, h_sum)
        if split is None:
            w = leaf_weight(g_sum, h_sum, self.cfg.reg_lambda, self.cfg.reg_alpha)
            self.value[node] = w
            self.leaf_rows.append((self._rows[ids], w))
            return node

        col = self._xl[ids, split.feature]
        go_left = np.where(np.isnan(col), split.default_left, col < split.threshold)
        in_left = np.zeros(self._rows.shape[0], dtype=bool)
        in_left[ids[go_left]] = True
        sel = in_left[order.T]  # (F, n_node), per-column membership in order
        ord_t = order.T
        n_left = int(go_left.sum())
        left_order = ord_t[sel].reshape(sel.shape[0], n_left).T
        right_order = ord_t[~sel].reshape(sel.shape[0], ids.shape[0] - n_left).T

        self.feature[node] = split.feature
        self.threshold[node] = split.threshold
        self.default_left[node] = split.default_left
        self.gain[node] = split.gain
        self.left[node] = self._grow(ids[go_left], left_order, depth + 1)
        self.right[node] = self._grow(ids[~go_left], right_order, depth + 1)
        return node

    def to_tree(self) -> Tree:
        return Tree(feature=np.array(self.feature, dtype=np.int64),
                    threshold=np.array(self.threshold, dtype=float),
                    default_left=np.array(self.default_left, dtype=bool),
                    left=np.array(self.left, dtype=np.int64),
                    right=np.array(self.right, dtype=np.int64),
                    value=np.array(self.value, dtype=float),
                    cover=np.array(self.cover, dtype=float),
                    gain=np.array(self.gain, dtype=float))


@dataclass
class GBTModel:
    config: TrainConfig
    base_score: float
    feature_names: list[str]
    trees: list[Tree] = field(default_factory=list)
    val_mae: list[float] = field(default_factory=list)  # index 0 = base-only
    best_round: int = 0

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.full(x.shape[0], self.base_score)
        for t in self.trees:
            out += self.config.learning_rate * t.predict(x)
        return out

    def gain_by_feature(self) -> dict[str, float]:
        tot = {name: 0.0 for name in self.feature_names}
        for t in self.trees:
            for i in range(t.n_nodes):
                f = t.feature[i]
                if f >= 0:
                    tot[self.feature_names[f]] += float(t.gain[i])
        return tot

    def splits_by_feature(self) -> dict[str, int]:
        tot = {name: 0 for name in self.feature_names}
        for t in self.trees:
            for i in range(t.n_nodes):
                f = t.feature[i]
                if f >= 0:
                    tot[self.feature_names[f]] += 1
        return tot

    def save(self, path) -> None:
        doc = {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "config": asdict(self.config),
            "base_score": self.base_score,
            "feature_names": self.feature_names,
            "best_round": self.best_round,
            "val_mae": self.val_mae,
            "trees": [t.to_dict() for t in self.trees],
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, separators=(",", ":"))
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "GBTModel":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ModelLoadError(f"cannot read model file {path}: {exc}") from exc
        if doc.get("format") != MODEL_FORMAT:
            raise ModelLoadError(f"{path} is not a {MODEL_FORMAT} file")
        if doc.get("version") != MODEL_VERSION:
            raise ModelLoadError(
                f"unsupported model version {doc.get('version')!r}, expected {MODEL_VERSION}")
        try:
            model = cls(config=TrainConfig(**doc["config"]),
                        base_score=float(doc["base_score"]),
                        feature_names=list(doc["feature_names"]),
                        trees=[Tree.from_dict(t) for t in doc["trees"]],
                        val_mae=[float(v) for v in doc["val_mae"]],
                        best_round=int(doc["best_round"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelLoadError(f"malformed model file {path}: {exc}") from exc
        return model


def fit(x: np.ndarray, y: np.ndarray, feature_names: list[str],
        config: TrainConfig | None = None,
        val_x: np.ndarray | None = None, val_y: np.ndarray | None = None,
        base_score: float | None = None) -> GBTModel:
    """Boost squared error on (x, y); when a validation pair is given the
    model is truncated to the round with the lowest validation MAE."""
    cfg = config or TrainConfig()
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise HoodvalError("design matrix and targets disagree on row count")
    if x.shape[1] != len(feature_names):
        raise HoodvalError("feature name list does not match matrix width")
    if x.shape[0] == 0:
        raise HoodvalError("cannot fit on an empty training set")
    if not np.isfinite(y).all():
        raise HoodvalError("targets must be finite")

    base = float(np.mean(y)) if base_score is None else float(base_score)
    model = GBTModel(config=cfg, base_score=base, feature_names=list(feature_names))

    pred = np.full(x.shape[0], base)
    h = np.ones(x.shape[0])
    use_val = val_x is not None and val_y is not None
    if use_val:
        val_x = np.asarray(val_x, dtype=float)
        val_y = np.asarray(val_y, dtype=float)
        val_pred = np.full(val_x.shape[0], base)
        best_mae = float(np.mean(np.abs(val_pred - val_y)))
        model.val_mae.append(best_mae)
        best_round = 0

    rows = np.arange(x.shape[0])
    base_order = np.argsort(x, axis=0, kind="stable")  # shared by every round
    for rnd in range(1, cfg.n_estimators + 1):
        g = pred - y
        builder = _TreeBuilder(x, g, h, cfg)
        builder.build(rows, order=base_order)
        tree = builder.to_tree()
        if tree.n_nodes == 1 and tree.value[0] == 0.0:
            break  # nothing left to move; every later tree would be identical
        model.trees.append(tree)
        for leaf_rows, w in builder.leaf_rows:
            pred[leaf_rows] += cfg.learning_rate * w
        if use_val:
            val_pred += cfg.learning_rate * tree.predict(val_x)
            mae = float(np.mean(np.abs(val_pred - val_y)))
            model.val_mae.append(mae)
            if mae < best_mae:
                best_mae = mae
                best_round = rnd
            elif rnd - best_round >= cfg.early_stopping_rounds:
                break

    if use_val:
        model.best_round = best_round
        model.trees = model.trees[:best_round]
    else:
        model.best_round = len(model.trees)
    return model
