"""Histogram gradient-boosted regression trees with sample weights.

Squared-error boosting: each iteration fits a depth-limited tree to the
current residuals on quantile-binned features and adds it with shrinkage.
Leaves take the L2-regularised weighted mean residual

    value = sum(w * r) / (sum(w) + l2_leaf_reg)

and splits maximise the matching reduction in regularised loss. Categorical
columns are replaced by a smoothed weighted target mean fitted on the
training rows. Missing numeric values are routed to the left child.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np
import pandas as pd

try:
    import numba
except ImportError:  # pragma: no cover - pure numpy path below
    numba = None


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    max_iterations: int = 2000
    learning_rate: float = 0.1
    max_depth: int = 6
    l2_leaf_reg: float = 3.0
    feature_subsample: float = 1.0
    row_subsample: float = 1.0
    min_samples_leaf: int = 1
    histogram_bins: int = 255
    early_stopping_rounds: int = 500
    cat_prior_strength: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.l2_leaf_reg < 0:
            raise ValueError("l2_leaf_reg must be >= 0")
        if not 0.0 < self.feature_subsample <= 1.0 or not 0.0 < self.row_subsample <= 1.0:
            raise ValueError("subsample fractions must lie in (0, 1]")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if not 2 <= self.histogram_bins <= 255:
            raise ValueError("histogram_bins must lie in [2, 255]")
        if self.early_stopping_rounds < 1:
            raise ValueError("early_stopping_rounds must be >= 1")
        if self.early_stopping_rounds > max(self.max_iterations, 1):
            raise ValueError("early_stopping_rounds cannot exceed max_iterations")

    def with_iterations(self, n: int) -> "TrainConfig":
        return replace(self, max_iterations=n,
                       early_stopping_rounds=min(self.early_stopping_rounds, max(n, 1)))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ValueError(f"unknown train config keys: {sorted(bad)}")
        return cls(**d)

    def as_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# categorical encoding
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TargetEncoder:
    mapping: dict[str, float]
    prior: float

    def transform(self, values) -> np.ndarray:
        keys = _as_str(values)
        return np.array([self.mapping.get(k, self.prior) for k in keys], dtype=np.float64)


def _as_str(values) -> list[str]:
    return [str(v) for v in np.asarray(values, dtype=object)]


def encode_categoricals(column, target, weights, prior_strength: float
                        ) -> tuple[TargetEncoder, np.ndarray]:
    """Smoothed weighted target mean per category.

    ``enc(v) = (sum_v w*y + k * ybar) / (sum_v w + k)`` with ``ybar`` the
    global weighted mean; unseen categories map to ``ybar``.
    """
    keys = _as_str(column)
    if not keys:
        raise TrainingError("cannot fit an encoder on zero rows")
    y = np.asarray(target, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    ybar = float(np.sum(w * y) / np.sum(w))
    codes, uniq = pd.factorize(pd.Series(keys), sort=True)
    sw = np.bincount(codes, weights=w, minlength=len(uniq))
    swy = np.bincount(codes, weights=w * y, minlength=len(uniq))
    if math.isinf(prior_strength):
        enc = np.full(len(uniq), ybar)
    else:
        enc = (swy + prior_strength * ybar) / (sw + prior_strength)
    mapping = {str(k): float(v) for k, v in zip(uniq, enc)}
    return TargetEncoder(mapping, ybar), enc[codes]


# ---------------------------------------------------------------------------
# binning
# ---------------------------------------------------------------------------

def fit_bin_edges(x: np.ndarray, max_bins: int) -> np.ndarray:
    """Split thresholds for one feature; a value ``v`` goes left of edge ``e`` iff ``v <= e``."""
    x = x[~np.isnan(x)]
    uniq = np.unique(x)
    if len(uniq) <= 1:
        return np.empty(0)
    if len(uniq) <= max_bins:
        return (uniq[:-1] + uniq[1:]) / 2.0
    qs = np.quantile(x, np.arange(1, max_bins) / max_bins, method="linear")
    edges = np.unique(qs)
    # the largest value must stay strictly to the right of the last edge
    return edges[edges < uniq[-1]]


def apply_bins(x: np.ndarray, edges: np.ndarray) -> np.ndarray:
    b = np.searchsorted(edges, x, side="left")
    b[np.isnan(x)] = 0
    return b.astype(np.uint8)


# ---------------------------------------------------------------------------
# trees
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Tree:
    """Flat binary tree; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    bin_split: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray
    depth: int

    def leaf_of(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        for _ in range(self.depth):
            feat = self.feature[node]
            inner = feat >= 0
            if not inner.any():
                break
            x = X[rows, np.where(inner, feat, 0)]
            left = ~(x > self.threshold[node])    # NaN goes left
            node = np.where(inner, np.where(left, self.left[node], self.right[node]), node)
        return node

    def leaf_of_binned(self, Xb: np.ndarray) -> np.ndarray:
        node = np.zeros(Xb.shape[0], dtype=np.int64)
        rows = np.arange(Xb.shape[0])
        for _ in range(self.depth):
            feat = self.feature[node]
            inner = feat >= 0
            if not inner.any():
                break
            b = Xb[rows, np.where(inner, feat, 0)]
            left = b <= self.bin_split[node]
            node = np.where(inner, np.where(left, self.left[node], self.right[node]), node)
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.leaf_of(X)]

    def to_dict(self) -> dict:
        return {"feature": self.feature.tolist(), "threshold": self.threshold.tolist(),
                "bin_split": self.bin_split.tolist(), "left": self.left.tolist(),
                "right": self.right.tolist(), "value": self.value.tolist(),
                "gain": self.gain.tolist(), "depth": self.depth}

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(np.array(d["feature"], dtype=np.int64), np.array(d["threshold"], dtype=np.float64),
                   np.array(d["bin_split"], dtype=np.int64), np.array(d["left"], dtype=np.int64),
                   np.array(d["right"], dtype=np.int64), np.array(d["value"], dtype=np.float64),
                   np.array(d["gain"], dtype=np.float64), int(d["depth"]))


def _find_splits_numpy(sub, r_idx, s, grad, hess, G, H, A, B, lam, msl):
    """Best split per active node from per-node histograms (vectorised)."""
    nf = sub.shape[1]
    idx = (sub[r_idx].astype(np.int64) + (np.arange(nf, dtype=np.int64) * B)[None, :]
           + (s * (nf * B))[:, None]).ravel()
    size = A * nf * B
    hg = np.bincount(idx, weights=np.repeat(grad[r_idx], nf), minlength=size).reshape(A, nf, B)
    hh = np.bincount(idx, weights=np.repeat(hess[r_idx], nf), minlength=size).reshape(A, nf, B)
    gl = np.cumsum(hg, axis=2)[:, :, :-1]
    hl = np.cumsum(hh, axis=2)[:, :, :-1]
    Gn, Hn = G[:, None, None], H[:, None, None]
    gr, hr = Gn - gl, Hn - hl
    ok = (hl > 0) & (hr > 1e-12 * Hn)
    if msl > 1:
        hc = np.bincount(idx, minlength=size).reshape(A, nf, B)
        cl = np.cumsum(hc, axis=2)[:, :, :-1]
        cnt = np.bincount(s, minlength=A)[:, None, None]
        ok &= (cl >= msl) & (cnt - cl >= msl)
    with np.errstate(divide="ignore", invalid="ignore"):
        score = gl * gl / (hl + lam) + gr * gr / (hr + lam) - Gn * Gn / (Hn + lam)
    score = np.where(ok, score, -np.inf).reshape(A, -1)
    best = np.argmax(score, axis=1)
    rows = np.arange(A)
    bf, bb = best // (B - 1), best % (B - 1)
    return (bf, bb, score[rows, best], gl.reshape(A, -1)[rows, best],
            hl.reshape(A, -1)[rows, best])


def _find_splits_loop(sub, r_idx, s, grad, hess, G, H, A, B, lam, msl):
    # Same arithmetic and tie order as the numpy version: histogram cells are
    # filled in row order and scanned feature-major, bin-minor.
    nf = sub.shape[1]
    best_gain = np.full(A, -np.inf)
    best_f = np.zeros(A, dtype=np.int64)
    best_b = np.zeros(A, dtype=np.int64)
    best_gl = np.zeros(A)
    best_hl = np.zeros(A)
    cnt = np.zeros(A, dtype=np.int64)
    for k in range(r_idx.shape[0]):
        cnt[s[k]] += 1
    hg = np.zeros((A, B))
    hh = np.zeros((A, B))
    hc = np.zeros((A, B), dtype=np.int64)
    for f in range(nf):
        hg[:] = 0.0
        hh[:] = 0.0
        hc[:] = 0
        for k in range(r_idx.shape[0]):
            r = r_idx[k]
            a = s[k]
            b = sub[r, f]
            hg[a, b] += grad[r]
            hh[a, b] += hess[r]
            hc[a, b] += 1
        for a in range(A):
            parent = G[a] * G[a] / (H[a] + lam)
            gl = 0.0
            hl = 0.0
            cl = 0
            for b in range(B - 1):
                gl += hg[a, b]
                hl += hh[a, b]
                cl += hc[a, b]
                gr = G[a] - gl
                hr = H[a] - hl
                if hl > 0 and hr > 1e-12 * H[a] and cl >= msl and cnt[a] - cl >= msl:
                    sc = gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent
                    if sc > best_gain[a]:
                        best_gain[a] = sc
                        best_f[a] = f
                        best_b[a] = b
                        best_gl[a] = gl
                        best_hl[a] = hl
    return best_f, best_b, best_gain, best_gl, best_hl


if numba is not None:
    _find_splits = numba.njit(cache=True, nogil=True)(_find_splits_loop)
else:  # pragma: no cover
    _find_splits = _find_splits_numpy


def _grow_tree(Xb, feats, grad, hess, edges, n_bins, cfg: TrainConfig) -> Tree:
    """Level-wise growth on binned rows.

    ``Xb`` holds only the sampled rows and ``feats`` the sampled feature
    indices into the full feature list; ``grad`` is ``w * residual`` and
    ``hess`` is ``w``.
    """
    n = Xb.shape[0]
    B = n_bins
    lam = float(cfg.l2_leaf_reg)
    sub = Xb if len(feats) == Xb.shape[1] else np.asfortranarray(Xb[:, feats])
    gsq = grad * grad / np.where(hess > 0, hess, 1.0)   # w * r^2

    feature, threshold, bin_split = [-1], [np.nan], [-1]
    left, right, value, gain = [-1], [-1], [0.0], [0.0]

    slot = np.zeros(n, dtype=np.int64)       # index into ``active``; -1 once in a leaf
    active = [0]
    G = np.array([np.sum(grad)])
    H = np.array([np.sum(hess)])
    depth = 0
    for level in range(cfg.max_depth):
        A = len(active)
        r_idx = np.nonzero(slot >= 0)[0]
        s = slot[r_idx]
        bf, bb, bgain, bgl, bhl = _find_splits(sub, r_idx, s, grad, hess, G, H, A, B,
                                               lam, cfg.min_samples_leaf)
        node_sse = np.bincount(s, weights=gsq[r_idx], minlength=A)

        next_active, nG, nH = [], [], []
        child_of = np.full((A, 2), -1, dtype=np.int64)
        for a, node in enumerate(active):
            g = bgain[a]
            if not (np.isfinite(g) and node_sse[a] > 0 and g > 1e-10 * node_sse[a]):
                value[node] = G[a] / (H[a] + lam)
                continue
            f, b = int(feats[bf[a]]), int(bb[a])
            feature[node] = f
            threshold[node] = float(edges[f][b])
            bin_split[node] = b
            gain[node] = float(g)
            for side, (gs, hs) in enumerate(((bgl[a], bhl[a]), (G[a] - bgl[a], H[a] - bhl[a]))):
                feature.append(-1); threshold.append(np.nan); bin_split.append(-1)
                left.append(-1); right.append(-1); value.append(gs / (hs + lam)); gain.append(0.0)
                next_active.append(len(feature) - 1); nG.append(gs); nH.append(hs)
                child_of[a, side] = len(next_active) - 1
            left[node], right[node] = len(feature) - 2, len(feature) - 1
        if not next_active:
            break
        depth = level + 1
        split = child_of[s, 0] >= 0
        go_left = sub[r_idx, bf[s]] <= bb[s]
        slot[r_idx] = np.where(split, np.where(go_left, child_of[s, 0], child_of[s, 1]), -1)
        active, G, H = next_active, np.array(nG), np.array(nH)

    return Tree(np.array(feature, dtype=np.int64), np.array(threshold, dtype=np.float64),
                np.array(bin_split, dtype=np.int64), np.array(left, dtype=np.int64),
                np.array(right, dtype=np.int64), np.array(value, dtype=np.float64),
                np.array(gain, dtype=np.float64), depth)


# ---------------------------------------------------------------------------
# ensemble
# ---------------------------------------------------------------------------

@dataclass
class Ensemble:
    features: list[str]
    categorical: list[str]
    config: TrainConfig
    base_score: float
    trees: list[Tree]
    best_iteration: int
    edges: list[np.ndarray]
    encoders: dict[str, TargetEncoder]
    history: dict[str, list[float]] = field(default_factory=dict)

    @property
    def all_columns(self) -> list[str]:
        return self.features + self.categorical

    def design_matrix(self, frame: pd.DataFrame) -> np.ndarray:
        missing = [c for c in self.all_columns if c not in frame.columns]
        if missing:
            raise KeyError(f"input lacks columns {missing}")
        num = frame[self.features].to_numpy(dtype=np.float64)
        cats = [self.encoders[c].transform(frame[c].to_numpy()) for c in self.categorical]
        if cats:
            return np.column_stack([num, *cats])
        return num

    def predict(self, frame: pd.DataFrame, n_trees: int | None = None) -> np.ndarray:
        return self.predict_matrix(self.design_matrix(frame), n_trees)

    def predict_matrix(self, X: np.ndarray, n_trees: int | None = None) -> np.ndarray:
        n_trees = self.best_iteration if n_trees is None else n_trees
        lr = self.config.learning_rate
        pred = np.full(X.shape[0], self.base_score)
        for tree in self.trees[:n_trees]:
            pred = pred + lr * tree.predict(X)
        return pred

    def to_dict(self) -> dict:
        return {
            "format": "invplan-gbdt/1",
            "config": self.config.as_dict(),
            "features": self.features,
            "categorical": self.categorical,
            "base_score": self.base_score,
            "best_iteration": self.best_iteration,
            "edges": [e.tolist() for e in self.edges],
            "encoders": {k: {"prior": e.prior, "mapping": e.mapping}
                         for k, e in self.encoders.items()},
            "trees": [t.to_dict() for t in self.trees],
            "history": self.history,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Ensemble":
        if d.get("format") != "invplan-gbdt/1":
            raise ValueError("not a serialised invplan ensemble")
        return cls(
            features=list(d["features"]), categorical=list(d["categorical"]),
            config=TrainConfig.from_dict(d["config"]), base_score=float(d["base_score"]),
            trees=[Tree.from_dict(t) for t in d["trees"]],
            best_iteration=int(d["best_iteration"]),
            edges=[np.array(e, dtype=np.float64) for e in d["edges"]],
            encoders={k: TargetEncoder({str(a): float(b) for a, b in v["mapping"].items()},
                                       float(v["prior"])) for k, v in d["encoders"].items()},
            history={k: list(v) for k, v in d.get("history", {}).items()},
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "Ensemble":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class Dataset:
    frame: pd.DataFrame
    target: np.ndarray
    weight: np.ndarray

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64)
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if len(self.frame) != len(self.target) or len(self.target) != len(self.weight):
            raise TrainingError("frame, target and weight lengths differ")

    def __len__(self) -> int:
        return len(self.target)


def _rmse(y, p, w) -> float:
    return float(np.sqrt(np.sum(w * (y - p) ** 2) / np.sum(w)))


def fit(train: Dataset, valid: Dataset | None, config: TrainConfig,
        features: Sequence[str], categorical: Sequence[str] = ()) -> Ensemble:
    """Boost up to ``config.max_iterations`` trees.

    With a non-empty ``valid`` set, ``best_iteration`` is the tree count with
    the lowest weighted validation RMSE and training stops after
    ``early_stopping_rounds`` iterations without improvement. Rows with zero
    weight are dropped up front, so they cannot affect the model.
    """
    features, categorical = list(features), list(categorical)
    if len(train) == 0:
        raise TrainingError("empty training set")
    w = train.weight
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise TrainingError("weights must be finite and >= 0")
    keep = w > 0
    if not keep.any():
        raise TrainingError("zero total training weight")
    frame = train.frame.loc[keep] if not keep.all() else train.frame
    y, w = train.target[keep], w[keep]
    if not np.all(np.isfinite(y)):
        raise TrainingError("non-finite training target")

    num = frame[features].to_numpy(dtype=np.float64)
    if np.isinf(num).any():
        raise TrainingError("infinite feature value")
    encoders, cat_cols = {}, []
    for c in categorical:
        enc, col = encode_categoricals(frame[c].to_numpy(), y, w, config.cat_prior_strength)
        encoders[c] = enc
        cat_cols.append(col)
    X = np.column_stack([num, *cat_cols]) if cat_cols else num
    n, p = X.shape
    edges = [fit_bin_edges(X[:, j], config.histogram_bins) for j in range(p)]
    Xb = np.zeros((n, p), dtype=np.uint8, order="F")
    for j in range(p):
        Xb[:, j] = apply_bins(X[:, j], edges[j])
    n_bins = max([len(e) + 1 for e in edges] + [2])

    # exact for constant targets so that no tree is needed
    base = float(y[0]) if np.all(y == y[0]) else float(np.sum(w * y) / np.sum(w))
    model = Ensemble(features, categorical, config, base, [], 0, edges, encoders,
                     {"train_rmse": [], "valid_rmse": []})
    pred = np.full(n, base)
    has_valid = valid is not None and len(valid) > 0
    if has_valid:
        Xv = model.design_matrix(valid.frame)
        if np.isinf(Xv).any() or not np.all(np.isfinite(valid.target)):
            raise TrainingError("non-finite validation data")
        yv, wv = valid.target, valid.weight
        if not np.sum(wv) > 0:
            raise TrainingError("zero total validation weight")
        pv = np.full(len(yv), base)
        best_rmse = _rmse(yv, pv, wv)
        model.history["valid_rmse"].append(best_rmse)
    model.history["train_rmse"].append(_rmse(y, pred, w))

    rng = np.random.default_rng(config.seed)
    lr = config.learning_rate
    best_it, since_best = 0, 0
    for it in range(config.max_iterations):
        resid = y - pred
        if not np.any(resid):
            break
        rows = np.arange(n)
        if config.row_subsample < 1.0:
            k = max(1, int(round(config.row_subsample * n)))
            rows = np.sort(rng.choice(n, size=k, replace=False))
        feats = np.arange(p)
        if config.feature_subsample < 1.0 and p > 0:
            k = max(1, int(round(config.feature_subsample * p)))
            feats = np.sort(rng.choice(p, size=k, replace=False))
        Xs = Xb if len(rows) == n else np.asfortranarray(Xb[rows])
        tree = _grow_tree(Xs, feats, w[rows] * resid[rows], w[rows], edges, n_bins, config)
        model.trees.append(tree)
        pred = pred + lr * tree.value[tree.leaf_of_binned(Xb)]
        model.history["train_rmse"].append(_rmse(y, pred, w))
        if has_valid:
            pv = pv + lr * tree.predict(Xv)
            r = _rmse(yv, pv, wv)
            model.history["valid_rmse"].append(r)
            if r < best_rmse:
                best_rmse, best_it, since_best = r, it + 1, 0
            else:
                since_best += 1
                if since_best >= config.early_stopping_rounds:
                    break
    model.best_iteration = best_it if has_valid else len(model.trees)
    return model


def feature_importance(model: Ensemble) -> dict[str, float]:
    """Split-gain importance over the trees used for prediction, in percent."""
    names = model.all_columns
    total = np.zeros(len(names))
    for tree in model.trees[: model.best_iteration]:
        inner = tree.feature >= 0
        np.add.at(total, tree.feature[inner], tree.gain[inner])
    s = total.sum()
    pct = total * (100.0 / s) if s > 0 else total
    return {name: float(v) for name, v in zip(names, pct)}
