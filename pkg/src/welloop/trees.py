"""Regression trees and tree ensembles built from scratch.

Trees grow greedily: at each node every feature's candidate thresholds
(midpoints between consecutive distinct sorted values) are scored and the
strictly best gain wins, ties going to the lowest feature index and then
the lowest threshold. Every node records its cover, the number of
training rows that reached it, which downstream attribution relies on.

Three ensemble kinds share the grower:

* RF: bootstrap resampling, optional per-split feature subsets, mean vote.
* GBDT: first-order boosting; each stage fits the current residuals and
  leaves hold mean residuals.
* XGB: second-order boosting for squared loss (gradient pred - y, unit
  hessian) with L2 leaf regularization lam and split penalty gamma.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from welloop.utils import kfold_assignments, mix_seed, subseed_rng

# gains below this are treated as zero so constant targets stay unsplit
GAIN_EPS = 1e-12

_RF_TREE_TAG = 11
_BOOST_STAGE_TAG = 12
_TUNE_DRAW_TAG = 13
_TUNE_FOLD_TAG = 14


@dataclass
class TreeNode:
    """One node; leaves carry a value, internal nodes a split. Cover is
    the training-row count that reached the node, and an internal node's
    cover always equals the sum of its children's."""

    cover: int
    value: float | None = None
    feature: int | None = None
    threshold: float | None = None
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None


@dataclass(frozen=True)
class HyperParams:
    n_trees: int = 150
    max_depth: int = 4
    min_samples_leaf: int = 2
    subsample_fraction: float = 1.0
    feature_fraction: float = 1.0
    learning_rate: float = 0.1
    lam: float = 1.0
    gamma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if not 0.0 < self.subsample_fraction <= 1.0:
            raise ValueError("subsample_fraction must be in (0, 1]")
        if not 0.0 < self.feature_fraction <= 1.0:
            raise ValueError("feature_fraction must be in (0, 1]")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


KINDS = ("RF", "GBDT", "XGB")


@dataclass
class TreeEnsemble:
    """A trained forest or boosting chain plus everything prediction and
    attribution need: kind, base score, learning rate, feature names."""

    kind: str
    trees: tuple
    base_score: float
    learning_rate: float
    feature_names: tuple
    train_loss: tuple | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown ensemble kind {self.kind!r}")
        self.trees = tuple(self.trees)
        self.feature_names = tuple(self.feature_names)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return predict(self, x)


def _as_matrix(x, n_features=None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError("expected a sample matrix")
    if n_features is not None and x.shape[1] != n_features:
        raise ValueError(f"expected {n_features} feature columns, got {x.shape[1]}")
    return x


def _tree_apply(node: TreeNode, x: np.ndarray) -> np.ndarray:
    out = np.empty(x.shape[0])
    _apply_into(node, x, np.arange(x.shape[0]), out)
    return out


def _apply_into(node, x, idx, out):
    if node.is_leaf:
        out[idx] = node.value
        return
    mask = x[idx, node.feature] <= node.threshold
    _apply_into(node.left, x, idx[mask], out)
    _apply_into(node.right, x, idx[~mask], out)


def predict(ensemble: TreeEnsemble, x) -> np.ndarray:
    """Ensemble prediction: mean vote for RF, shrunken sum on top of the
    base score for boosting kinds."""
    x = _as_matrix(x, ensemble.n_features)
    if ensemble.kind == "RF":
        if not ensemble.trees:
            raise ValueError("RF ensemble has no trees")
        acc = np.zeros(x.shape[0])
        for tree in ensemble.trees:
            acc += _tree_apply(tree, x)
        return acc / len(ensemble.trees)
    acc = np.full(x.shape[0], ensemble.base_score)
    for tree in ensemble.trees:
        acc += ensemble.learning_rate * _tree_apply(tree, x)
    return acc


# --- growing ---------------------------------------------------------------


def _variance_gains(ts, pos, n):
    # sum of squared errors drop when cutting after sorted position pos
    s1 = np.cumsum(ts)
    s2 = np.cumsum(ts * ts)
    total1 = s1[-1]
    total2 = s2[-1]
    nl = pos + 1.0
    nr = n - nl
    l1 = s1[pos]
    l2 = s2[pos]
    sse_l = l2 - l1 * l1 / nl
    sse_r = (total2 - l2) - (total1 - l1) ** 2 / nr
    sse_p = total2 - total1 * total1 / n
    return sse_p - sse_l - sse_r


def _xgb_gains(gs, pos, n, lam, gamma):
    # second-order gain for squared loss; hessian is 1 per row
    s1 = np.cumsum(gs)
    total = s1[-1]
    nl = pos + 1.0
    nr = n - nl
    gl = s1[pos]
    gr = total - gl
    return 0.5 * (
        gl * gl / (nl + lam) + gr * gr / (nr + lam) - total * total / (n + lam)
    ) - gamma


def _best_split(x, t, idx, feats, min_leaf, mode, lam, gamma):
    n = idx.size
    best_gain = -np.inf
    best = None
    for f in feats:
        v = x[idx, f]
        order = np.argsort(v, kind="stable")
        vs = v[order]
        ts = t[idx][order]
        cut = np.nonzero(vs[1:] > vs[:-1])[0]
        if cut.size == 0:
            continue
        nl = cut + 1
        ok = (nl >= min_leaf) & (n - nl >= min_leaf)
        cut = cut[ok]
        if cut.size == 0:
            continue
        if mode == "mean":
            gains = _variance_gains(ts, cut, n)
        else:
            gains = _xgb_gains(ts, cut, n, lam, gamma)
        i = int(np.argmax(gains))  # first max keeps the lowest threshold
        if gains[i] > best_gain:
            best_gain = gains[i]
            pos = cut[i]
            best = (f, (vs[pos] + vs[pos + 1]) / 2.0)
    if best is None:
        return None
    return best[0], best[1], best_gain


def _leaf_value(t, idx, mode, lam):
    if mode == "mean":
        return float(np.mean(t[idx]))
    # gradient is pred - y, so the optimal leaf weight is -G / (H + lam)
    return float(-np.sum(t[idx]) / (idx.size + lam))


def _grow(x, t, idx, depth, hp, rng, mode):
    n = idx.size
    node = TreeNode(cover=int(n), value=_leaf_value(t, idx, mode, hp.lam))
    if depth >= hp.max_depth or n < 2 * hp.min_samples_leaf:
        return node
    n_feat = x.shape[1]
    if hp.feature_fraction < 1.0:
        size = math.ceil(hp.feature_fraction * n_feat)
        feats = np.sort(rng.choice(n_feat, size=size, replace=False))
    else:
        feats = range(n_feat)
    found = _best_split(x, t, idx, feats, hp.min_samples_leaf, mode, hp.lam, hp.gamma)
    if found is None:
        return node
    f, thr, gain = found
    if gain <= GAIN_EPS:
        return node
    mask = x[idx, f] <= thr
    left = _grow(x, t, idx[mask], depth + 1, hp, rng, mode)
    right = _grow(x, t, idx[~mask], depth + 1, hp, rng, mode)
    node.value = None
    node.feature = int(f)
    node.threshold = float(thr)
    node.left = left
    node.right = right
    return node


def _feature_names(x, names):
    if names is not None:
        return tuple(names)
    return tuple(f"f{j}" for j in range(x.shape[1]))


def fit_tree(x, y, hp: HyperParams | None = None, feature_names=None) -> TreeNode:
    """Grow a single variance-reduction regression tree on all rows."""
    hp = hp or HyperParams()
    x = _as_matrix(x)
    y = np.asarray(y, dtype=float)
    if y.shape[0] != x.shape[0]:
        raise ValueError("x and y row counts differ")
    if y.shape[0] == 0:
        raise ValueError("cannot fit on an empty dataset")
    rng = subseed_rng(hp.seed, _RF_TREE_TAG, 0)
    return _grow(x, y, np.arange(x.shape[0]), 0, hp, rng, "mean")


def fit_rf(x, y, hp: HyperParams | None = None, feature_names=None, bootstrap=True):
    """Random forest: each tree sees a bootstrap resample and, when
    feature_fraction < 1, an independent feature subset per split."""
    hp = hp or HyperParams()
    x = _as_matrix(x)
    y = np.asarray(y, dtype=float)
    if y.shape[0] != x.shape[0]:
        raise ValueError("x and y row counts differ")
    n = x.shape[0]
    if n == 0:
        raise ValueError("cannot fit on an empty dataset")
    size = math.ceil(hp.subsample_fraction * n)
    trees = []
    for t in range(hp.n_trees):
        rng = subseed_rng(hp.seed, _RF_TREE_TAG, t)
        idx = rng.integers(0, n, size=size) if bootstrap else np.arange(n)
        trees.append(_grow(x, y, idx, 0, hp, rng, "mean"))
    return TreeEnsemble(
        kind="RF",
        trees=tuple(trees),
        base_score=0.0,
        learning_rate=1.0,
        feature_names=_feature_names(x, feature_names),
    )


def _boost(x, y, hp, mode, feature_names):
    x = _as_matrix(x)
    y = np.asarray(y, dtype=float)
    if y.shape[0] != x.shape[0]:
        raise ValueError("x and y row counts differ")
    n = x.shape[0]
    if n == 0:
        raise ValueError("cannot fit on an empty dataset")
    base = float(np.mean(y))
    pred = np.full(n, base)
    size = math.ceil(hp.subsample_fraction * n)
    trees = []
    losses = [float(np.mean((y - pred) ** 2))]
    for t in range(hp.n_trees):
        rng = subseed_rng(hp.seed, _BOOST_STAGE_TAG, t)
        if hp.subsample_fraction < 1.0:
            idx = rng.choice(n, size=size, replace=False)
        else:
            idx = np.arange(n)
        target = (y - pred) if mode == "mean" else (pred - y)
        tree = _grow(x, target, idx, 0, hp, rng, mode)
        pred = pred + hp.learning_rate * _tree_apply(tree, x)
        trees.append(tree)
        losses.append(float(np.mean((y - pred) ** 2)))
    kind = "GBDT" if mode == "mean" else "XGB"
    return TreeEnsemble(
        kind=kind,
        trees=tuple(trees),
        base_score=base,
        learning_rate=hp.learning_rate,
        feature_names=_feature_names(x, feature_names),
        train_loss=tuple(losses),
    )


def fit_gbdt(x, y, hp: HyperParams | None = None, feature_names=None):
    """First-order boosting: stage t fits the residuals of stage t-1 and
    leaves hold mean residuals. The returned train_loss tracks full-sample
    MSE after the base score and after every stage."""
    return _boost(x, y, hp or HyperParams(), "mean", feature_names)


def fit_xgb(x, y, hp: HyperParams | None = None, feature_names=None):
    """Second-order boosting for squared loss with L2 leaf weight penalty
    lam and split penalty gamma. With lam = gamma = 0 it reproduces
    fit_gbdt stage by stage."""
    return _boost(x, y, hp or HyperParams(), "xgb", feature_names)


FIT_FUNCTIONS = {"RF": fit_rf, "GBDT": fit_gbdt, "XGB": fit_xgb}


# --- hyperparameter search ---------------------------------------------------


def sample_space(space: dict, budget: int, seed: int) -> list[dict]:
    """Draw `budget` hyperparameter combinations uniformly from `space`.

    A list entry means a uniform choice; a (low, high) tuple means uniform
    numeric (integer if both ends are ints). Draw order follows the
    space's key order, so the same seed always yields the same sequence.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    rng = subseed_rng(seed, _TUNE_DRAW_TAG)
    draws = []
    for _ in range(budget):
        combo = {}
        for name, rnge in space.items():
            if isinstance(rnge, tuple) and len(rnge) == 2:
                lo, hi = rnge
                if lo > hi:
                    raise ValueError(f"reversed range for {name!r}")
                if isinstance(lo, int) and isinstance(hi, int):
                    combo[name] = int(rng.integers(lo, hi + 1))
                else:
                    combo[name] = float(rng.uniform(lo, hi))
            else:
                choices = list(rnge)
                if not choices:
                    raise ValueError(f"empty range for {name!r}")
                combo[name] = choices[int(rng.integers(len(choices)))]
        draws.append(combo)
    return draws


def cv_mse(x, y, kind: str, hp: HyperParams, k: int, seed: int) -> float:
    """Pooled out-of-fold MSE of `kind` under k-fold cross-validation."""
    if kind not in FIT_FUNCTIONS:
        raise ValueError(f"unknown ensemble kind {kind!r}")
    x = _as_matrix(x)
    y = np.asarray(y, dtype=float)
    fold = kfold_assignments(x.shape[0], k, subseed_rng(seed, _TUNE_FOLD_TAG))
    oof = np.empty_like(y)
    for j in range(k):
        tr = fold != j
        model = FIT_FUNCTIONS[kind](x[tr], y[tr], hp)
        oof[~tr] = predict(model, x[~tr])
    return float(np.mean((y - oof) ** 2))


def tune_random_search(
    x, y, kind: str, space: dict, budget: int = 20, k: int = 5, seed: int = 0
) -> tuple[HyperParams, float]:
    """Random search over `space`: sample `budget` combinations, score each
    by k-fold CV MSE, return the best (ties keep the earlier draw)."""
    base = HyperParams(seed=mix_seed(seed, _TUNE_DRAW_TAG))
    best_hp = None
    best_score = np.inf
    for combo in sample_space(space, budget, seed):
        hp = replace(base, **combo)
        score = cv_mse(x, y, kind, hp, k, seed)
        if score < best_score:
            best_score = score
            best_hp = hp
    return best_hp, best_score


# --- serialization -----------------------------------------------------------


def _node_to_json(node: TreeNode) -> dict:
    if node.is_leaf:
        return {"cover": node.cover, "value": node.value}
    return {
        "cover": node.cover,
        "feature": node.feature,
        "threshold": node.threshold,
        "left": _node_to_json(node.left),
        "right": _node_to_json(node.right),
    }


def _node_from_json(obj: dict) -> TreeNode:
    cover = int(obj["cover"])
    if cover < 1:
        raise ValueError("node cover must be >= 1")
    if "value" in obj:
        return TreeNode(cover=cover, value=float(obj["value"]))
    left = _node_from_json(obj["left"])
    right = _node_from_json(obj["right"])
    if left.cover + right.cover != cover:
        raise ValueError("child covers do not sum to the parent cover")
    return TreeNode(
        cover=cover,
        feature=int(obj["feature"]),
        threshold=float(obj["threshold"]),
        left=left,
        right=right,
    )


def ensemble_to_json(ensemble: TreeEnsemble) -> dict:
    return {
        "kind": ensemble.kind,
        "base_score": ensemble.base_score,
        "learning_rate": ensemble.learning_rate,
        "feature_names": list(ensemble.feature_names),
        "train_loss": (
            None if ensemble.train_loss is None else list(ensemble.train_loss)
        ),
        "trees": [_node_to_json(t) for t in ensemble.trees],
    }


def ensemble_from_json(obj: dict) -> TreeEnsemble:
    return TreeEnsemble(
        kind=obj["kind"],
        trees=tuple(_node_from_json(t) for t in obj["trees"]),
        base_score=float(obj["base_score"]),
        learning_rate=float(obj["learning_rate"]),
        feature_names=tuple(obj["feature_names"]),
        train_loss=(
            None if obj.get("train_loss") is None else tuple(obj["train_loss"])
        ),
    )


def save_ensemble(ensemble: TreeEnsemble, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(ensemble_to_json(ensemble), fh, sort_keys=True)
        fh.write("\n")


def load_ensemble(path) -> TreeEnsemble:
    with open(path, encoding="utf-8") as fh:
        return ensemble_from_json(json.load(fh))
