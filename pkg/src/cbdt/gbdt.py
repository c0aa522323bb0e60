"""Second-order regression trees and a plain boosting loop built on them.

Split gain and leaf weights use the usual Newton formulas::

    gain = 1/2 [GL^2/(HL+lam) + GR^2/(HR+lam) - (GL+GR)^2/(HL+HR+lam)] - gamma
    w*   = -G / (H + lam)

Conventions fixed here because they change which rules come out of a model:

* a candidate threshold is the midpoint between consecutive distinct values
  present in the node;
* rows with ``x <= threshold`` go left;
* equal gains resolve to the lowest feature index, then the lowest threshold.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import _kernels
from .errors import NumericalDomainError, ValidationError

FORMAT_TAG = "cbdt-tree/1"


def split_gain(GL: float, HL: float, GR: float, HR: float, lam: float, gamma: float) -> float:
    dl, dr, dp = HL + lam, HR + lam, HL + HR + lam
    if dl <= 0 or dr <= 0 or dp <= 0:
        raise NumericalDomainError(
            f"split gain denominators must be positive, got {dl}, {dr}, {dp}"
        )
    return 0.5 * (GL * GL / dl + GR * GR / dr - (GL + GR) ** 2 / dp) - gamma


def leaf_weight(G: float, H: float, lam: float) -> float:
    if H + lam <= 0:
        raise NumericalDomainError(f"leaf weight denominator H + lambda = {H + lam} <= 0")
    return -G / (H + lam)


@dataclass(frozen=True)
class GradHess:
    g: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.g, dtype=np.float64)
        h = np.asarray(self.h, dtype=np.float64)
        if g.shape != h.shape or g.ndim != 1:
            raise ValidationError(f"g and h must be 1-d of equal length, got {g.shape} and {h.shape}")
        if np.any(h < 0):
            raise NumericalDomainError("hessians must be non-negative")
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "h", h)

    def __len__(self):
        return self.g.shape[0]


@dataclass(frozen=True)
class TreeParams:
    max_depth: int = 3
    min_samples_leaf: int = 5
    split_reg_lambda: float = 1.0
    leaf_penalty_gamma: float = 0.0
    max_bins: int = 255
    mode: Literal["exact", "histogram"] = "exact"

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValidationError("tree.max_depth must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValidationError("tree.min_samples_leaf must be >= 1")
        if self.max_bins < 2:
            raise ValidationError("tree.max_bins must be >= 2")
        if self.split_reg_lambda < 0 or self.leaf_penalty_gamma < 0:
            raise ValidationError("tree regularization must be >= 0")
        if self.mode not in ("exact", "histogram"):
            raise ValidationError(f"tree.mode must be 'exact' or 'histogram', got {self.mode!r}")

    def with_lambda(self, lam: float) -> "TreeParams":
        return TreeParams(self.max_depth, self.min_samples_leaf, lam,
                          self.leaf_penalty_gamma, self.max_bins, self.mode)


@dataclass(frozen=True)
class BinnedFeatures:
    """Integer bin codes plus the smallest/largest training value in each bin."""

    codes: np.ndarray  # n x d, int32
    n_bins: np.ndarray  # d
    bin_lo: np.ndarray  # d x max_bins
    bin_hi: np.ndarray


def bin_features(X: np.ndarray, mode: str = "exact", max_bins: int = 255) -> BinnedFeatures:
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    codes = np.empty((n, d), dtype=np.int32)
    los, his = [], []
    for f in range(d):
        uniq, inv = np.unique(X[:, f], return_inverse=True)
        if mode == "exact" or uniq.size <= max_bins:
            codes[:, f] = inv
            los.append(uniq)
            his.append(uniq)
            continue
        # quantile edges on the raw column, snapped to distinct values
        qs = np.quantile(X[:, f], np.linspace(0, 1, max_bins + 1)[1:-1])
        edges = np.unique(np.searchsorted(uniq, qs, side="right"))
        edges = edges[(edges > 0) & (edges < uniq.size)]
        group = np.searchsorted(edges, np.arange(uniq.size), side="right")
        codes[:, f] = group[inv]
        starts = np.concatenate(([0], edges))
        ends = np.concatenate((edges, [uniq.size])) - 1
        los.append(uniq[starts])
        his.append(uniq[ends])
    n_bins = np.array([lo.size for lo in los], dtype=np.int64)
    width = max(int(n_bins.max()) if d else 1, 1)
    bin_lo = np.zeros((d, width))
    bin_hi = np.zeros((d, width))
    for f in range(d):
        bin_lo[f, : n_bins[f]] = los[f]
        bin_hi[f, : n_bins[f]] = his[f]
    return BinnedFeatures(codes, n_bins, bin_lo, bin_hi)


@dataclass(frozen=True)
class RegressionTree:
    """Flat node arrays in pre-order; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    sum_g: np.ndarray
    sum_h: np.ndarray
    gain: np.ndarray
    n_features: int

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    def is_leaf(self, node: int) -> bool:
        return self.feature[node] < 0

    def structure(self) -> tuple:
        """Hashable (feature, threshold) skeleton for structural comparisons."""
        return tuple(
            (int(f), float(t) if f >= 0 else None) for f, t in zip(self.feature, self.threshold)
        )

    def to_dict(self) -> dict:
        nodes = []
        for i in range(self.n_nodes):
            if self.feature[i] < 0:
                nodes.append({"id": i, "leaf": True, "value": float(self.value[i]),
                              "n": int(self.n_samples[i])})
            else:
                nodes.append({"id": i, "leaf": False, "feature": int(self.feature[i]),
                              "threshold": float(self.threshold[i]), "left": int(self.left[i]),
                              "right": int(self.right[i]), "gain": float(self.gain[i]),
                              "n": int(self.n_samples[i])})
        return {"format": FORMAT_TAG, "n_features": self.n_features, "nodes": nodes}

    @classmethod
    def from_dict(cls, data: dict) -> "RegressionTree":
        nodes = data["nodes"]
        k = len(nodes)
        feature = np.full(k, -1, dtype=np.int64)
        threshold = np.zeros(k)
        left = np.full(k, -1, dtype=np.int64)
        right = np.full(k, -1, dtype=np.int64)
        value = np.zeros(k)
        n_samples = np.zeros(k, dtype=np.int64)
        gain = np.zeros(k)
        for nd in nodes:
            i = nd["id"]
            n_samples[i] = nd.get("n", 0)
            if nd["leaf"]:
                value[i] = nd["value"]
            else:
                feature[i] = nd["feature"]
                threshold[i] = nd["threshold"]
                left[i] = nd["left"]
                right[i] = nd["right"]
                gain[i] = nd.get("gain", 0.0)
        return cls(feature, threshold, left, right, value, n_samples,
                   np.zeros(k), np.zeros(k), gain, int(data["n_features"]))


def fit_tree(features: np.ndarray, gh: GradHess, params: TreeParams,
             binned: BinnedFeatures | None = None) -> RegressionTree:
    """Greedy depth-first growth maximising the second-order split gain."""
    X = np.asarray(features, dtype=np.float64)
    n, d = X.shape
    if len(gh) != n:
        raise ValidationError(f"gradient length {len(gh)} != n_rows {n}")
    if n < 2 * params.min_samples_leaf:
        raise ValidationError(
            f"need at least 2*min_samples_leaf={2 * params.min_samples_leaf} rows, got {n}"
        )
    if binned is None:
        binned = bin_features(X, params.mode, params.max_bins)
    lam, gamma = float(params.split_reg_lambda), float(params.leaf_penalty_gamma)
    g, h = gh.g, gh.h

    nodes: list[list] = []  # [feature, threshold, left, right, value, n, G, H, gain]

    def grow(rows: np.ndarray, depth: int) -> int:
        idx = len(nodes)
        G, H = _kernels.node_sums(rows, g, h)
        nodes.append([-1, 0.0, -1, -1, 0.0, rows.size, G, H, 0.0])
        feat = -1
        if depth < params.max_depth and rows.size >= 2 * params.min_samples_leaf:
            gain, feat, thr, _ = _kernels.best_split(
                binned.codes, rows, g, h, binned.n_bins, binned.bin_lo, binned.bin_hi,
                lam, gamma, params.min_samples_leaf)
        if feat < 0:
            nodes[idx][4] = leaf_weight(G, H, lam)
            return idx
        go_left = X[rows, feat] <= thr
        nodes[idx][0], nodes[idx][1], nodes[idx][8] = feat, thr, gain
        nodes[idx][2] = grow(rows[go_left], depth + 1)
        nodes[idx][3] = grow(rows[~go_left], depth + 1)
        return idx

    grow(np.arange(n, dtype=np.int64), 0)
    cols = list(zip(*nodes))
    return RegressionTree(
        feature=np.array(cols[0], dtype=np.int64),
        threshold=np.array(cols[1], dtype=np.float64),
        left=np.array(cols[2], dtype=np.int64),
        right=np.array(cols[3], dtype=np.int64),
        value=np.array(cols[4], dtype=np.float64),
        n_samples=np.array(cols[5], dtype=np.int64),
        sum_g=np.array(cols[6], dtype=np.float64),
        sum_h=np.array(cols[7], dtype=np.float64),
        gain=np.array(cols[8], dtype=np.float64),
        n_features=d,
    )


def _check_dim(tree_d: int, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != tree_d:
        raise ValidationError(f"expected {tree_d} features, got array of shape {X.shape}")
    return X


def predict_tree(tree: RegressionTree, features: np.ndarray) -> np.ndarray:
    X = _check_dim(tree.n_features, features)
    return _kernels.route(X, tree.feature, tree.threshold, tree.left, tree.right, tree.value)


def apply_tree(tree: RegressionTree, features: np.ndarray) -> np.ndarray:
    """Index of the leaf each row lands in."""
    X = _check_dim(tree.n_features, features)
    return _kernels.apply(X, tree.feature, tree.threshold, tree.left, tree.right)


# --- plain boosting -------------------------------------------------------


@dataclass
class TreeEnsemble:
    """base_score + learning_rate * sum of tree outputs (raw margin for logistic loss)."""

    base_score: float
    learning_rate: float
    n_features: int
    loss: Literal["squared", "logistic"] = "squared"
    trees: list[RegressionTree] = field(default_factory=list)

    def predict_raw(self, X: np.ndarray, n_trees: int | None = None) -> np.ndarray:
        X = _check_dim(self.n_features, X)
        out = np.full(X.shape[0], self.base_score)
        for tree in self.trees[:n_trees]:
            out += self.learning_rate * predict_tree(tree, X)
        return out

    def predict(self, X: np.ndarray) -> np.ndarray:
        raw = self.predict_raw(X)
        if self.loss == "logistic":
            return 1.0 / (1.0 + np.exp(-raw))
        return raw

    def to_dict(self) -> dict:
        return {"base_score": self.base_score, "learning_rate": self.learning_rate,
                "n_features": self.n_features, "loss": self.loss,
                "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, data: dict) -> "TreeEnsemble":
        return cls(data["base_score"], data["learning_rate"], data["n_features"], data["loss"],
                   [RegressionTree.from_dict(t) for t in data["trees"]])


def squared_grad_hess(pred: np.ndarray, y: np.ndarray) -> GradHess:
    return GradHess(2.0 * (pred - y), np.full(y.shape[0], 2.0))


def logistic_grad_hess(raw: np.ndarray, y: np.ndarray) -> GradHess:
    p = 1.0 / (1.0 + np.exp(-raw))
    return GradHess(p - y, p * (1.0 - p))


def fit_gbdt(X: np.ndarray, y: np.ndarray, rounds: int, learning_rate: float,
             tree: TreeParams, loss: Literal["squared", "logistic"] = "squared",
             base_score: float | None = None) -> TreeEnsemble:
    """Standard second-order boosting on squared ``(F - y)^2`` or logistic loss."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if rounds < 0:
        raise ValidationError("rounds must be >= 0")
    if base_score is None:
        if loss == "logistic":
            p = np.clip(y.mean(), 1e-6, 1 - 1e-6)
            base_score = float(np.log(p / (1 - p)))
        else:
            base_score = float(y.mean())
    model = TreeEnsemble(base_score, learning_rate, X.shape[1], loss)
    binned = bin_features(X, tree.mode, tree.max_bins)
    pred = np.full(X.shape[0], base_score)
    grad_fn = logistic_grad_hess if loss == "logistic" else squared_grad_hess
    for _ in range(rounds):
        t = fit_tree(X, grad_fn(pred, y), tree, binned)
        model.trees.append(t)
        pred = pred + learning_rate * predict_tree(t, X)
    return model
