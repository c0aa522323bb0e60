"""S-, T-, X- and DR-learners on the internal boosting core."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np

from .booster import E_CLIP, aipw_pseudo_outcomes, fit_nuisance, with_treatment
from .dataset import CausalDataset
from .errors import ValidationError
from .gbdt import TreeEnsemble, TreeParams, fit_gbdt

MODEL_FORMAT = "cbdt-model/1"
KINDS = ("S", "T", "X", "DR")


@dataclass(frozen=True)
class MetaLearnerSpec:
    kind: Literal["S", "T", "X", "DR"] = "X"
    base_tree: TreeParams = field(default_factory=TreeParams)
    rounds: int = 200
    learning_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.rounds < 1:
            raise ValidationError("rounds must be >= 1")


@dataclass
class MetaLearner:
    spec: MetaLearnerSpec
    n_features: int
    models: dict[str, TreeEnsemble]
    notes: list[str] = field(default_factory=list)
    pseudo_outcomes: np.ndarray | None = None

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValidationError(f"expected {self.n_features} features, got shape {X.shape}")
        m = self.models
        kind = self.spec.kind
        if kind == "S":
            return m["s"].predict_raw(with_treatment(X, 1.0)) - m["s"].predict_raw(with_treatment(X, 0.0))
        if kind == "T":
            return m["mu1"].predict_raw(X) - m["mu0"].predict_raw(X)
        if kind == "X":
            g = np.clip(m["e"].predict(X), *E_CLIP)
            return g * m["tau0"].predict_raw(X) + (1.0 - g) * m["tau1"].predict_raw(X)
        return m["tau"].predict_raw(X)

    def to_dict(self) -> dict:
        return {"format": MODEL_FORMAT, "kind": f"meta-{self.spec.kind}",
                "spec": asdict(self.spec), "n_features": self.n_features,
                "models": {k: v.to_dict() for k, v in sorted(self.models.items())}}

    @classmethod
    def from_dict(cls, data: dict) -> "MetaLearner":
        spec = dict(data["spec"])
        spec["base_tree"] = TreeParams(**spec["base_tree"])
        return cls(MetaLearnerSpec(**spec), data["n_features"],
                   {k: TreeEnsemble.from_dict(v) for k, v in data["models"].items()})

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)


def _arm_rows(ds: CausalDataset, arm: int, tree: TreeParams) -> np.ndarray:
    rows = ds.treatment == arm
    need = 2 * tree.min_samples_leaf
    if rows.sum() < need:
        name = "treated" if arm == 1 else "control"
        raise ValidationError(f"{name} arm has {int(rows.sum())} rows; this learner needs at least {need}")
    return rows


def _support_overlap(ds: CausalDataset) -> bool:
    X, t = ds.features, ds.treatment
    lo1, hi1 = X[t == 1].min(0), X[t == 1].max(0)
    lo0, hi0 = X[t == 0].min(0), X[t == 0].max(0)
    return bool(np.all((hi1 >= lo0) & (hi0 >= lo1)))


def fit_meta(spec: MetaLearnerSpec, ds: CausalDataset) -> MetaLearner:
    X, t, y = ds.features, ds.treatment, ds.outcome
    tree, K, lr = spec.base_tree, spec.rounds, spec.learning_rate
    models: dict[str, TreeEnsemble] = {}
    pseudo = None
    if spec.kind == "S":
        models["s"] = fit_gbdt(with_treatment(X, t), y, K, lr, tree)
    elif spec.kind in ("T", "X"):
        r1, r0 = _arm_rows(ds, 1, tree), _arm_rows(ds, 0, tree)
        models["mu1"] = fit_gbdt(X[r1], y[r1], K, lr, tree)
        models["mu0"] = fit_gbdt(X[r0], y[r0], K, lr, tree)
        if spec.kind == "X":
            d1 = y[r1] - models["mu0"].predict_raw(X[r1])
            d0 = models["mu1"].predict_raw(X[r0]) - y[r0]
            models["tau1"] = fit_gbdt(X[r1], d1, K, lr, tree)
            models["tau0"] = fit_gbdt(X[r0], d0, K, lr, tree)
            models["e"] = fit_gbdt(X, t, K, lr, tree, loss="logistic")
    else:
        if ds.n < 20:
            raise ValidationError(f"DR-learner needs n >= 20 for cross-fitting, got {ds.n}")
        for arm in (0, 1):
            _arm_rows(ds, arm, tree)
        nuis = fit_nuisance(ds, K, spec.seed, tree=tree, learning_rate=lr)
        pseudo = aipw_pseudo_outcomes(ds, nuis)
        models["tau"] = fit_gbdt(X, pseudo, K, lr, tree)
    notes = [] if _support_overlap(ds) else ["arms have disjoint covariate support; effects are extrapolated"]
    return MetaLearner(spec, ds.d, models, notes, pseudo)


def predict_meta(estimator: MetaLearner, features) -> np.ndarray:
    return estimator.predict(features)
