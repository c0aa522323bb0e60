"""Readable effect rules distilled from a fitted effect model.

A single shallow regression tree is fitted to the model's CATE predictions;
each leaf becomes one rule (a conjunction of axis-aligned conditions), so the
rules partition the rows. Splits that the data cannot back up are pruned: two
sibling leaves are merged unless their mean AIPW pseudo-outcomes differ
significantly (two-sided z-test, Bonferroni over the surrogate's splits).

Rule intervals are centred on the rule's mean predicted effect. By default
their width comes from bootstrapping the mean pseudo-outcome over the rows the
rule covers, so they reflect sampling noise in the data rather than only the
spread of the model's own predictions (``ci_source="model"``).
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .booster import BoostedModel, aipw_pseudo_outcomes, fit_nuisance, predict_cate
from .dataset import CausalDataset
from .errors import ValidationError
from .gbdt import GradHess, TreeParams, fit_tree

RULES_FORMAT = "cbdt-rules/1"
OPS = ("<=", ">")


@dataclass(frozen=True)
class RuleExtractionSpec:
    surrogate_depth: int = 3
    min_support: float = 0.05
    bootstrap_draws: int = 500
    ci_level: float = 0.95
    prune_alpha: float | None = 0.05   # None keeps every surrogate split
    ci_source: str = "pseudo_outcome"  # or "model"
    nuisance_rounds: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.surrogate_depth < 1:
            raise ValidationError("surrogate_depth must be >= 1")
        if not 0 < self.min_support < 1:
            raise ValidationError("min_support must lie in (0, 1)")
        if self.bootstrap_draws < 1:
            raise ValidationError("bootstrap_draws must be >= 1")
        if not 0 < self.ci_level < 1:
            raise ValidationError("ci_level must lie in (0, 1)")
        if self.prune_alpha is not None and not 0 < self.prune_alpha < 1:
            raise ValidationError("prune_alpha must lie in (0, 1) or be None")
        if self.ci_source not in ("pseudo_outcome", "model"):
            raise ValidationError(f"ci_source must be 'pseudo_outcome' or 'model', got {self.ci_source!r}")


@dataclass(frozen=True)
class Condition:
    feature: int
    op: str
    threshold: float

    def __post_init__(self):
        if self.op not in OPS:
            raise ValidationError(f"condition operator must be one of {OPS}, got {self.op!r}")

    def holds(self, X: np.ndarray) -> np.ndarray:
        col = X[:, self.feature]
        return col <= self.threshold if self.op == "<=" else col > self.threshold

    def text(self, names: Sequence[str] | None = None) -> str:
        name = names[self.feature] if names else f"x{self.feature}"
        return f"{name} {'≤' if self.op == '<=' else '>'} {self.threshold:.2f}"


@dataclass(frozen=True)
class CausalRule:
    conditions: tuple[Condition, ...]
    effect_estimate: float
    ci: tuple[float, float]
    support: int
    support_fraction: float
    fidelity: float

    def covers(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        mask = np.ones(X.shape[0], dtype=bool)
        for c in self.conditions:
            mask &= c.holds(X)
        return mask

    def text(self, names: Sequence[str] | None = None) -> str:
        cond = " AND ".join(c.text(names) for c in self.conditions) or "TRUE"
        return (f"IF {cond} THEN τ̂ = {self.effect_estimate:.2f} [{self.ci[0]:.2f}, {self.ci[1]:.2f}], "
                f"support {100 * self.support_fraction:.1f}%")

    def to_dict(self) -> dict:
        return {"conditions": [[c.feature, c.op, c.threshold] for c in self.conditions],
                "effect_estimate": self.effect_estimate, "ci": list(self.ci), "support": self.support,
                "support_fraction": self.support_fraction, "fidelity": self.fidelity}

    @classmethod
    def from_dict(cls, d: dict) -> "CausalRule":
        return cls(tuple(Condition(int(f), op, float(t)) for f, op, t in d["conditions"]),
                   float(d["effect_estimate"]), (float(d["ci"][0]), float(d["ci"][1])),
                   int(d["support"]), float(d["support_fraction"]), float(d["fidelity"]))


@dataclass
class RuleSet:
    rules: list[CausalRule]
    feature_names: list[str]
    n_rows: int
    notes: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.rules)

    def __iter__(self):
        return iter(self.rules)

    def __getitem__(self, i):
        return self.rules[i]

    def text(self) -> str:
        return "\n".join(r.text(self.feature_names) for r in self.rules) + ("\n" if self.rules else "")

    def to_dict(self) -> dict:
        return {"format": RULES_FORMAT, "feature_names": list(self.feature_names), "n_rows": self.n_rows,
                "notes": list(self.notes), "rules": [r.to_dict() for r in self.rules]}

    @classmethod
    def from_dict(cls, d: dict) -> "RuleSet":
        if d.get("format") != RULES_FORMAT:
            raise ValidationError(f"unsupported rules format {d.get('format')!r}")
        return cls([CausalRule.from_dict(r) for r in d["rules"]], list(d["feature_names"]),
                   int(d["n_rows"]), list(d["notes"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "RuleSet":
        return cls.from_dict(json.loads(text))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rule", "conditions", "effect_estimate", "ci_lo", "ci_hi", "support",
                    "support_fraction", "fidelity"])
        for i, r in enumerate(self.rules):
            cond = " AND ".join(f"{self.feature_names[c.feature]} {c.op} {c.threshold!r}" for c in r.conditions)
            w.writerow([i, cond, repr(r.effect_estimate), repr(r.ci[0]), repr(r.ci[1]), r.support,
                        repr(r.support_fraction), repr(r.fidelity)])
        return buf.getvalue()


EffectModel = BoostedModel | Callable[[np.ndarray], np.ndarray]


def model_effects(model, X) -> np.ndarray:
    """CATE predictions from a boosted model, a meta-learner, or a plain callable."""
    X = np.asarray(X, dtype=np.float64)
    if isinstance(model, BoostedModel):
        return predict_cate(model, X)
    if hasattr(model, "predict"):
        return np.asarray(model.predict(X), dtype=np.float64)
    if callable(model):
        return np.asarray(model(X), dtype=np.float64)
    raise ValidationError(f"cannot compute effects from {type(model).__name__}")


def _tighten(conds: list[Condition]) -> tuple[Condition, ...]:
    """Keep only the tightest bound per (feature, operator)."""
    best: dict[tuple[int, str], float] = {}
    for c in conds:
        key = (c.feature, c.op)
        if key not in best:
            best[key] = c.threshold
        else:
            best[key] = min(best[key], c.threshold) if c.op == "<=" else max(best[key], c.threshold)
    return tuple(Condition(f, op, t) for (f, op), t in sorted(best.items()))


def _split_is_supported(psi_l: np.ndarray, psi_r: np.ndarray, alpha: float) -> bool:
    se = math.sqrt(psi_l.var(ddof=1) / psi_l.size + psi_r.var(ddof=1) / psi_r.size) \
        if min(psi_l.size, psi_r.size) > 1 else 0.0
    diff = abs(psi_l.mean() - psi_r.mean())
    if se == 0.0:
        return diff > 0.0
    return 2.0 * stats.norm.sf(diff / se) < alpha


def _leaves(tree, X: np.ndarray, psi: np.ndarray | None, alpha: float | None) -> list[tuple[list, np.ndarray]]:
    """Root-to-leaf (conditions, rows) pairs after bottom-up pruning."""
    n_tests = max(int(np.sum(tree.feature >= 0)), 1)

    def walk(node: int, rows: np.ndarray, path: list) -> list:
        f = tree.feature[node]
        if f < 0:
            return [(path, rows)]
        thr = float(tree.threshold[node])
        go_left = X[rows, f] <= thr
        left = walk(tree.left[node], rows[go_left], path + [Condition(int(f), "<=", thr)])
        right = walk(tree.right[node], rows[~go_left], path + [Condition(int(f), ">", thr)])
        if psi is not None and alpha is not None and len(left) == 1 and len(right) == 1:
            if not _split_is_supported(psi[left[0][1]], psi[right[0][1]], alpha / n_tests):
                return [(path, rows)]
        return left + right

    return walk(0, np.arange(X.shape[0]), [])


def _bootstrap_ci(est: float, values: np.ndarray, draws: int, level: float, rng) -> tuple[float, float]:
    """``est`` plus the central quantiles of the bootstrap deviations of mean(values)."""
    m = values.size
    dev = values[rng.integers(0, m, (draws, m))].mean(axis=1) - values.mean()
    q = (1.0 - level) / 2.0
    lo, hi = np.quantile(dev, [q, 1.0 - q])
    # a skewed bootstrap distribution can leave zero outside the quantiles
    return est + min(float(lo), 0.0), est + max(float(hi), 0.0)


def extract_rules(model: EffectModel, ds: CausalDataset, spec: RuleExtractionSpec = RuleExtractionSpec(),
                  pseudo_outcomes: np.ndarray | None = None) -> RuleSet:
    """Fit a surrogate tree to the model's CATE and read one rule off each leaf.

    The surrogate uses squared loss with no leaf shrinkage, so each leaf value
    is the mean predicted effect over its rows. Leaves are at least
    ``min_support`` of the rows by construction.
    """
    X = ds.features
    tau = model_effects(model, X)
    if tau.shape != (ds.n,):
        raise ValidationError(f"model returned {tau.shape} effects for {ds.n} rows")
    notes: list[str] = []
    min_leaf = max(1, math.ceil(spec.min_support * ds.n))

    psi = pseudo_outcomes
    if psi is None and (spec.prune_alpha is not None or spec.ci_source == "pseudo_outcome"):
        try:
            psi = aipw_pseudo_outcomes(ds, fit_nuisance(ds, spec.nuisance_rounds, spec.seed))
        except ValidationError as err:
            notes.append(f"pseudo-outcomes unavailable, pruning off and intervals from the model: {err}")

    if ds.n < 2 * min_leaf:
        leaves = [([], np.arange(ds.n))]
        notes.append(f"{ds.n} rows cannot be split into two leaves of >= {min_leaf} rows")
    else:
        params = TreeParams(max_depth=spec.surrogate_depth, min_samples_leaf=min_leaf, split_reg_lambda=0.0)
        tree = fit_tree(X, GradHess(-2.0 * tau, np.full(ds.n, 2.0)), params)
        leaves = _leaves(tree, X, psi, spec.prune_alpha)

    var_tau = float(tau.var())
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(len(leaves))]
    rules = []
    for (path, rows), rng in zip(leaves, rngs):
        if rows.size < spec.min_support * ds.n:
            notes.append(f"dropped a leaf covering {rows.size} rows (below min_support)")
            continue
        vals = tau[rows]
        est = float(vals.mean())
        local = float(np.mean((vals - est) ** 2))
        fid = (1.0 if local == 0.0 else 0.0) if var_tau == 0.0 else min(1.0, max(0.0, 1.0 - local / var_tau))
        spread = psi[rows] if (psi is not None and spec.ci_source == "pseudo_outcome") else vals
        rules.append(CausalRule(_tighten(path), est, _bootstrap_ci(est, spread, spec.bootstrap_draws, spec.ci_level, rng),
                                int(rows.size), rows.size / ds.n, fid))
    if not rules:
        notes.append("no surrogate leaf reaches min_support; no rules extracted")
    return RuleSet(rules, list(ds.feature_names), ds.n, notes)


def apply_rules(rules: RuleSet | Sequence[CausalRule], X) -> np.ndarray:
    """Index of the covering rule per row, -1 where no rule applies."""
    X = np.asarray(X, dtype=np.float64)
    out = np.full(X.shape[0], -1, dtype=np.int64)
    for i, r in enumerate(rules):
        out[(out < 0) & r.covers(X)] = i
    return out


def rule_fidelity(rules: RuleSet | Sequence[CausalRule], model: EffectModel, ds: CausalDataset) -> float:
    """R^2 of rule effects against the model's CATE over covered rows, clipped to [0, 1]."""
    which = apply_rules(rules, ds.features)
    covered = which >= 0
    if not covered.any():
        raise ValidationError("the rules cover none of the rows")
    tau = model_effects(model, ds.features)[covered]
    pred = np.array([r.effect_estimate for r in rules])[which[covered]]
    var = float(tau.var())
    mse = float(np.mean((pred - tau) ** 2))
    if var == 0.0:
        return 1.0 if mse == 0.0 else 0.0
    return min(1.0, max(0.0, 1.0 - mse / var))


def rule_coverage(rules: RuleSet | Sequence[CausalRule], X) -> float:
    return float(np.mean(apply_rules(rules, X) >= 0))


@dataclass(frozen=True)
class RuleTruth:
    rule: int
    true_effect: float
    deviation: float
    ci_covers: bool


def rule_truth_check(rules: RuleSet | Sequence[CausalRule], ds: CausalDataset) -> list[RuleTruth]:
    """Compare each rule's effect with the mean true effect over the rows it covers."""
    if not ds.has_truth:
        raise ValidationError("rule_truth_check needs mu0/mu1 columns; use synthetic or IHDP data")
    tau = ds.tau
    out = []
    for i, r in enumerate(rules):
        rows = r.covers(ds.features)
        if not rows.any():
            out.append(RuleTruth(i, float("nan"), float("nan"), False))
            continue
        truth = float(tau[rows].mean())
        out.append(RuleTruth(i, truth, abs(r.effect_estimate - truth), r.ci[0] <= truth <= r.ci[1]))
    return out
