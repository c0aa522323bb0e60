"""CBDT training loop.

Two heads are supported:

``outcome_contrast``
    One boosted outcome model F(t, x) with the treatment as feature 0. The
    composite loss acts on the factual predictions F(t_i, x_i) and the
    effect is read off as F(1, x) - F(0, x).

``doubly_robust``
    A separate effect model tau(x). Factual predictions are
    m(x) + (t - e(x)) * tau(x) with cross-fitted m and e, so the residual
    y - m - tau * (t - e) is exactly the squared-error residual and the
    composite-loss gradients reach tau through the factor (t - e).

Every round: residuals from the previous predictions, a tree fitted to the
composite-loss Newton step, the additive update, the gradient-variance
statistic, a scheduler step, and a gradient step on the regularisers that is
carried in the working predictions rather than in the trees.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np

from .dataset import CausalDataset
from .errors import TrainingDivergedError, ValidationError
from .gbdt import (BinnedFeatures, GradHess, TreeEnsemble, TreeParams, bin_features,
                   fit_gbdt, fit_tree, predict_tree)
from .objective import CompositeLossParams, loss_grad_hess, loss_value, mse_gradient_variance, term_grad_hess
from .schedule import SchedulerState, step

MODEL_FORMAT = "cbdt-model/1"
E_CLIP = (0.01, 0.99)


@dataclass(frozen=True)
class BoosterConfig:
    num_rounds: int = 300
    learning_rate: float = 0.1
    residual_mode: Literal["outcome_contrast", "doubly_robust"] = "outcome_contrast"
    loss: CompositeLossParams = field(default_factory=CompositeLossParams)
    schedule: Literal["dynamic", "decay", "static"] = "dynamic"
    eta: float = 0.01
    eta_prime: float | None = None
    tree: TreeParams = field(default_factory=TreeParams)
    # tau_ref: "dr" = cross-fitted AIPW estimate, "oracle" = mean true effect, "fixed" = loss.tau_ref
    tau_ref_source: Literal["dr", "oracle", "fixed"] = "dr"
    couple_tree_lambda: bool = True
    refinement: Literal["regularizer", "full", "off"] = "regularizer"
    contrast_target: bool = False
    exact_chain_gradients: bool = False
    nuisance_rounds: int = 100
    nuisance_learning_rate: float = 0.1
    seed: int = 0
    record_predictions: bool = False

    def __post_init__(self):
        if self.num_rounds < 1:
            raise ValidationError("num_rounds must be >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ValidationError("learning_rate must be in (0, 1]")
        if self.residual_mode not in ("outcome_contrast", "doubly_robust"):
            raise ValidationError(
                f"residual_mode must be 'outcome_contrast' or 'doubly_robust', got {self.residual_mode!r}")
        if self.tau_ref_source not in ("dr", "oracle", "fixed"):
            raise ValidationError(f"tau_ref_source must be dr, oracle or fixed, got {self.tau_ref_source!r}")
        if self.refinement not in ("regularizer", "full", "off"):
            raise ValidationError(f"refinement must be regularizer, full or off, got {self.refinement!r}")
        # validates mode / eta
        SchedulerState(lam=self.loss.lam, alpha=self.loss.alpha, eta=self.eta,
                       eta_prime=self.eta_prime, mode=self.schedule)

    def replace(self, **kw) -> "BoosterConfig":
        return BoosterConfig(**{**{f: getattr(self, f) for f in self.__dataclass_fields__}, **kw})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "BoosterConfig":
        data = dict(data)
        if "loss" in data and isinstance(data["loss"], dict):
            data["loss"] = CompositeLossParams(**data["loss"])
        if "tree" in data and isinstance(data["tree"], dict):
            data["tree"] = TreeParams(**data["tree"])
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown booster config fields: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class TraceRecord:
    k: int
    loss: float
    grad_variance: float
    lam: float
    alpha: float
    residual_rms: float
    time_s: float = 0.0


@dataclass
class NuisanceModels:
    """Cross-fitted nuisance estimates.

    The arrays hold, for every training row, the prediction of the fold model
    that did not see that row. ``*_models`` keep one fitted ensemble per fold.
    """

    m_hat: np.ndarray
    e_hat: np.ndarray
    mu0_hat: np.ndarray
    mu1_hat: np.ndarray
    folds: np.ndarray
    m_models: list[TreeEnsemble]
    e_models: list[TreeEnsemble]
    mu0_models: list[TreeEnsemble]
    mu1_models: list[TreeEnsemble]

    def predict_e(self, X) -> np.ndarray:
        return np.clip(np.mean([m.predict(X) for m in self.e_models], axis=0), *E_CLIP)

    def predict_m(self, X) -> np.ndarray:
        return np.mean([m.predict(X) for m in self.m_models], axis=0)


@dataclass
class BoostedModel:
    config: BoosterConfig
    n_features: int
    tau_ref: float
    tau_ref_source: str
    outcome: TreeEnsemble | None = None  # over (t, x)
    effect: TreeEnsemble | None = None  # over x
    trace: list[TraceRecord] = field(default_factory=list)
    predictions: list[np.ndarray] | None = None
    loss_params: list[CompositeLossParams] | None = None
    schedule: SchedulerState | None = None

    @property
    def rounds(self) -> int:
        head = self.outcome if self.outcome is not None else self.effect
        return len(head.trees)

    @property
    def base_score(self) -> float:
        return self.outcome.base_score if self.outcome is not None else self.effect.base_score

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "kind": "cbdt",
            "config": self.config.to_dict(),
            "n_features": self.n_features,
            "tau_ref": self.tau_ref,
            "tau_ref_source": self.tau_ref_source,
            "outcome": None if self.outcome is None else self.outcome.to_dict(),
            "effect": None if self.effect is None else self.effect.to_dict(),
            # wall-clock times are left out so that model files are reproducible
            "trace": [{k: v for k, v in asdict(r).items() if k != "time_s"} for r in self.trace],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BoostedModel":
        if data.get("format") != MODEL_FORMAT:
            raise ValidationError(f"unsupported model format {data.get('format')!r}")
        return cls(
            config=BoosterConfig.from_dict(data["config"]),
            n_features=data["n_features"],
            tau_ref=data["tau_ref"],
            tau_ref_source=data["tau_ref_source"],
            outcome=None if data["outcome"] is None else TreeEnsemble.from_dict(data["outcome"]),
            effect=None if data["effect"] is None else TreeEnsemble.from_dict(data["effect"]),
            trace=[TraceRecord(**r) for r in data["trace"]],
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)

    @classmethod
    def load(cls, path) -> "BoostedModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def with_treatment(X: np.ndarray, t) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    col = np.broadcast_to(np.asarray(t, dtype=np.float64), (X.shape[0],))
    return np.column_stack([col, X])


# --- nuisance --------------------------------------------------------------


def stratified_folds(treatment: np.ndarray, n_folds: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    folds = np.empty(treatment.size, dtype=np.int64)
    for arm in (0, 1):
        idx = np.flatnonzero(treatment == arm)
        idx = idx[rng.permutation(idx.size)]
        folds[idx] = np.arange(idx.size) % n_folds
    return folds


def _arm_check(n_rows: int, tree: TreeParams, what: str):
    if n_rows < 2 * tree.min_samples_leaf:
        raise ValidationError(
            f"{what} has {n_rows} rows; at least {2 * tree.min_samples_leaf} are needed")


def fit_nuisance(ds: CausalDataset, rounds: int = 100, seed: int = 0,
                 tree: TreeParams | None = None, learning_rate: float = 0.1,
                 n_folds: int = 2) -> NuisanceModels:
    """Two-fold cross-fitted outcome, per-arm outcome and propensity models."""
    if ds.n < 20:
        raise ValidationError(f"nuisance fitting needs n >= 20, got {ds.n}")
    tree = tree or TreeParams(max_depth=3, min_samples_leaf=5, split_reg_lambda=1.0)
    X, t, y = ds.features, ds.treatment, ds.outcome
    folds = stratified_folds(t, n_folds, seed)
    out = {k: np.empty(ds.n) for k in ("m", "e", "mu0", "mu1")}
    models = {k: [] for k in out}
    for f in range(n_folds):
        tr, te = folds != f, folds == f
        for arm in (0, 1):
            if not np.any(t[tr] == arm) or not np.any(t[te] == arm):
                raise ValidationError(f"cross-fitting fold {f} has no rows from treatment arm {arm}")
        _arm_check(int(tr.sum()), tree, f"fold {f} training split")
        m = fit_gbdt(X[tr], y[tr], rounds, learning_rate, tree)
        e = fit_gbdt(X[tr], t[tr], rounds, learning_rate, tree, loss="logistic")
        arm_models = []
        for arm, name in ((0, "control"), (1, "treated")):
            rows = tr & (t == arm)
            _arm_check(int(rows.sum()), tree, f"{name} arm in fold {f}")
            arm_models.append(fit_gbdt(X[rows], y[rows], rounds, learning_rate, tree))
        out["m"][te] = m.predict(X[te])
        out["e"][te] = np.clip(e.predict(X[te]), *E_CLIP)
        out["mu0"][te] = arm_models[0].predict(X[te])
        out["mu1"][te] = arm_models[1].predict(X[te])
        for k, mod in zip(("m", "e", "mu0", "mu1"), (m, e, *arm_models)):
            models[k].append(mod)
    return NuisanceModels(out["m"], out["e"], out["mu0"], out["mu1"], folds,
                          models["m"], models["e"], models["mu0"], models["mu1"])


def aipw_pseudo_outcomes(ds: CausalDataset, nuis: NuisanceModels) -> np.ndarray:
    t, y, e = ds.treatment, ds.outcome, nuis.e_hat
    return (nuis.mu1_hat - nuis.mu0_hat
            + t * (y - nuis.mu1_hat) / e
            - (1 - t) * (y - nuis.mu0_hat) / (1 - e))


def dr_ate(ds: CausalDataset, nuis: NuisanceModels) -> float:
    return float(np.mean(aipw_pseudo_outcomes(ds, nuis)))


# --- residuals -------------------------------------------------------------


def residuals_outcome_contrast(model: BoostedModel, ds: CausalDataset) -> np.ndarray:
    """(y - F(t, x)) - (F(1, x) - F(0, x)) for the model's current outcome head."""
    if model.outcome is None:
        raise ValidationError("model has no outcome head")
    X = ds.features
    fact = model.outcome.predict_raw(with_treatment(X, ds.treatment))
    contrast = predict_cate(model, X)
    return (ds.outcome - fact) - contrast


def residuals_doubly_robust(model: BoostedModel, nuis: NuisanceModels, ds: CausalDataset) -> np.ndarray:
    """y - m(x) - tau(x) * (t - e(x)) with cross-fitted m and e."""
    e = nuis.e_hat
    if np.any(e <= 0) or np.any(e >= 1):
        raise AssertionError("propensity estimates left (0, 1) after clipping")
    tau = predict_cate(model, ds.features)
    return ds.outcome - nuis.m_hat - tau * (ds.treatment - e)


# --- training --------------------------------------------------------------


def resolve_tau_ref(config: BoosterConfig, ds: CausalDataset,
                    nuis: NuisanceModels | None = None) -> tuple[float, NuisanceModels | None]:
    if config.tau_ref_source == "fixed":
        return config.loss.tau_ref, nuis
    if config.tau_ref_source == "oracle":
        return float(np.mean(ds.tau)), nuis
    if nuis is None:
        nuis = fit_nuisance(ds, config.nuisance_rounds, config.seed,
                            learning_rate=config.nuisance_learning_rate)
    return dr_ate(ds, nuis), nuis


def _needs_dr(config: BoosterConfig) -> bool:
    return config.residual_mode == "doubly_robust" or (
        config.tau_ref_source == "dr" and config.loss.alpha > 0)


def fit(config: BoosterConfig, ds: CausalDataset, nuisance: NuisanceModels | None = None,
        tau_ref: float | None = None) -> BoostedModel:
    """Train CBDT. ``nuisance``/``tau_ref`` may be passed in to share them across runs
    on the same data (they are otherwise derived from ``config``)."""
    nu = config.learning_rate
    X, t, y = ds.features, ds.treatment, ds.outcome
    n = ds.n
    if tau_ref is None:
        if _needs_dr(config):
            tau_ref, nuisance = resolve_tau_ref(config, ds, nuisance)
        elif config.tau_ref_source == "dr":
            tau_ref = 0.0  # alpha is 0, so the value is unused
        else:
            tau_ref, _ = resolve_tau_ref(config, ds)
    if config.residual_mode == "doubly_robust" and nuisance is None:
        nuisance = fit_nuisance(ds, config.nuisance_rounds, config.seed,
                                learning_rate=config.nuisance_learning_rate)
    state = SchedulerState(lam=config.loss.lam, alpha=config.loss.alpha, eta=config.eta,
                           eta_prime=config.eta_prime, mode=config.schedule)
    model = BoostedModel(config, ds.d, float(tau_ref), config.tau_ref_source)
    if config.record_predictions:
        model.predictions, model.loss_params = [], []

    contrast_mode = config.residual_mode == "outcome_contrast"
    if contrast_mode:
        Z = with_treatment(X, t)
        Z1, Z0 = with_treatment(X, 1.0), with_treatment(X, 0.0)
        base = float(y.mean())
        head = TreeEnsemble(base, nu, ds.d + 1)
        model.outcome = head
        fact = np.full(n, base)
        f1 = np.full(n, base)
        f0 = np.full(n, base)
        design = Z
    else:
        head = TreeEnsemble(0.0, nu, ds.d)
        model.effect = head
        resid_t = t - nuisance.e_hat
        tau_hat = np.zeros(n)
        design = X
    binned: BinnedFeatures = bin_features(design, config.tree.mode, config.tree.max_bins)
    corr = np.zeros(n)

    def factual():
        if contrast_mode:
            return fact + corr
        return nuisance.m_hat + resid_t * tau_hat + corr

    for k in range(1, config.num_rounds + 1):
        t0 = time.perf_counter()
        params = config.loss.replace(lam=state.lam, alpha=state.alpha, tau_ref=tau_ref)
        yhat_prev = factual()
        if contrast_mode:
            contrast = f1 - f0
            resid = (y - yhat_prev) - contrast
            target = resid if config.contrast_target else y - yhat_prev
        else:
            resid = y - yhat_prev
            target = resid
        full = loss_grad_hess(yhat_prev, y, t, params, config.exact_chain_gradients)
        g_fit = 2.0 * (yhat_prev - y)
        g = -2.0 * target + (full.g - g_fit)
        h = full.h
        if not contrast_mode:
            g, h = resid_t * g, resid_t**2 * h
        tree_params = config.tree.with_lambda(state.lam) if config.couple_tree_lambda else config.tree
        tree = fit_tree(design, GradHess(g, h), tree_params, binned)
        head.trees.append(tree)
        if contrast_mode:
            fact = fact + nu * predict_tree(tree, Z)
            f1 = f1 + nu * predict_tree(tree, Z1)
            f0 = f0 + nu * predict_tree(tree, Z0)
        else:
            tau_hat = tau_hat + nu * predict_tree(tree, X)
        yhat = factual()
        grad_var = mse_gradient_variance(yhat_prev, y)
        current = loss_value(yhat, y, t, params)
        rec = TraceRecord(k, current, grad_var, state.lam, state.alpha,
                          float(np.sqrt(np.mean(resid**2))), 0.0)
        if not np.isfinite(current):
            model.trace.append(rec)
            raise TrainingDivergedError(f"non-finite loss at round {k}", trace=model.trace)
        if model.predictions is not None:
            model.predictions.append(yhat.copy())
            model.loss_params.append(params)
        state = step(state, grad_var)
        if config.refinement != "off":
            nxt = config.loss.replace(lam=state.lam, alpha=state.alpha, tau_ref=tau_ref)
            if config.refinement == "full":
                corr = corr - nu * loss_grad_hess(yhat, y, t, nxt).g
            elif nxt.lam or nxt.gamma or nxt.alpha:
                parts = term_grad_hess(yhat, y, t, nxt)
                corr = corr - nu * (parts["variance"].g + parts["global"].g + parts["ate"].g)
        model.trace.append(TraceRecord(rec.k, rec.loss, rec.grad_variance, rec.lam, rec.alpha,
                                       rec.residual_rms, time.perf_counter() - t0))
    model.schedule = state
    return model


def predict_cate(model: BoostedModel, features, n_rounds: int | None = None) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ValidationError(f"expected {model.n_features} features, got shape {X.shape}")
    if model.outcome is not None:
        head = model.outcome
        out = np.zeros(X.shape[0])
        Z1, Z0 = with_treatment(X, 1.0), with_treatment(X, 0.0)
        for tree in head.trees[:n_rounds]:
            out += head.learning_rate * (predict_tree(tree, Z1) - predict_tree(tree, Z0))
        return out
    return model.effect.predict_raw(X, n_rounds)


def predict_outcome(model: BoostedModel, features, treatment) -> np.ndarray:
    """Factual prediction F(t, x); outcome head only."""
    if model.outcome is None:
        raise ValidationError("model has no outcome head")
    return model.outcome.predict_raw(with_treatment(features, treatment))
