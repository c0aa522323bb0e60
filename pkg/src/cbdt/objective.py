"""Composite causal loss and its per-sample gradients/Hessians.

    L(yhat) = sum_i (yhat_i - y_i)^2
            + lam   * [ var_t(yhat) + var_c(yhat) ]       (within-arm, 1/n_arm normalised)
            + gamma * (mean(yhat) - mean(y))^2
            + alpha * (ate_hat - tau_ref)^2,   ate_hat = mean_t(yhat) - mean_c(yhat)

The squared-error term is an unnormalised sum while the regularisers are
normalised, so the effective strength of ``lam``/``gamma``/``alpha`` shrinks
like 1/n relative to the fit term.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .gbdt import GradHess

TERMS = ("mse", "variance", "global", "ate")


@dataclass(frozen=True)
class CompositeLossParams:
    lam: float = 1.0
    gamma: float = 0.0
    alpha: float = 1.0
    tau_ref: float = 0.0

    def __post_init__(self):
        for name in ("lam", "gamma", "alpha"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValidationError(f"loss.{name} must be finite and >= 0, got {v}")
        if not np.isfinite(self.tau_ref):
            raise ValidationError("loss.tau_ref must be finite")

    def replace(self, **kw) -> "CompositeLossParams":
        return CompositeLossParams(**{**self.__dict__, **kw})


@dataclass(frozen=True)
class GroupStats:
    mean_t: float
    mean_c: float
    mean_all: float
    n_t: int
    n_c: int
    ate_hat: float


def _validate(yhat, treatment, y=None):
    yhat = np.asarray(yhat, dtype=np.float64)
    w = np.asarray(treatment)
    if w.shape != yhat.shape or (y is not None and np.shape(y) != yhat.shape):
        raise ValidationError("yhat, y and treatment must have equal lengths")
    treated = w == 1
    if treated.all() or not treated.any():
        raise ValidationError("both treatment arms must be non-empty")
    return yhat, treated


def group_stats(yhat, treatment) -> GroupStats:
    yhat, treated = _validate(yhat, treatment)
    n_t = int(treated.sum())
    n_c = yhat.size - n_t
    mean_t = float(yhat[treated].mean())
    mean_c = float(yhat[~treated].mean())
    return GroupStats(mean_t, mean_c, float(yhat.mean()), n_t, n_c, mean_t - mean_c)


def loss_terms(yhat, y, treatment, params: CompositeLossParams) -> dict[str, float]:
    """Each weighted term of the composite loss separately."""
    yhat, treated = _validate(yhat, treatment, y)
    y = np.asarray(y, dtype=np.float64)
    st = group_stats(yhat, treatment)
    var_t = np.sum((yhat[treated] - st.mean_t) ** 2) / st.n_t
    var_c = np.sum((yhat[~treated] - st.mean_c) ** 2) / st.n_c
    return {
        "mse": float(np.sum((yhat - y) ** 2)),
        "variance": params.lam * float(var_t + var_c),
        "global": params.gamma * float((st.mean_all - y.mean()) ** 2),
        "ate": params.alpha * float((st.ate_hat - params.tau_ref) ** 2),
    }


def loss_value(yhat, y, treatment, params: CompositeLossParams) -> float:
    return sum(loss_terms(yhat, y, treatment, params).values())


def term_grad_hess(yhat, y, treatment, params: CompositeLossParams,
                   exact_chain_gradients: bool = False) -> dict[str, GradHess]:
    """Per-term gradient and Hessian diagonal.

    Default Hessians are the closed forms 2, 2*lam/n_arm, 2*gamma/n and
    2*alpha/n_t^2 + 2*alpha/n_c^2 (the last two treat the group means as
    constants). ``exact_chain_gradients`` returns the exact Hessian diagonal
    of each term instead. Gradients are the same either way: the arm-mean
    dependence of the variance term sums to zero, and the global and ATE
    gradients already carry their chain factors.
    """
    yhat, treated = _validate(yhat, treatment, y)
    y = np.asarray(y, dtype=np.float64)
    st = group_stats(yhat, treatment)
    n = yhat.size
    n_arm = np.where(treated, st.n_t, st.n_c).astype(np.float64)
    arm_mean = np.where(treated, st.mean_t, st.mean_c)
    delta = st.ate_hat - params.tau_ref
    sign = np.where(treated, 1.0, -1.0)

    g_mse = 2.0 * (yhat - y)
    g_var = 2.0 * params.lam / n_arm * (yhat - arm_mean)
    g_glob = np.full(n, 2.0 * params.gamma / n * (st.mean_all - y.mean()))
    g_ate = sign * 2.0 * params.alpha / n_arm * delta

    if exact_chain_gradients:
        h_var = 2.0 * params.lam / n_arm * (1.0 - 1.0 / n_arm)
        h_glob = np.full(n, 2.0 * params.gamma / n**2)
        h_ate = 2.0 * params.alpha / n_arm**2
    else:
        h_var = 2.0 * params.lam / n_arm
        h_glob = np.full(n, 2.0 * params.gamma / n)
        h_ate = np.full(n, 2.0 * params.alpha / st.n_t**2 + 2.0 * params.alpha / st.n_c**2)
    return {
        "mse": GradHess(g_mse, np.full(n, 2.0)),
        "variance": GradHess(g_var, h_var),
        "global": GradHess(g_glob, h_glob),
        "ate": GradHess(g_ate, h_ate),
    }


def loss_grad_hess(yhat, y, treatment, params: CompositeLossParams,
                   exact_chain_gradients: bool = False) -> GradHess:
    parts = term_grad_hess(yhat, y, treatment, params, exact_chain_gradients)
    g = parts["mse"].g + parts["variance"].g + parts["global"].g + parts["ate"].g
    h = parts["mse"].h + parts["variance"].h + parts["global"].h + parts["ate"].h
    return GradHess(g, h)


def mse_gradient_variance(yhat, y) -> float:
    """Population variance of the squared-error gradients 2*(yhat - y)."""
    yhat = np.asarray(yhat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if yhat.shape != y.shape:
        raise ValidationError("yhat and y must have equal lengths")
    grad = 2.0 * (yhat - y)
    mu = grad.mean()
    return float(np.mean((grad - mu) ** 2))
