import numpy as np
import pytest
from hypothesis import given, strategies as st

from cbdt.errors import ValidationError
from cbdt.objective import (CompositeLossParams, group_stats, loss_grad_hess, loss_terms, loss_value,
                            mse_gradient_variance, term_grad_hess)
from oracles import central_diff, composite_loss_reference


def _instance(seed, n=20):
    rng = np.random.default_rng(seed)
    w = np.zeros(n, dtype=int)
    w[rng.permutation(n)[: n // 2 - 1]] = 1
    return rng.standard_normal(n), rng.standard_normal(n), w


def test_group_stats_examples():
    st_ = group_stats([1.0, 3.0], [1, 0])
    assert (st_.mean_t, st_.mean_c, st_.ate_hat) == (1.0, 3.0, -2.0)
    assert group_stats([5.0] * 4, [1, 0, 1, 0]).ate_hat == 0.0
    st_ = group_stats([2.0, 4.0, 6.0, 8.0], [1, 1, 0, 0])
    assert (st_.mean_t, st_.mean_c, st_.ate_hat, st_.n_t, st_.n_c) == (3.0, 7.0, -4.0, 2, 2)


def test_group_stats_needs_both_arms():
    with pytest.raises(ValidationError):
        group_stats([1.0, 2.0], [1, 1])


def test_loss_examples():
    p0 = CompositeLossParams(0, 0, 0, 0)
    y = np.array([1.0, 2.0, 3.0])
    assert loss_value(y, y, [1, 0, 1], p0) == 0.0
    terms = loss_terms([1.0, 0.0], [0.0, 0.0], [1, 0], CompositeLossParams(1, 1, 1, 0))
    assert terms == {"mse": 1.0, "variance": 0.0, "global": 0.25, "ate": 1.0}
    assert loss_value([1.0, 0.0], [0.0, 0.0], [1, 0], CompositeLossParams(1, 1, 1, 0)) == 2.25


def test_loss_length_mismatch():
    with pytest.raises(ValidationError):
        loss_value([1.0, 2.0], [1.0], [1, 0], CompositeLossParams())


def test_params_validation():
    with pytest.raises(ValidationError):
        CompositeLossParams(lam=-1.0)
    with pytest.raises(ValidationError):
        CompositeLossParams(alpha=float("nan"))


def test_gradient_at_optimum():
    y = np.array([1.0, 2.0, 3.0, 4.0])
    gh = loss_grad_hess(y, y, [1, 0, 1, 0], CompositeLossParams(0, 0, 0, 0))
    assert np.all(gh.g == 0) and np.all(gh.h == 2)


def test_regularizer_gradients_vanish_at_stationary_point():
    # arm-constant predictions, ATE equal to tau_ref, overall mean equal to mean(y)
    yhat = np.array([2.0, 2.0, 0.0, 0.0])
    y = np.array([1.5, 2.5, 0.5, -0.5])
    gh = loss_grad_hess(yhat, y, [1, 1, 0, 0], CompositeLossParams(3.0, 2.0, 5.0, tau_ref=2.0))
    assert np.array_equal(gh.g, 2 * (yhat - y))


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("cfg", [(1.0, 0.0, 1.0, 0.0), (0.3, 2.0, 0.0, 1.0), (5.0, 1.0, 2.0, -0.5),
                                 (0.0, 0.0, 7.0, 0.3), (2.0, 3.0, 0.5, 2.0)])
def test_gradients_match_finite_differences(seed, cfg):
    yhat, y, w = _instance(seed)
    lam, gamma, alpha, tau_ref = cfg
    params = CompositeLossParams(lam, gamma, alpha, tau_ref)
    t = w == 1
    frozen = (yhat[t].mean(), yhat[~t].mean())
    parts = term_grad_hess(yhat, y, w, params)
    per_term = {
        "mse": (1, 0, 0, 0), "variance": (0, lam, 0, 0), "global": (0, 0, gamma, 0), "ate": (0, 0, 0, alpha),
    }
    for name, (m, l_, g_, a_) in per_term.items():
        if m == 0 and l_ == g_ == a_ == 0:
            continue

        def fn(v, l_=l_, g_=g_, a_=a_, m=m):
            full = composite_loss_reference(v, y, w, l_, g_, a_, tau_ref, frozen)
            return full if m else full - np.sum((v - y) ** 2)

        fd = central_diff(fn, yhat)
        np.testing.assert_allclose(parts[name].g, fd, rtol=1e-6, atol=1e-7 * max(1.0, np.abs(fd).max()))
    full = loss_grad_hess(yhat, y, w, params)
    fd = central_diff(lambda v: composite_loss_reference(v, y, w, lam, gamma, alpha, tau_ref, frozen), yhat)
    np.testing.assert_allclose(full.g, fd, rtol=1e-6, atol=1e-7 * np.abs(fd).max())


@pytest.mark.parametrize("seed", range(3))
def test_fully_chained_gradient_equals_closed_form(seed):
    # the within-arm mean's own derivative sums to zero, so no chain correction survives
    for n in (100, 200):
        yhat, y, w = _instance(seed, n)
        params = CompositeLossParams(2.0, 1.0, 3.0, 0.5)
        fd = central_diff(lambda v: loss_value(v, y, w, params), yhat)
        for exact in (False, True):
            g = loss_grad_hess(yhat, y, w, params, exact_chain_gradients=exact).g
            assert np.max(np.abs(g - fd)) < 1e-6


def test_exact_hessian_discrepancy_shrinks_with_n():
    gaps = []
    for n in (100, 200):
        yhat, y, w = _instance(0, n)
        params = CompositeLossParams(2.0, 1.0, 3.0, 0.5)
        h0 = loss_grad_hess(yhat, y, w, params).h
        h1 = loss_grad_hess(yhat, y, w, params, exact_chain_gradients=True).h
        gaps.append(np.max(np.abs(h0 - h1)))
    assert gaps[1] < 0.6 * gaps[0]


def test_exact_hessian_matches_second_differences():
    yhat, y, w = _instance(4, 12)
    params = CompositeLossParams(2.0, 1.5, 3.0, 0.2)
    h = loss_grad_hess(yhat, y, w, params, exact_chain_gradients=True).h
    eps = 1e-4
    for i in range(yhat.size):
        e = np.zeros_like(yhat)
        e[i] = eps
        fd = (loss_value(yhat + e, y, w, params) - 2 * loss_value(yhat, y, w, params)
              + loss_value(yhat - e, y, w, params)) / eps**2
        assert h[i] == pytest.approx(fd, rel=1e-5)


@given(st.integers(0, 10_000), st.floats(0, 10), st.floats(-5, 5))
def test_ate_gradients_cancel(seed, alpha, tau_ref):
    yhat, y, w = _instance(seed, 15)
    g = term_grad_hess(yhat, y, w, CompositeLossParams(0, 0, alpha, tau_ref))["ate"].g
    assert abs(g.sum()) < 1e-12 * max(1.0, np.abs(g).max() * g.size)


@given(st.integers(0, 10_000), st.floats(0, 10), st.floats(0, 10), st.floats(0, 10))
def test_hessians_positive_and_loss_nonnegative(seed, lam, gamma, alpha):
    yhat, y, w = _instance(seed, 9)
    params = CompositeLossParams(lam, gamma, alpha, 0.3)
    assert np.all(loss_grad_hess(yhat, y, w, params).h > 0)
    assert loss_value(yhat, y, w, params) >= 0


def test_singleton_arm_variance_is_zero():
    terms = loss_terms([1.0, 2.0, 3.0], [0.0, 0.0, 0.0], [1, 0, 0], CompositeLossParams(1, 0, 0, 0))
    assert terms["variance"] == pytest.approx(0.25)


def test_mse_gradient_variance_examples():
    assert mse_gradient_variance([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert mse_gradient_variance([1.5, 2.5, 3.5], [1.0, 2.0, 3.0]) == 0.0
    assert mse_gradient_variance([0.0, 1.0], [0.0, 0.0]) == 1.0
