import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cbdt.booster import BoosterConfig, fit
from cbdt.dataset import CausalDataset, SyntheticSpec, generate_synthetic
from cbdt.errors import ValidationError
from cbdt.rules import (CausalRule, Condition, RuleExtractionSpec, RuleSet, apply_rules, extract_rules,
                        rule_coverage, rule_fidelity, rule_truth_check)


def _uniform_ds(n=1000, d=3, seed=0, tau=None):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 5, (n, d))
    t = (rng.random(n) < 0.5).astype(int)
    mu0 = X[:, 1]
    mu1 = mu0 + (tau(X) if tau is not None else 0.0)
    y = np.where(t == 1, mu1, mu0) + 0.1 * rng.standard_normal(n)
    return CausalDataset(X, t, y, mu0, mu1)


def step_effect(X):
    return 1.0 + 2.0 * (X[:, 0] > 2.5)


def test_step_model_gives_two_one_condition_rules():
    ds = _uniform_ds(tau=step_effect)
    rules = extract_rules(step_effect, ds, RuleExtractionSpec(bootstrap_draws=100))
    assert len(rules) == 2
    by_effect = sorted(rules, key=lambda r: r.effect_estimate)
    low, high = by_effect
    assert len(low.conditions) == len(high.conditions) == 1
    assert low.conditions[0].feature == high.conditions[0].feature == 0
    assert (low.conditions[0].op, high.conditions[0].op) == ("<=", ">")
    assert low.conditions[0].threshold == pytest.approx(2.5, abs=0.01)
    assert (low.effect_estimate, high.effect_estimate) == (1.0, 3.0)
    assert rule_fidelity(rules, step_effect, ds) == 1.0


def test_depth_one_gives_at_most_two_rules():
    ds = _uniform_ds(seed=1)
    wavy = lambda X: np.sin(X[:, 0]) + X[:, 1]
    rules = extract_rules(wavy, ds, RuleExtractionSpec(surrogate_depth=1, prune_alpha=None, bootstrap_draws=50))
    assert 1 <= len(rules) <= 2


def test_constant_model_gives_one_rule():
    ds = _uniform_ds(seed=2)
    rules = extract_rules(lambda X: np.full(X.shape[0], 1.25), ds, RuleExtractionSpec(bootstrap_draws=50))
    assert len(rules) == 1
    (rule,) = rules
    assert rule.conditions == () and rule.effect_estimate == 1.25 and rule.support == ds.n
    assert rule_fidelity(rules, lambda X: np.full(X.shape[0], 1.25), ds) == 1.0
    assert rule_fidelity(rules, lambda X: np.full(X.shape[0], 2.0), ds) == 0.0


def test_single_mean_rule_explains_nothing():
    ds = _uniform_ds(seed=3)
    tau = step_effect(ds.features)
    mean_rule = CausalRule((), float(tau.mean()), (0.0, 4.0), ds.n, 1.0, 0.0)
    assert rule_fidelity([mean_rule], step_effect, ds) == pytest.approx(0.0, abs=1e-12)


def test_rules_reproduce_their_own_surrogate():
    ds = _uniform_ds(seed=4)
    wavy = lambda X: np.sin(2 * X[:, 0]) + 0.5 * X[:, 2]
    rules = extract_rules(wavy, ds, RuleExtractionSpec(prune_alpha=None, bootstrap_draws=50))
    surrogate = lambda X: np.array([r.effect_estimate for r in rules])[apply_rules(rules, X)]
    assert rule_fidelity(rules, surrogate, ds) == 1.0


def test_rules_partition_rows_and_respect_support():
    ds = _uniform_ds(seed=5)
    wavy = lambda X: np.cos(X[:, 0]) * X[:, 1]
    spec = RuleExtractionSpec(prune_alpha=None, bootstrap_draws=50, min_support=0.05)
    rules = extract_rules(wavy, ds, spec)
    hits = np.sum([r.covers(ds.features) for r in rules], axis=0)
    assert np.all(hits == 1)
    assert rule_coverage(rules, ds.features) == 1.0
    for r in rules:
        assert r.support >= spec.min_support * ds.n
        assert r.ci[0] <= r.effect_estimate <= r.ci[1]
        for c in r.conditions:
            partner = [o for o in r.conditions if o.feature == c.feature and o.op != c.op]
            for o in partner:
                lo, hi = (o.threshold, c.threshold) if c.op == "<=" else (c.threshold, o.threshold)
                assert lo < hi


@settings(max_examples=10)
@given(st.integers(0, 10_000))
def test_shallower_surrogate_never_fits_better(seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(3)
    model = lambda X: np.sin(X @ w) + 0.3 * X[:, 0] * X[:, 1]
    ds = _uniform_ds(400, seed=seed)
    fids = [rule_fidelity(extract_rules(model, ds, RuleExtractionSpec(surrogate_depth=d, prune_alpha=None,
                                                                      bootstrap_draws=20)), model, ds)
            for d in (1, 2, 3, 4)]
    assert all(a <= b + 1e-12 for a, b in zip(fids, fids[1:]))


def test_round_trip_and_text():
    ds = _uniform_ds(seed=6, tau=step_effect)
    rules = extract_rules(step_effect, ds, RuleExtractionSpec(bootstrap_draws=50))
    back = RuleSet.from_json(rules.to_json())
    assert back.to_dict() == rules.to_dict()
    assert back.rules == rules.rules
    line = rules.text().splitlines()[0]
    assert line.startswith("IF x1 ") and " THEN τ̂ = " in line and line.endswith("%")
    assert rules.to_csv().splitlines()[0].startswith("rule,conditions")


def test_rule_text_format():
    rule = CausalRule((Condition(2, ">", 2.5), Condition(0, "<=", 65.0)), 1.82, (1.61, 2.03), 124, 0.124, 0.9)
    assert rule.text(["x1", "x2", "x3"]) == "IF x3 > 2.50 AND x1 ≤ 65.00 THEN τ̂ = 1.82 [1.61, 2.03], support 12.4%"
    assert CausalRule((), 0.5, (0.1, 0.9), 10, 1.0, 1.0).text().startswith("IF TRUE THEN")


def test_validation():
    with pytest.raises(ValidationError):
        RuleExtractionSpec(surrogate_depth=0)
    with pytest.raises(ValidationError):
        RuleExtractionSpec(min_support=1.0)
    with pytest.raises(ValidationError):
        Condition(0, "<", 1.0)
    with pytest.raises(ValidationError, match="format"):
        RuleSet.from_dict({"format": "other"})


def test_pruning_merges_splits_the_data_does_not_support():
    ds = _uniform_ds(seed=6)
    assert len(extract_rules(step_effect, ds, RuleExtractionSpec(bootstrap_draws=50))) == 1
    assert len(extract_rules(step_effect, ds, RuleExtractionSpec(bootstrap_draws=50, prune_alpha=None))) == 2


def test_truth_check():
    ds = _uniform_ds(seed=7, tau=step_effect)
    rules = extract_rules(step_effect, ds, RuleExtractionSpec(bootstrap_draws=50))
    report = rule_truth_check(rules, ds)
    assert [r.deviation for r in report] == [0.0, 0.0]
    assert all(r.ci_covers for r in report)
    plain = CausalDataset(ds.features, ds.treatment, ds.outcome)
    with pytest.raises(ValidationError, match="mu0/mu1"):
        rule_truth_check(rules, plain)


def test_constant_effect_rules_near_truth():
    ds = generate_synthetic(SyntheticSpec(n=5000, d=4, seed=3, heterogeneity=0.0, effect=2.0))
    model = fit(BoosterConfig(num_rounds=150), ds)
    rules = extract_rules(model, ds, RuleExtractionSpec(bootstrap_draws=200))
    assert len(rules) >= 1
    assert all(abs(r.effect_estimate - 2.0) <= 0.2 for r in rules)


def test_null_effect_rule_intervals_cover_zero():
    hits = total = 0
    for seed in range(20):
        ds = generate_synthetic(SyntheticSpec(n=1000, d=4, seed=seed, heterogeneity=0.0, effect=0.0))
        model = fit(BoosterConfig(num_rounds=100, seed=seed), ds)
        for r in extract_rules(model, ds, RuleExtractionSpec(bootstrap_draws=200, seed=seed)):
            hits += r.ci[0] <= 0.0 <= r.ci[1]
            total += 1
    assert hits / total >= 0.90
