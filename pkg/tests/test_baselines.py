import json
import numpy as np
import pytest

from cbdt.baselines import MetaLearner, MetaLearnerSpec, fit_meta
from cbdt.booster import aipw_pseudo_outcomes, fit_nuisance
from cbdt.dataset import CausalDataset, SyntheticSpec, generate_synthetic
from cbdt.errors import ValidationError
from cbdt.gbdt import TreeParams

KINDS = ("S", "T", "X", "DR")


def _tree_representable(seed=0, n=1000):
    # mu0 is exactly a depth-2 tree on integer features, so boosting can fit it without residual error
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 4, (n, 3)).astype(float)
    mu0 = 1.0 + 2.0 * (X[:, 0] >= 2) - 1.0 * (X[:, 1] >= 1)
    mu1 = mu0 + 2.0
    t = (rng.random(n) < 0.5).astype(int)
    return CausalDataset(X, t, np.where(t == 1, mu1, mu0), mu0, mu1)


@pytest.mark.parametrize("kind", KINDS)
def test_noiseless_constant_effect_is_recovered_exactly(kind):
    ds = _tree_representable()
    spec = MetaLearnerSpec(kind, TreeParams(max_depth=3, min_samples_leaf=1, split_reg_lambda=0.0),
                           rounds=200, learning_rate=0.5)
    tau = fit_meta(spec, ds).predict(ds.features)
    assert np.max(np.abs(tau - 2.0)) < 1e-6


@pytest.mark.parametrize("kind", KINDS)
def test_null_effect_gives_small_estimates(kind):
    errs = []
    for seed in range(10):
        ds = generate_synthetic(SyntheticSpec(n=5000, d=4, seed=seed, heterogeneity=0.0, effect=0.0))
        errs.append(fit_meta(MetaLearnerSpec(kind, rounds=100, seed=seed), ds).predict(ds.features).mean())
    assert abs(np.mean(errs)) < 0.1


def test_dr_pseudo_outcomes_average_to_aipw():
    ds = generate_synthetic(SyntheticSpec(n=600, d=3, seed=2))
    spec = MetaLearnerSpec("DR", rounds=40, seed=5)
    model = fit_meta(spec, ds)
    nuis = fit_nuisance(ds, spec.rounds, spec.seed, tree=spec.base_tree, learning_rate=spec.learning_rate)
    assert abs(model.pseudo_outcomes.mean() - aipw_pseudo_outcomes(ds, nuis).mean()) < 1e-10


def test_disjoint_support_is_noted():
    X = np.concatenate([np.linspace(0, 1, 30), np.linspace(2, 3, 30)])[:, None]
    t = np.r_[np.zeros(30, int), np.ones(30, int)]
    model = fit_meta(MetaLearnerSpec("T", rounds=5), CausalDataset(X, t, X[:, 0] + t))
    assert any("disjoint" in n for n in model.notes)
    ds = generate_synthetic(SyntheticSpec(n=200, d=2))
    assert fit_meta(MetaLearnerSpec("T", rounds=5), ds).notes == []


@pytest.mark.parametrize("kind", KINDS)
def test_fit_is_deterministic(kind):
    ds = generate_synthetic(SyntheticSpec(n=300, d=3, seed=1))
    spec = MetaLearnerSpec(kind, rounds=20)
    assert np.array_equal(fit_meta(spec, ds).predict(ds.features), fit_meta(spec, ds).predict(ds.features))


def test_small_arm_error_names_the_arm():
    X = np.random.default_rng(0).standard_normal((40, 2))
    t = np.zeros(40, int)
    t[:3] = 1
    with pytest.raises(ValidationError, match="treated arm has 3 rows"):
        fit_meta(MetaLearnerSpec("T"), CausalDataset(X, t, np.zeros(40)))


def test_duplicate_rows_are_fine():
    X = np.repeat(np.arange(10.0), 10)[:, None]
    t = np.tile([0, 1], 50)
    ds = CausalDataset(X, t, X[:, 0] + 3.0 * t)
    for kind in KINDS:
        assert np.all(np.isfinite(fit_meta(MetaLearnerSpec(kind, rounds=20), ds).predict(X)))


@pytest.mark.parametrize("kind", KINDS)
def test_round_trip(kind, tmp_path):
    ds = generate_synthetic(SyntheticSpec(n=200, d=3, seed=3))
    model = fit_meta(MetaLearnerSpec(kind, rounds=10), ds)
    model.save(tmp_path / "m.json")
    back = MetaLearner.from_dict(json.loads((tmp_path / "m.json").read_text()))
    assert np.array_equal(back.predict(ds.features), model.predict(ds.features))


def test_spec_validation():
    with pytest.raises(ValidationError):
        MetaLearnerSpec("Z")
    with pytest.raises(ValidationError):
        MetaLearnerSpec(rounds=0)
    model = fit_meta(MetaLearnerSpec("S", rounds=3), generate_synthetic(SyntheticSpec(n=50, d=2)))
    with pytest.raises(ValidationError):
        model.predict(np.zeros((2, 3)))
