"""Multi-seed experiment runners shared by the CLI, scripts and acceptance tests.

Each seed is one independent cell: its own dataset (a synthetic draw or an
IHDP replicate), its own train/test split and its own fits. Cells may run in a
process pool; results always come back in cell order.
"""
from __future__ import annotations

import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from itertools import product
from typing import Callable, Sequence

import numpy as np

from .baselines import MetaLearnerSpec, fit_meta
from .booster import BoosterConfig, dr_ate, fit, fit_nuisance, predict_cate, predict_outcome
from .dataset import CausalDataset, SyntheticSpec, generate_synthetic, load_source, read_csv, split_train_test
from .errors import ValidationError
from .evaluation import SeedResult, ate_error, bootstrap_ci, measure_timing, pehe, trimmed_mean
from .gbdt import TreeParams

METHODS = ("cbdt", "s", "t", "x", "dr")
SENSITIVITY_GRID = {"lam": (0.01, 0.1, 1.0, 10.0), "alpha": (0.5, 1.0, 2.0), "eta": (0.01, 0.05, 0.1, 0.2)}
SAFE_ZONE = {"lam": (0.1, 1.0), "alpha": (0.5, 1.0), "eta": (0.05, 0.1, 0.2)}


@dataclass(frozen=True)
class DataConfig:
    """``source``: synthetic | ihdp | ihdp-surrogate | path to a CSV file.

    IHDP seeds map to replicate seed + 1. A CSV source is the same file for
    every seed; only the split changes.
    """
    source: str = "synthetic"
    ihdp_dir: str | None = None
    test_fraction: float = 0.2
    synthetic: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.test_fraction < 1:
            raise ValidationError(f"data.test_fraction must lie in (0, 1), got {self.test_fraction}")
        unknown = set(self.synthetic) - set(SyntheticSpec.__dataclass_fields__) - {"seed"}
        if unknown:
            raise ValidationError(f"unknown data.synthetic fields: {sorted(unknown)}")


def load_dataset(data: DataConfig, seed: int) -> CausalDataset:
    if data.source == "synthetic":
        return generate_synthetic(SyntheticSpec(**{**data.synthetic, "seed": seed}))
    if data.source in ("ihdp", "ihdp-surrogate"):
        return load_source(data.source, seed + 1, data.ihdp_dir)
    if not os.path.isfile(data.source):
        raise ValidationError(f"unknown dataset source {data.source!r}: expected synthetic, ihdp, "
                              "ihdp-surrogate or the path of an existing CSV file")
    return read_csv(data.source)


def data_provenance(data: DataConfig, seed: int = 0) -> str:
    ds = load_dataset(data, seed)
    return str(ds.meta.get("kind", ds.meta.get("source", data.source)))


@lru_cache(maxsize=8)
def _split(data: DataConfig, seed: int) -> tuple[CausalDataset, CausalDataset]:
    return split_train_test(load_dataset(data, seed), 1.0 - data.test_fraction, seed)


def _hashable(data: DataConfig) -> DataConfig:
    # lru_cache needs a hashable key; the synthetic dict is frozen into a tuple-backed copy
    return _FrozenData(data.source, data.ihdp_dir, data.test_fraction, tuple(sorted(data.synthetic.items())))


@dataclass(frozen=True)
class _FrozenData:
    source: str
    ihdp_dir: str | None
    test_fraction: float
    synthetic_items: tuple

    @property
    def synthetic(self) -> dict:
        return dict(self.synthetic_items)


def split_for_seed(data: DataConfig, seed: int) -> tuple[CausalDataset, CausalDataset]:
    return _split(_hashable(data), seed)


@lru_cache(maxsize=8)
def _tau_ref(data: _FrozenData, seed: int, rounds: int, nuisance_seed: int) -> float:
    train, _ = _split(data, seed)
    return dr_ate(train, fit_nuisance(train, rounds, nuisance_seed))


def shared_tau_ref(config: BoosterConfig, data: DataConfig, seed: int) -> float | None:
    """DR calibration target for a seed, cached so grid cells on one seed reuse it."""
    if config.tau_ref_source != "dr" or config.residual_mode == "doubly_robust":
        return None
    return _tau_ref(_hashable(data), seed, config.nuisance_rounds, seed)


# --- single fits -------------------------------------------------------------

def fit_method(method: str, train: CausalDataset, booster: BoosterConfig, learner: MetaLearnerSpec,
               seed: int, tau_ref: float | None = None) -> Callable[[np.ndarray], np.ndarray]:
    """Train one method and return its CATE predictor."""
    if method == "cbdt":
        model = fit(booster.replace(seed=seed), train, tau_ref=tau_ref)
        return lambda X: predict_cate(model, X)
    if method in ("s", "t", "x", "dr"):
        est = fit_meta(MetaLearnerSpec(method.upper(), learner.base_tree, learner.rounds,
                                       learner.learning_rate, seed), train)
        return est.predict
    raise ValidationError(f"unknown method {method!r}; choose from {METHODS}")


def evaluate_seed(method: str, data: DataConfig, seed: int, booster: BoosterConfig,
                  learner: MetaLearnerSpec, coverage_draws: int = 200, timing_repetitions: int = 5,
                  level: float = 0.95) -> SeedResult:
    """Fit on the training split and score on the held-out split of one seed."""
    train, test = split_for_seed(data, seed)
    if not test.has_truth:
        raise ValidationError("benchmarking needs ground-truth effects (mu0/mu1 columns)")
    tau_ref = shared_tau_ref(booster, data, seed) if method == "cbdt" else None
    t0 = time.perf_counter()
    predictor = fit_method(method, train, booster, learner, seed, tau_ref)
    train_s = time.perf_counter() - t0
    tau_hat = predictor(test.features)
    sq, rt = pehe(tau_hat, test.tau)
    true_ate = float(test.tau.mean())
    covered = None
    if coverage_draws > 0:
        ci = bootstrap_ci(lambda idx: float(tau_hat[idx].mean()), test.treatment, coverage_draws, level, seed)
        covered = ci.covers(true_ate)
    reps = max(timing_repetitions, 2)
    inf = measure_timing(lambda: None, lambda: predictor(test.features), reps, 1, test.n)
    return SeedResult(method, seed, sq, rt, ate_error(float(tau_hat.mean()), true_ate), covered,
                      train_s, inf.inference_time, inf.inference_ms_per_batch)


def _pool_map(fn, args: Sequence[tuple], workers: int) -> list:
    if workers <= 1 or len(args) <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        # map preserves submission order, so output order is the cell order
        return list(pool.map(fn, *zip(*args)))


def run_benchmark(methods: Sequence[str], seeds: Sequence[int], data: DataConfig, booster: BoosterConfig,
                  learner: MetaLearnerSpec, coverage_draws: int = 200, timing_repetitions: int = 5,
                  workers: int = 1) -> list[SeedResult]:
    for m in methods:
        if m not in METHODS:
            raise ValidationError(f"unknown method {m!r}; choose from {METHODS}")
    cells = [(m, data, s, booster, learner, coverage_draws, timing_repetitions) for s in seeds for m in methods]
    return _pool_map(evaluate_seed, cells, workers)


# --- ablation ----------------------------------------------------------------

def ablation_variants(booster: BoosterConfig) -> dict[str, BoosterConfig]:
    return {
        "full": booster,
        "no_variance (lam=0)": booster.replace(loss=booster.loss.replace(lam=0.0)),
        "no_ate (alpha=0)": booster.replace(loss=booster.loss.replace(alpha=0.0)),
        "static_schedule": booster.replace(schedule="static"),
    }


@dataclass(frozen=True)
class VariantScore:
    variant: str
    seed: int
    pehe_sqrt: float
    ate_error: float


def _score_variant(name: str, config: BoosterConfig, data: DataConfig, seed: int) -> VariantScore:
    train, test = split_for_seed(data, seed)
    model = fit(config.replace(seed=seed), train, tau_ref=shared_tau_ref(config, data, seed))
    tau_hat = predict_cate(model, test.features)
    return VariantScore(name, seed, pehe(tau_hat, test.tau)[1],
                        ate_error(float(tau_hat.mean()), float(test.tau.mean())))


def run_ablation(seeds: Sequence[int], data: DataConfig, booster: BoosterConfig,
                 workers: int = 1) -> list[VariantScore]:
    cells = [(name, cfg, data, s) for s in seeds for name, cfg in ablation_variants(booster).items()]
    return _pool_map(_score_variant, cells, workers)


@dataclass(frozen=True)
class AblationRow:
    variant: str
    pehe_sqrt: float
    ate_error: float
    pehe_change_pct: float
    ate_change_pct: float


def summarize_ablation(scores: Sequence[VariantScore], trim: int = 0) -> list[AblationRow]:
    """Mean metrics per variant and percentage change relative to the full model."""
    names = list(dict.fromkeys(s.variant for s in scores))
    means = {n: (trimmed_mean([s.pehe_sqrt for s in scores if s.variant == n], trim),
                 trimmed_mean([s.ate_error for s in scores if s.variant == n], trim)) for n in names}
    p0, a0 = means["full"]
    pct = lambda v, ref: 100.0 * (v - ref) / ref if ref else math.nan
    return [AblationRow(n, p, a, pct(p, p0), pct(a, a0)) for n, (p, a) in means.items()]


# --- sensitivity -------------------------------------------------------------

@dataclass(frozen=True)
class GridCell:
    index: int
    lam: float
    alpha: float
    eta: float


def sensitivity_cells(grid: dict | None = None) -> list[GridCell]:
    g = grid or SENSITIVITY_GRID
    return [GridCell(i, lam, a, e) for i, (lam, a, e) in enumerate(product(g["lam"], g["alpha"], g["eta"]))]


@dataclass(frozen=True)
class CellResult:
    index: int
    lam: float
    alpha: float
    eta: float
    pehe_sqrt: float
    ate_error: float
    rmse: float
    per_seed_pehe: tuple[float, ...]


def _run_cell(cell: GridCell, seeds: Sequence[int], data: DataConfig, booster: BoosterConfig,
              trim: int) -> CellResult:
    cfg = booster.replace(loss=booster.loss.replace(lam=cell.lam, alpha=cell.alpha), eta=cell.eta)
    ps, ae, rm = [], [], []
    for s in seeds:
        train, test = split_for_seed(data, s)
        model = fit(cfg.replace(seed=s), train, tau_ref=shared_tau_ref(cfg, data, s))
        tau_hat = predict_cate(model, test.features)
        ps.append(pehe(tau_hat, test.tau)[1])
        ae.append(ate_error(float(tau_hat.mean()), float(test.tau.mean())))
        rm.append(float(np.sqrt(np.mean((predict_outcome(model, test.features, test.treatment) - test.outcome) ** 2))))
    return CellResult(cell.index, cell.lam, cell.alpha, cell.eta, trimmed_mean(ps, trim),
                      trimmed_mean(ae, trim), trimmed_mean(rm, trim), tuple(ps))


def run_sensitivity(seeds: Sequence[int], data: DataConfig, booster: BoosterConfig, grid: dict | None = None,
                    workers: int = 1, trim: int = 1) -> list[CellResult]:
    cells = sensitivity_cells(grid)
    return _pool_map(_run_cell, [(c, tuple(seeds), data, booster, trim) for c in cells], workers)


@dataclass(frozen=True)
class SensitivityShape:
    lam10_mean: float
    lam1_mean: float
    safe_min: float
    safe_max: float

    @property
    def lam10_worse(self) -> bool:
        return self.lam10_mean > self.lam1_mean

    @property
    def safe_spread(self) -> float:
        return (self.safe_max - self.safe_min) / self.safe_min


def sensitivity_shape(cells: Sequence[CellResult]) -> SensitivityShape:
    by_lam = lambda v: [c.pehe_sqrt for c in cells if c.lam == v]
    safe = [c.pehe_sqrt for c in cells
            if c.lam in SAFE_ZONE["lam"] and c.alpha in SAFE_ZONE["alpha"] and c.eta in SAFE_ZONE["eta"]]
    if not by_lam(10.0) or not by_lam(1.0) or not safe:
        raise ValidationError("grid lacks the lam=10, lam=1 or safe-zone cells")
    return SensitivityShape(float(np.mean(by_lam(10.0))), float(np.mean(by_lam(1.0))), min(safe), max(safe))


def learner_spec_from(d: dict) -> MetaLearnerSpec:
    d = dict(d)
    tree = TreeParams(**d.pop("tree", {}))
    spec = MetaLearnerSpec("X", tree, int(d.pop("rounds", 200)), float(d.pop("learning_rate", 0.1)))
    if d:
        raise ValidationError(f"unknown learners fields: {sorted(d)}")
    return spec


def asdict_list(items) -> list[dict]:
    return [asdict(x) for x in items]
