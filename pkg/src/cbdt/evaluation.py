"""Metrics, bootstrap intervals, timing, significance tests and report assembly.

Metric functions are pure. ``measure_timing`` is not: it reads the wall clock
and should run alone in its process, without concurrent benchmarks competing
for the CPU.
"""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .booster import aipw_pseudo_outcomes, fit_nuisance
from .dataset import CausalDataset
from .errors import UndefinedMetricError, ValidationError

REPORT_FORMAT = "cbdt-report/1"


def pehe(tau_hat, tau_true) -> tuple[float, float]:
    """(mean squared CATE error, its square root)."""
    a = np.asarray(tau_hat, dtype=np.float64)
    b = np.asarray(tau_true, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError(f"tau_hat and tau_true must be equal-length vectors, got {a.shape} and {b.shape}")
    if a.size == 0:
        raise ValidationError("pehe needs at least one row")
    sq = float(np.mean((a - b) ** 2))
    return sq, math.sqrt(sq)


def ate_error(tau_hat_ate: float, tau_true_ate: float) -> float:
    return abs(float(tau_hat_ate) - float(tau_true_ate))


# --- bootstrap ---------------------------------------------------------------

def resample_indices(treatment: np.ndarray, rng: np.random.Generator, stratified: bool = True,
                     max_retries: int = 100) -> np.ndarray:
    """Row indices drawn with replacement.

    Stratified draws keep each arm's size fixed, so neither arm can vanish.
    Unstratified draws that empty an arm are redrawn up to ``max_retries`` times.
    """
    t = np.asarray(treatment)
    if stratified:
        parts = []
        for arm in (0, 1):
            rows = np.flatnonzero(t == arm)
            if rows.size == 0:
                raise ValidationError(f"{'treated' if arm else 'control'} arm is empty; cannot resample")
            parts.append(rows[rng.integers(0, rows.size, rows.size)])
        return np.sort(np.concatenate(parts))
    for _ in range(max_retries):
        idx = rng.integers(0, t.size, t.size)
        if 0 < t[idx].sum() < t.size:
            return idx
    raise ValidationError(f"bootstrap resample emptied an arm {max_retries} times in a row")


@dataclass(frozen=True)
class BootstrapCI:
    estimate: float
    lo: float
    hi: float
    level: float
    draws: int

    def covers(self, value: float) -> bool:
        return self.lo <= value <= self.hi


def bootstrap_ci(statistic: Callable[[np.ndarray], float], treatment, draws: int = 200,
                 level: float = 0.95, seed: int = 0, stratified: bool = True) -> BootstrapCI:
    """Percentile interval of ``statistic(idx)`` over resampled row indices."""
    if draws < 1:
        raise ValidationError("draws must be >= 1")
    if not 0 < level < 1:
        raise ValidationError(f"level must lie in (0, 1), got {level}")
    t = np.asarray(treatment)
    rng = np.random.default_rng(seed)
    est = np.array([statistic(resample_indices(t, rng, stratified)) for _ in range(draws)])
    q = (1.0 - level) / 2.0
    lo, hi = np.quantile(est, [q, 1.0 - q])
    return BootstrapCI(float(statistic(np.arange(t.size))), float(lo), float(hi), level, draws)


def dr_ate_statistic(ds: CausalDataset, nuisance_rounds: int = 100, seed: int = 0) -> Callable[[np.ndarray], float]:
    """Cross-fit nuisances once, then map row indices to the mean AIPW pseudo-outcome."""
    nuis = fit_nuisance(ds, nuisance_rounds, seed)
    psi = aipw_pseudo_outcomes(ds, nuis)
    return lambda idx: float(psi[idx].mean())


def bootstrap_coverage(estimator_factory: Callable[[CausalDataset], Callable[[np.ndarray], float]],
                       datasets: Iterable[CausalDataset], true_ate, replications: int = 200,
                       level: float = 0.95, seed: int = 0) -> float:
    """Fraction of datasets whose bootstrap CI contains the true ATE.

    ``true_ate`` is either one number for every dataset or a callable of the
    dataset. Each dataset plays the role of one outer seed.
    """
    if replications < 50:
        raise ValidationError(f"replications must be >= 50, got {replications}")
    if not 0 < level < 1:
        raise ValidationError(f"level must lie in (0, 1), got {level}")
    hits = total = 0
    for j, ds in enumerate(datasets):
        truth = true_ate(ds) if callable(true_ate) else float(true_ate)
        ci = bootstrap_ci(estimator_factory(ds), ds.treatment, replications, level, seed + j)
        hits += ci.covers(truth)
        total += 1
    if total == 0:
        raise ValidationError("bootstrap_coverage needs at least one dataset")
    return hits / total


# --- efficiency --------------------------------------------------------------

def eap(pehe_value: float, train_time_s: float, infer_time_ms: float) -> float:
    """PEHE divided by -log10(train seconds x inference seconds)."""
    if pehe_value < 0:
        raise ValidationError("pehe must be >= 0")
    if train_time_s <= 0 or infer_time_ms <= 0:
        raise ValidationError("times must be > 0")
    product = train_time_s * infer_time_ms / 1000.0
    if product >= 1.0:
        raise UndefinedMetricError(
            f"EAP is undefined when train_time x infer_time >= 1 s^2 (got {product:.4g}); "
            "the log term would be zero or negative")
    return float(pehe_value) / -math.log10(product)


@dataclass(frozen=True)
class TimingSample:
    train_time: float               # seconds per run
    inference_time: float           # milliseconds per sample
    repetitions: int
    warmup_discarded: int
    inference_ms_per_batch: float = float("nan")

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValidationError("repetitions must be >= 1")


def _clock(fn) -> float:
    t0 = time.perf_counter_ns()
    fn()
    # the clock is monotonic; a single tick stands in for sub-resolution work
    return max(time.perf_counter_ns() - t0, 1) / 1e9


def measure_timing(train: Callable[[], object], predict: Callable[[], object] | None = None,
                   repetitions: int = 10, warmup: int = 2, n_samples: int = 1) -> TimingSample:
    """Mean wall-clock time of ``train`` (and ``predict``) over post-warmup runs.

    ``repetitions`` counts all runs including the discarded warmup ones, so
    repetitions=10, warmup=2 averages 8 timed runs. Inference time is reported
    per batch and per sample (batch / n_samples).
    """
    if repetitions <= warmup:
        raise ValidationError(f"repetitions ({repetitions}) must exceed warmup ({warmup})")
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    tr, inf = [], []
    for i in range(repetitions):
        a = _clock(train)
        b = _clock(predict) if predict is not None else float("nan")
        if i >= warmup:
            tr.append(a)
            inf.append(b)
    batch_ms = float(np.mean(inf)) * 1000.0
    return TimingSample(float(np.mean(tr)), batch_ms / n_samples, repetitions - warmup, warmup, batch_ms)


# --- significance ------------------------------------------------------------

@dataclass(frozen=True)
class TTestResult:
    t_stat: float
    p_value: float
    df: int
    degenerate: bool = False


def paired_ttest(a, b) -> TTestResult:
    """Two-sided paired t-test on per-seed metrics.

    When the differences have zero variance the statistic is undefined; the
    result is flagged degenerate with t = 0, p = 1 for exact ties and
    t = +-inf, p = 0 for a constant nonzero shift.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValidationError("paired_ttest needs two equal-length vectors with at least 2 entries")
    d = a - b
    n = d.size
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, n - 1, True)
        return TTestResult(math.copysign(math.inf, mean), 0.0, n - 1, True)
    t = mean / (sd / math.sqrt(n))
    p = float(2.0 * stats.t.sf(abs(t), n - 1))
    return TTestResult(t, p, n - 1)


def bonferroni(p_values, family_size: int | None = None, alpha: float = 0.05) -> list[bool]:
    p = [float(v) for v in p_values]
    m = len(p) if family_size is None else family_size
    if m < 1:
        raise ValidationError("family size must be >= 1")
    return [v < alpha / m for v in p]


# --- multi-seed summaries ----------------------------------------------------

def trimmed_mean(values, trim: int = 1) -> float:
    """Mean after dropping the ``trim`` highest and lowest values.

    Falls back to the plain mean when fewer than 2*trim + 1 values are given.
    """
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValidationError("trimmed_mean of an empty sequence")
    if trim > 0 and v.size > 2 * trim:
        v = v[trim:-trim]
    return float(v.mean())


def mean_ci(values, level: float = 0.95) -> tuple[float, float]:
    """t-interval for the mean over seeds; collapses to the mean for one value."""
    v = np.asarray(values, dtype=np.float64)
    m = float(v.mean())
    if v.size < 2:
        return m, m
    half = float(stats.t.ppf(0.5 + level / 2.0, v.size - 1) * v.std(ddof=1) / math.sqrt(v.size))
    return m - half, m + half


@dataclass(frozen=True)
class SeedResult:
    """One method on one seed."""
    method: str
    seed: int
    pehe_sq: float
    pehe_sqrt: float
    ate_error: float
    covered: bool | None
    train_time_s: float
    infer_ms_per_sample: float
    infer_ms_per_batch: float


@dataclass(frozen=True)
class MethodSummary:
    method: str
    n_seeds: int
    pehe_sqrt: float
    pehe_sqrt_ci: tuple[float, float]
    pehe_sq: float
    ate_error: float
    ate_error_ci: tuple[float, float]
    coverage: float | None
    train_time_s: float
    infer_time_ms_per_sample: float
    infer_time_ms_per_batch: float
    eap: float


@dataclass(frozen=True)
class PairwiseTest:
    a: str
    b: str
    t_stat: float
    p_value: float
    degenerate: bool
    bonferroni_significant: bool


@dataclass
class EvaluationReport:
    methods: list[MethodSummary]
    pairs: list[PairwiseTest]
    per_seed: list[SeedResult]
    seeds: list[int]
    configs: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)
    bootstrap: dict = field(default_factory=dict)

    def method(self, name: str) -> MethodSummary:
        for m in self.methods:
            if m.method == name:
                return m
        raise KeyError(name)


def assemble_report(per_seed: Sequence[SeedResult], configs: Mapping | None = None,
                    trim: int = 1, alpha: float = 0.05, level: float = 0.95) -> EvaluationReport:
    """Summarise per-seed results by method (trimmed means) and test every pair."""
    names = list(dict.fromkeys(r.method for r in per_seed))
    seeds = sorted({r.seed for r in per_seed})
    notes: list[str] = []
    summaries = []
    for name in names:
        rows = sorted((r for r in per_seed if r.method == name), key=lambda r: r.seed)
        ps = [r.pehe_sqrt for r in rows]
        ae = [r.ate_error for r in rows]
        cov = [r.covered for r in rows if r.covered is not None]
        train = trimmed_mean([r.train_time_s for r in rows], trim)
        batch = trimmed_mean([r.infer_ms_per_batch for r in rows], trim)
        p_sqrt = trimmed_mean(ps, trim)
        try:
            e = eap(p_sqrt, train, batch)
        except UndefinedMetricError as err:
            e = float("nan")
            notes.append(f"{name}: {err}")
        summaries.append(MethodSummary(
            name, len(rows), p_sqrt, mean_ci(ps, level), trimmed_mean([r.pehe_sq for r in rows], trim),
            trimmed_mean(ae, trim), mean_ci(ae, level),
            float(np.mean(cov)) if cov else None,
            train, trimmed_mean([r.infer_ms_per_sample for r in rows], trim), batch, e))

    pairs: list[PairwiseTest] = []
    if len(seeds) < 2:
        if len(names) > 1:
            notes.append("paired t-tests omitted: fewer than 2 seeds")
    else:
        raw = []
        for a, b in combinations(names, 2):
            va = {r.seed: r.pehe_sqrt for r in per_seed if r.method == a}
            vb = {r.seed: r.pehe_sqrt for r in per_seed if r.method == b}
            common = sorted(set(va) & set(vb))
            if len(common) < 2:
                notes.append(f"{a} vs {b}: fewer than 2 shared seeds, test omitted")
                continue
            raw.append((a, b, paired_ttest([va[s] for s in common], [vb[s] for s in common])))
        flags = bonferroni([r.p_value for _, _, r in raw], alpha=alpha) if raw else []
        pairs = [PairwiseTest(a, b, r.t_stat, r.p_value, r.degenerate, f)
                 for (a, b, r), f in zip(raw, flags)]
    return EvaluationReport(summaries, pairs, list(per_seed), seeds, dict(configs or {}), notes)


def _fmt(v, digits=4) -> str:
    if v is None:
        return "-"
    if isinstance(v, float) and not math.isfinite(v):
        return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return f"{v:.{digits}f}"


def _table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(header)]
    line = lambda cells: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))
    out = [line(header), "  ".join("-" * w for w in widths)]
    out += [line(r) for r in rows]
    return "\n".join(out)


def report_text(report: EvaluationReport) -> str:
    """Aligned plain-text tables: accuracy, efficiency, pairwise tests."""
    acc = [[m.method, _fmt(m.pehe_sqrt), f"[{_fmt(m.pehe_sqrt_ci[0])}, {_fmt(m.pehe_sqrt_ci[1])}]",
            _fmt(m.pehe_sq), _fmt(m.ate_error), f"[{_fmt(m.ate_error_ci[0])}, {_fmt(m.ate_error_ci[1])}]",
            _fmt(m.coverage, 2)] for m in report.methods]
    eff = [[m.method, _fmt(m.pehe_sqrt), _fmt(m.train_time_s), _fmt(m.infer_time_ms_per_batch, 3),
            _fmt(m.infer_time_ms_per_sample, 6), _fmt(m.eap)] for m in report.methods]
    parts = [f"seeds: {', '.join(map(str, report.seeds))}  (summaries are trimmed means)", "",
             _table(["method", "sqrt_PEHE", "95% CI", "PEHE", "ATE_err", "95% CI", "coverage"], acc), "",
             _table(["method", "sqrt_PEHE", "train_s", "infer_ms/batch", "infer_ms/sample", "EAP"], eff)]
    if report.pairs:
        m = len(report.pairs)
        rows = [[f"{p.a} vs {p.b}", _fmt(p.t_stat), _fmt(p.p_value), "yes" if p.bonferroni_significant else "no"]
                for p in report.pairs]
        parts += ["", f"paired t-tests on sqrt_PEHE (Bonferroni family of {m})",
                  _table(["pair", "t", "p", "significant"], rows)]
    if report.notes:
        parts += ["", "notes:"] + [f"  - {n}" for n in report.notes]
    return "\n".join(parts) + "\n"


def report_csv(report: EvaluationReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "n_seeds", "pehe_sqrt", "pehe_sqrt_lo", "pehe_sqrt_hi", "pehe_sq", "ate_error",
                "ate_error_lo", "ate_error_hi", "coverage", "train_time_s", "infer_ms_per_sample",
                "infer_ms_per_batch", "eap"])
    for m in report.methods:
        w.writerow([m.method, m.n_seeds, repr(m.pehe_sqrt), repr(m.pehe_sqrt_ci[0]), repr(m.pehe_sqrt_ci[1]),
                    repr(m.pehe_sq), repr(m.ate_error), repr(m.ate_error_ci[0]), repr(m.ate_error_ci[1]),
                    "" if m.coverage is None else repr(m.coverage), repr(m.train_time_s),
                    repr(m.infer_time_ms_per_sample), repr(m.infer_time_ms_per_batch), repr(m.eap)])
    return buf.getvalue()


def per_seed_csv(report: EvaluationReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "seed", "pehe_sq", "pehe_sqrt", "ate_error", "covered", "train_time_s",
                "infer_ms_per_sample", "infer_ms_per_batch"])
    for r in report.per_seed:
        w.writerow([r.method, r.seed, repr(r.pehe_sq), repr(r.pehe_sqrt), repr(r.ate_error),
                    "" if r.covered is None else int(r.covered), repr(r.train_time_s),
                    repr(r.infer_ms_per_sample), repr(r.infer_ms_per_batch)])
    return buf.getvalue()


def pairs_csv(report: EvaluationReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["a", "b", "t_stat", "p_value", "degenerate", "bonferroni_significant"])
    for p in report.pairs:
        w.writerow([p.a, p.b, repr(p.t_stat), repr(p.p_value), int(p.degenerate), int(p.bonferroni_significant)])
    return buf.getvalue()


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "cbdt"
    import matplotlib.pyplot as plt
    return plt


def plot_report(report: EvaluationReport, prefix: str) -> list[str]:
    """Write two SVG figures and return their paths.

    ``<prefix>_tradeoff.svg``: training time vs sqrt-PEHE on log axes, marker
    area proportional to ATE error. ``<prefix>_bars.svg``: sqrt-PEHE bars with
    training time on a second axis.
    """
    plt = _pyplot()
    names = [m.method for m in report.methods]
    pe = np.array([m.pehe_sqrt for m in report.methods])
    tt = np.array([m.train_time_s for m in report.methods])
    ae = np.array([m.ate_error for m in report.methods])
    paths = []

    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(tt, pe, s=40 + 2000 * ae / max(ae.max(), 1e-12), alpha=0.5)
    for x, y, n in zip(tt, pe, names):
        ax.annotate(n, (x, y), ha="center", va="center", fontsize=8)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("training time (s)")
    ax.set_ylabel("sqrt PEHE")
    ax.set_title("accuracy vs cost (area ~ ATE error)")
    fig.tight_layout()
    paths.append(f"{prefix}_tradeoff.svg")
    fig.savefig(paths[-1], metadata={"Date": None})
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 4))
    x = np.arange(len(names))
    ax.bar(x - 0.2, pe, 0.4, color="tab:blue", label="sqrt PEHE")
    ax.set_ylabel("sqrt PEHE")
    ax.set_xticks(x, names)
    ax2 = ax.twinx()
    ax2.bar(x + 0.2, tt, 0.4, color="tab:orange", label="train s")
    ax2.set_ylabel("training time (s)")
    fig.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    paths.append(f"{prefix}_bars.svg")
    fig.savefig(paths[-1], metadata={"Date": None})
    plt.close(fig)
    return paths
