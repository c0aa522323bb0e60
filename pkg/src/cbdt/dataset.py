"""Causal datasets: container, CSV I/O, preprocessing and synthetic generators."""
from __future__ import annotations

import csv
import logging
import math
import os
import warnings
from dataclasses import dataclass, field
from typing import Literal, Mapping, Sequence

import numpy as np
from scipy.special import expit, ndtr

from .errors import FormatError, ValidationError

log = logging.getLogger(__name__)

IHDP_COLUMNS = ("treatment", "y_factual", "y_cfactual", "mu0", "mu1")
IHDP_N_COVARIATES = 25


def _frozen(a, dtype=np.float64):
    if a is None:
        return None
    arr = np.array(a, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class CausalDataset:
    features: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    mu0: np.ndarray | None = None
    mu1: np.ndarray | None = None
    y_cf: np.ndarray | None = None
    feature_names: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        X = _frozen(self.features)
        if X.ndim != 2:
            raise ValidationError(f"features must be 2-d, got shape {X.shape}")
        n, d = X.shape
        t_raw = np.asarray(self.treatment, dtype=np.float64)
        bad = np.flatnonzero((t_raw != 0) & (t_raw != 1))
        if bad.size:
            raise ValidationError(
                f"treatment must be 0/1; row {int(bad[0])} has value {t_raw[bad[0]]!r}")
        t = _frozen(t_raw, np.int64)
        y = _frozen(self.outcome)
        for name, arr in (("treatment", t), ("outcome", y)):
            if arr.shape != (n,):
                raise ValidationError(f"{name} must have length {n}, got shape {arr.shape}")
        if t.sum() == 0 or t.sum() == n:
            raise ValidationError("both treatment arms must be non-empty")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValidationError("features and outcome must be finite")
        extras = {}
        for name in ("mu0", "mu1", "y_cf"):
            arr = _frozen(getattr(self, name))
            if arr is not None and arr.shape != (n,):
                raise ValidationError(f"{name} must have length {n}")
            extras[name] = arr
        if (extras["mu0"] is None) != (extras["mu1"] is None):
            raise ValidationError("mu0 and mu1 must be given together")
        names = tuple(self.feature_names) or tuple(f"x{j + 1}" for j in range(d))
        if len(names) != d:
            raise ValidationError(f"{len(names)} feature names for {d} features")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "treatment", t)
        object.__setattr__(self, "outcome", y)
        for k, v in extras.items():
            object.__setattr__(self, k, v)
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "meta", dict(self.meta))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def n_treated(self) -> int:
        return int(self.treatment.sum())

    @property
    def n_control(self) -> int:
        return self.n - self.n_treated

    @property
    def has_truth(self) -> bool:
        return self.mu0 is not None

    @property
    def tau(self) -> np.ndarray:
        if not self.has_truth:
            raise ValidationError("dataset has no mu0/mu1; true effects need synthetic or IHDP data")
        return self.mu1 - self.mu0

    def subset(self, idx) -> "CausalDataset":
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return CausalDataset(self.features[idx], self.treatment[idx], self.outcome[idx],
                             pick(self.mu0), pick(self.mu1), pick(self.y_cf),
                             self.feature_names, self.meta)

    def equals(self, other: "CausalDataset") -> bool:
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and bool(np.array_equal(a, b))
        return (self.feature_names == other.feature_names
                and all(same(getattr(self, k), getattr(other, k))
                        for k in ("features", "treatment", "outcome", "mu0", "mu1", "y_cf")))


# --- CSV -------------------------------------------------------------------


def write_csv(ds: CausalDataset, path: str | os.PathLike) -> None:
    """IHDP column layout: treatment, y_factual, y_cfactual, mu0, mu1, covariates.

    Columns that a dataset does not carry are omitted.
    """
    cols = ["treatment", "y_factual"]
    data = [ds.treatment.astype(np.float64), ds.outcome]
    for name, arr in (("y_cfactual", ds.y_cf), ("mu0", ds.mu0), ("mu1", ds.mu1)):
        if arr is not None:
            cols.append(name)
            data.append(arr)
    cols += list(ds.feature_names)
    table = np.column_stack(data + [ds.features])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in table:
            w.writerow([repr(float(v)) for v in row])


def _parse_float(text: str, row: int, col: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise FormatError(f"row {row}, column {col!r}: cannot parse {text!r} as a number") from None


def read_csv(path: str | os.PathLike, require: Sequence[str] = ("treatment", "y_factual")) -> CausalDataset:
    """Read a causal CSV with a header. Headerless files are taken to be in IHDP order."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise FormatError(f"{path}: empty file")
    first = rows[0]
    try:
        [float(v) for v in first]
        headerless = True
    except ValueError:
        headerless = False
    if headerless:
        k = len(first) - len(IHDP_COLUMNS)
        if k < 1:
            raise FormatError(f"{path}: headerless file needs at least {len(IHDP_COLUMNS) + 1} columns")
        header = list(IHDP_COLUMNS) + [f"x{j + 1}" for j in range(k)]
        body = rows
    else:
        header = [h.strip() for h in first]
        body = rows[1:]
    for col in require:
        if col not in header:
            raise FormatError(f"{path}: missing required column {col!r}")
    width = len(header)
    values = np.empty((len(body), width))
    for i, r in enumerate(body):
        if len(r) != width:
            raise FormatError(f"{path}: row {i} has {len(r)} fields, expected {width}")
        values[i] = [_parse_float(v, i, header[j]) for j, v in enumerate(r)]
    col = {h: values[:, j] for j, h in enumerate(header)}
    feat_names = [h for h in header if h not in IHDP_COLUMNS]
    t = col["treatment"]
    bad = np.flatnonzero((t != 0) & (t != 1))
    if bad.size:
        raise ValidationError(f"{path}: treatment must be 0/1; row {int(bad[0])} has {t[bad[0]]:g}")
    return CausalDataset(
        features=np.column_stack([col[h] for h in feat_names]) if feat_names else np.empty((len(body), 0)),
        treatment=t,
        outcome=col["y_factual"],
        mu0=col.get("mu0"),
        mu1=col.get("mu1"),
        y_cf=col.get("y_cfactual"),
        feature_names=tuple(feat_names),
        meta={"source": str(path)},
    )


def ihdp_path(root: str | os.PathLike, replicate: int) -> str:
    return os.path.join(os.fspath(root), f"ihdp_npci_{replicate}.csv")


def load_ihdp_csv(path: str | os.PathLike, replicate: int = 1) -> CausalDataset:
    """Load one IHDP replicate (747 x 25). ``path`` is a file or a directory of
    ``ihdp_npci_<replicate>.csv`` files."""
    if os.path.isdir(path):
        path = ihdp_path(path, replicate)
    ds = read_csv(path, require=IHDP_COLUMNS)
    if ds.d != IHDP_N_COVARIATES:
        raise FormatError(f"{path}: expected {IHDP_N_COVARIATES} covariates, found {ds.d}")
    ds.meta.update(source=str(path), replicate=replicate, kind="ihdp")
    return ds


# --- preprocessing ---------------------------------------------------------


@dataclass(frozen=True)
class PreprocessSpec:
    iqr_multiplier: float = 1.5
    zscore_clip_sigma: float = 3.0
    categorical_columns: tuple[str, ...] = ()
    imputation: Mapping[str, Literal["median", "multiple"]] = field(default_factory=dict)
    n_imputations: int = 5
    seed: int = 0

    def __post_init__(self):
        if not self.iqr_multiplier > 0:
            raise ValidationError("iqr_multiplier must be > 0")
        if not self.zscore_clip_sigma > 0:
            raise ValidationError("zscore_clip_sigma must be > 0")


@dataclass(frozen=True)
class RawTable:
    """Columns by name. Missing values are NaN (numeric) or None/'' (categorical)."""

    columns: Mapping[str, Sequence]
    treatment: str
    outcome: str


def iqr_bounds(values: np.ndarray, multiplier: float = 1.5) -> tuple[float, float]:
    """Quartiles by linear interpolation between order statistics (type 7)."""
    q1, q3 = np.quantile(values, [0.25, 0.75], method="linear")
    iqr = q3 - q1
    return q1 - multiplier * iqr, q3 + multiplier * iqr


def _is_missing(v) -> bool:
    return v is None or v == "" or (isinstance(v, float) and math.isnan(v))


def _impute_multiple(cols: dict[str, np.ndarray], name: str, m: int, rng) -> np.ndarray:
    """Average of ``m`` stochastic linear-regression imputations on the other columns."""
    target = cols[name]
    miss = np.isnan(target)
    others = [np.where(np.isnan(c), np.nanmedian(c), c) for k, c in cols.items() if k != name]
    A = np.column_stack([np.ones(target.size)] + others)
    coef, *_ = np.linalg.lstsq(A[~miss], target[~miss], rcond=None)
    resid_sd = np.std(target[~miss] - A[~miss] @ coef)
    fill = np.mean([A[miss] @ coef + rng.normal(0, resid_sd, miss.sum()) for _ in range(m)], axis=0)
    out = target.copy()
    out[miss] = fill
    return out


def preprocess(raw: RawTable, spec: PreprocessSpec = PreprocessSpec()) -> CausalDataset:
    """Impute, drop IQR outliers, z-score and clip continuous columns, one-hot categoricals.

    Treatment and outcome pass through untouched (rows are dropped whole).
    """
    names = list(raw.columns)
    for col in (raw.treatment, raw.outcome):
        if col not in raw.columns:
            raise ValidationError(f"column {col!r} not found")
    t = np.asarray(raw.columns[raw.treatment], dtype=np.float64)
    y = np.asarray(raw.columns[raw.outcome], dtype=np.float64)
    if np.any(np.isnan(t)) or np.any(np.isnan(y)):
        raise ValidationError("treatment and outcome may not contain missing values")
    covs = [c for c in names if c not in (raw.treatment, raw.outcome)]
    cat = [c for c in covs if c in spec.categorical_columns]
    cont = [c for c in covs if c not in spec.categorical_columns]
    notes: list[str] = []

    values: dict[str, np.ndarray] = {}
    for c in cont:
        v = np.array([np.nan if _is_missing(x) else float(x) for x in raw.columns[c]])
        if np.all(np.isnan(v)):
            raise ValidationError(f"column {c!r} is entirely missing")
        values[c] = v
    rng = np.random.default_rng(spec.seed)
    imputed = {}
    for c in cont:
        v = values[c]
        if np.any(np.isnan(v)):
            if spec.imputation.get(c, "median") == "multiple" and len(cont) > 1:
                imputed[c] = _impute_multiple(values, c, spec.n_imputations, rng)
            else:
                imputed[c] = np.where(np.isnan(v), np.nanmedian(v), v)
        else:
            imputed[c] = v
    levels = {}
    cat_vals = {}
    for c in cat:
        raw_col = list(raw.columns[c])
        seen = [x for x in raw_col if not _is_missing(x)]
        if not seen:
            raise ValidationError(f"column {c!r} is entirely missing")
        uniq, counts = np.unique(np.array([str(x) for x in seen]), return_counts=True)
        mode = uniq[np.argmax(counts)]
        cat_vals[c] = np.array([mode if _is_missing(x) else str(x) for x in raw_col])
        levels[c] = list(uniq)

    keep = np.ones(t.size, dtype=bool)
    for c in cont:
        lo, hi = iqr_bounds(imputed[c], spec.iqr_multiplier)
        keep &= (imputed[c] >= lo) & (imputed[c] <= hi)
    if keep.sum() < t.size:
        notes.append(f"iqr removed {int(t.size - keep.sum())} rows")

    out_cols, out_names = [], []
    for c in cont:
        v = imputed[c][keep]
        sd = v.std()
        if sd == 0:
            warnings.warn(f"column {c!r} has zero variance; emitted as zeros", RuntimeWarning)
            notes.append(f"zero variance: {c}")
            z = np.zeros_like(v)
        else:
            z = np.clip((v - v.mean()) / sd, -spec.zscore_clip_sigma, spec.zscore_clip_sigma)
        out_cols.append(z)
        out_names.append(c)
    for c in cat:
        v = cat_vals[c][keep]
        for lev in levels[c]:
            out_cols.append((v == lev).astype(np.float64))
            out_names.append(f"{c}={lev}")
    X = np.column_stack(out_cols) if out_cols else np.empty((int(keep.sum()), 0))
    return CausalDataset(X, t[keep], y[keep], feature_names=tuple(out_names),
                         meta={"preprocess_notes": notes, "kept_rows": np.flatnonzero(keep).tolist()})


# --- synthetic data --------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian covariates, logistic propensity in [0.05, 0.95], smooth outcome surfaces.

    ``surface="smooth"``: tau(x) = effect + heterogeneity * (0.5*x0 + sin(x1)).
    ``surface="step"``:   tau(x) = effect + heterogeneity * 1[x0 > step_threshold].
    """

    n: int = 2000
    d: int = 10
    heterogeneity: float = 1.0
    confounding: float = 1.0
    noise_sigma: float = 1.0
    seed: int = 0
    effect: float = 2.0
    surface: Literal["smooth", "step"] = "smooth"
    step_threshold: float = 0.5

    def __post_init__(self):
        if self.n < 10 or self.d < 1:
            raise ValidationError(f"synthetic data needs n >= 10 and d >= 1, got n={self.n}, d={self.d}")
        if self.heterogeneity < 0 or self.confounding < 0 or self.noise_sigma < 0:
            raise ValidationError("heterogeneity, confounding and noise_sigma must be >= 0")
        if self.surface not in ("smooth", "step"):
            raise ValidationError(f"surface must be 'smooth' or 'step', got {self.surface!r}")


def _col(X, j):
    return X[:, j] if X.shape[1] > j else np.zeros(X.shape[0])


def synthetic_propensity(X: np.ndarray, confounding: float) -> np.ndarray:
    return 0.05 + 0.9 * expit(confounding * (_col(X, 0) - 0.5 * _col(X, 1)))


def synthetic_mu0(X: np.ndarray) -> np.ndarray:
    return 1.0 + _col(X, 0) + 0.5 * np.sin(np.pi * _col(X, 1) / 2) + 0.3 * _col(X, 2)


def synthetic_tau(X: np.ndarray, spec: SyntheticSpec) -> np.ndarray:
    if spec.surface == "step":
        return spec.effect + spec.heterogeneity * (_col(X, 0) > spec.step_threshold)
    return spec.effect + spec.heterogeneity * (0.5 * _col(X, 0) + np.sin(_col(X, 1)))


def analytic_ate(spec: SyntheticSpec) -> float:
    """Population ATE; x0, x1 are symmetric standard normals."""
    if spec.surface == "step":
        return spec.effect + spec.heterogeneity * float(1.0 - ndtr(spec.step_threshold))
    return spec.effect


def generate_synthetic(spec: SyntheticSpec) -> CausalDataset:
    rng = np.random.default_rng(spec.seed)
    X = rng.standard_normal((spec.n, spec.d))
    e = synthetic_propensity(X, spec.confounding)
    t = (rng.random(spec.n) < e).astype(np.int64)
    # keep both arms populated for tiny n
    if t.sum() == 0:
        t[np.argmax(e)] = 1
    elif t.sum() == spec.n:
        t[np.argmin(e)] = 0
    mu0 = synthetic_mu0(X)
    mu1 = mu0 + synthetic_tau(X, spec)
    noise = rng.standard_normal((2, spec.n)) * spec.noise_sigma
    y = np.where(t == 1, mu1, mu0) + noise[0]
    y_cf = np.where(t == 1, mu0, mu1) + noise[1]
    return CausalDataset(X, t, y, mu0, mu1, y_cf,
                         meta={"kind": "synthetic", "spec": spec.__dict__.copy(),
                               "ate": analytic_ate(spec), "propensity": e})


def generate_ihdp_like(seed: int, n: int = 747, n_treated: int = 139,
                       noise_sigma: float = 1.0, catt: float = 4.0) -> CausalDataset:
    """IHDP-shaped stand-in: 6 continuous + 19 binary covariates, ~19% treated,
    and the non-linear "response surface B" outcome model.

    Y(0) ~ N(exp((X + 0.5) b), 1), Y(1) ~ N(X b - w, 1), with b drawn from
    {0, .1, .2, .3, .4} (probabilities .6, .1, .1, .1, .1) and w set so that the
    average effect on the treated equals ``catt``.
    """
    rng = np.random.default_rng(10_000 + seed)
    n_cont, n_bin = 6, 19
    cov = 0.3 * np.ones((n_cont, n_cont)) + 0.7 * np.eye(n_cont)
    cont = rng.multivariate_normal(np.zeros(n_cont), cov, size=n)
    p_bin = rng.uniform(0.1, 0.9, n_bin)
    latent = 0.6 * cont[:, [0]] + rng.standard_normal((n, n_bin))
    binary = (ndtr(latent) < p_bin).astype(np.float64)
    X = np.column_stack([cont, binary])
    # selection: a non-random subset of the treated arm is kept, which leaves imbalance
    score = 0.8 * cont[:, 0] - 0.6 * cont[:, 1] + 0.5 * binary[:, 0] - 0.5 * binary[:, 3]
    score = score + rng.standard_normal(n) * 0.7
    t = np.zeros(n, dtype=np.int64)
    t[np.argsort(-score, kind="stable")[:n_treated]] = 1
    beta = rng.choice([0.0, 0.1, 0.2, 0.3, 0.4], size=X.shape[1], p=[0.6, 0.1, 0.1, 0.1, 0.1])
    mu0 = np.exp((X + 0.5) @ beta)
    lin = X @ beta
    omega = float(np.mean(lin[t == 1] - mu0[t == 1]) - catt)
    mu1 = lin - omega
    eps = rng.standard_normal((2, n)) * noise_sigma
    y = np.where(t == 1, mu1, mu0) + eps[0]
    y_cf = np.where(t == 1, mu0, mu1) + eps[1]
    return CausalDataset(X, t, y, mu0, mu1, y_cf,
                         feature_names=tuple(f"x{j + 1}" for j in range(X.shape[1])),
                         meta={"kind": "ihdp-surrogate", "replicate": seed})


def split_train_test(ds: CausalDataset, fraction: float, seed: int) -> tuple[CausalDataset, CausalDataset]:
    """Arm-stratified random split; ``fraction`` of each arm goes to train."""
    if not 0 < fraction < 1:
        raise ValidationError(f"fraction must be in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for arm in (0, 1):
        idx = np.flatnonzero(ds.treatment == arm)
        idx = idx[rng.permutation(idx.size)]
        k = int(round(fraction * idx.size))
        if k == 0 or k == idx.size:
            raise ValidationError(f"split fraction {fraction} empties treatment arm {arm} "
                                  f"({idx.size} rows)")
        train_idx.append(idx[:k])
        test_idx.append(idx[k:])
    tr = np.sort(np.concatenate(train_idx))
    te = np.sort(np.concatenate(test_idx))
    return ds.subset(tr), ds.subset(te)


def load_source(source: str, replicate: int, ihdp_dir: str | None = None) -> CausalDataset:
    """``ihdp`` resolves to real replicates under ``ihdp_dir`` (or $IHDP_DIR) when
    present, otherwise to the IHDP-shaped surrogate."""
    if source == "ihdp":
        root = ihdp_dir or os.environ.get("IHDP_DIR")
        if root and os.path.exists(ihdp_path(root, replicate)):
            return load_ihdp_csv(root, replicate)
        log.info("IHDP files not found; using surrogate replicate %d", replicate)
        return generate_ihdp_like(replicate)
    if source == "ihdp-surrogate":
        return generate_ihdp_like(replicate)
    if os.path.exists(source):
        return read_csv(source)
    raise ValidationError(f"unknown dataset source {source!r}")
