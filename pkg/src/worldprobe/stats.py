"""R², moving-block bootstrap, permutation tests and probe comparisons."""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats as sps

from worldprobe.seeding import derive_rng

LEVELS = (90, 95, 99)

# Recorded in every serialized report so readers know these are toolkit choices.
METHOD_NOTES = {
    "r2": "variance-weighted multi-output R²",
    "one_way_test": "normal-approximation z-test on bootstrap standard errors",
    "overall_p": "Fisher's method (chi-square with 2k degrees of freedom)",
    "bootstrap": "moving-block bootstrap, b = max(2, floor(n^(1/3))), Bessel-corrected SE",
}


def r2_score(y, y_hat, multioutput: str = "variance_weighted", allow_nan: bool = True) -> float:
    """Coefficient of determination for [n, d] targets.

    ``variance_weighted`` pools squared errors over all cells before dividing
    by the pooled squared deviation from per-dimension means.
    """
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y_hat.ndim == 1:
        y_hat = y_hat[:, None]
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {y_hat.shape}")
    if y.shape[0] < 2:
        raise ValueError("r2_score needs at least 2 rows")
    sse = ((y - y_hat) ** 2).sum(axis=0)
    sst = ((y - y.mean(axis=0)) ** 2).sum(axis=0)
    if multioutput == "variance_weighted":
        total = sst.sum()
        if total == 0:
            return _undefined(allow_nan)
        return float(1.0 - sse.sum() / total)
    if multioutput == "uniform_average":
        if np.any(sst == 0):
            return _undefined(allow_nan)
        return float(np.mean(1.0 - sse / sst))
    raise ValueError(f"unknown multioutput {multioutput!r}")


def _undefined(allow_nan: bool) -> float:
    msg = "R² undefined: targets have zero total variance"
    if not allow_nan:
        raise ValueError(msg)
    warnings.warn(msg, RuntimeWarning, stacklevel=3)
    return float("nan")


def _r2_batch(Y: np.ndarray, Yh: np.ndarray) -> np.ndarray:
    """Variance-weighted R² for a stack of resamples, shapes [R, n, d]."""
    sse = ((Y - Yh) ** 2).sum(axis=(1, 2))
    sst = ((Y - Y.mean(axis=1, keepdims=True)) ** 2).sum(axis=(1, 2))
    with np.errstate(divide="ignore", invalid="ignore"):
        return 1.0 - sse / sst


def block_length(n: int) -> int:
    """max(2, floor(n^(1/3))) using an exact integer cube root."""
    if n < 1:
        raise ValueError("n must be positive")
    root = int(round(n ** (1.0 / 3.0)))
    while root**3 > n:
        root -= 1
    while (root + 1) ** 3 <= n:
        root += 1
    return max(2, root)


def z_value(level: float) -> float:
    return float(sps.norm.ppf(0.5 + level / 200.0))


@dataclass
class StatReport:
    r2: float
    se: float
    ci: dict
    n: int
    n_reps: int
    block_length: int
    seed: int
    p_value: float | None = None
    n_permutations: int | None = None
    replicates: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("replicates")
        out["ci"] = {str(k): [float(v[0]), float(v[1])] for k, v in self.ci.items()}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "StatReport":
        data = dict(data)
        data["ci"] = {int(k): tuple(v) for k, v in data["ci"].items()}
        return cls(**data)


def block_bootstrap_indices(n: int, b: int, n_reps: int, seed: int) -> np.ndarray:
    """Moving-block resample index matrix [n_reps, n]; replicate i uses its own stream."""
    n_blocks = -(-n // b)
    starts_max = n - b + 1
    offsets = np.arange(b)
    idx = np.empty((n_reps, n), dtype=np.int64)
    for i in range(n_reps):
        rng = derive_rng(seed, "stats.bootstrap", i)
        starts = rng.integers(0, starts_max, size=n_blocks)
        idx[i] = (starts[:, None] + offsets[None, :]).ravel()[:n]
    return idx


def block_bootstrap(
    y, y_hat, n_reps: int = 400, levels: Sequence[float] = LEVELS, seed: int = 0,
) -> StatReport:
    """Moving-block bootstrap standard error and normal CIs for R²."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.ndim == 1:
        y, y_hat = y[:, None], y_hat[:, None]
    n = y.shape[0]
    if n < 4:
        raise ValueError(f"block bootstrap needs n >= 4, got {n}")
    b = block_length(n)
    if n < b:
        raise ValueError(f"n={n} is shorter than the block length {b}")
    point = r2_score(y, y_hat)
    idx = block_bootstrap_indices(n, b, n_reps, seed)
    reps = np.empty(n_reps)
    chunk = max(1, 2_000_000 // max(1, n * y.shape[1]))
    for lo in range(0, n_reps, chunk):
        sel = idx[lo : lo + chunk]
        reps[lo : lo + chunk] = _r2_batch(y[sel], y_hat[sel])
    se = float(np.std(reps, ddof=1)) if n_reps > 1 else 0.0
    ci = {lvl: (point - z_value(lvl) * se, point + z_value(lvl) * se) for lvl in levels}
    return StatReport(point, se, ci, n, n_reps, b, seed, replicates=reps)


@dataclass
class PermutationResult:
    p_value: float
    observed: float
    null_r2: np.ndarray
    n_permutations: int


def permutation_p_value(observed: float, null: Sequence[float]) -> float:
    """Add-one p-value: (1 + #{null >= observed}) / (1 + n)."""
    null = np.asarray(null, dtype=np.float64)
    return float((1 + np.count_nonzero(null >= observed)) / (1 + null.size))


def permutation_test(
    train,
    test,
    fit: Callable,
    n_perm: int = 100,
    seed: int = 0,
    threads: int = 1,
) -> PermutationResult:
    """Shuffle training targets, refit with fixed hyperparameters, score on test.

    ``fit(train) -> predictor`` where ``predictor(X) -> Ŷ``; ``train`` and
    ``test`` are TransitionSets (anything with ``X``, ``Y`` and
    ``with_targets``). Test targets are never touched.
    """
    if n_perm < 1:
        raise ValueError("n_perm must be >= 1")

    def score(ts):
        model = fit(ts)
        return r2_score(test.Y, model(test.X))

    observed = score(train)

    def one(i):
        perm = derive_rng(seed, "stats.permutation", i).permutation(len(train.Y))
        return score(train.with_targets(train.Y[perm]))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            null = np.array(list(pool.map(one, range(n_perm))))
    else:
        null = np.array([one(i) for i in range(n_perm)])
    return PermutationResult(permutation_p_value(observed, null), observed, null, n_perm)


def ci_overlap(a: tuple, b: tuple) -> bool:
    return not (a[1] < b[0] or b[1] < a[0])


@dataclass
class OneWayResult:
    z: float
    p_one_sided: float
    significant: dict  # level -> bool (p below 1 - level/100)
    ci_overlap: dict  # level -> bool
    method: str = METHOD_NOTES["one_way_test"]


def compare_one_way(adv: StatReport, base: StatReport, levels: Sequence[float] = LEVELS) -> OneWayResult:
    """One-sided test of R²_adv > R²_base from bootstrap SEs."""
    denom = math.sqrt(adv.se**2 + base.se**2)
    if denom == 0:
        raise ValueError("both standard errors are zero; the z statistic is undefined")
    z = (adv.r2 - base.r2) / denom
    p = float(sps.norm.sf(z))
    sig = {lvl: p < 1.0 - lvl / 100.0 for lvl in levels}
    overlap = {}
    for lvl in levels:
        zl = z_value(lvl)
        a = adv.ci.get(lvl, (adv.r2 - zl * adv.se, adv.r2 + zl * adv.se))
        b = base.ci.get(lvl, (base.r2 - zl * base.se, base.r2 + zl * base.se))
        overlap[lvl] = ci_overlap(a, b)
    return OneWayResult(float(z), p, sig, overlap)


@dataclass
class TwoSidedResult:
    per_level: dict  # level -> "mlp_wins" | "tie" | "linear_wins"
    absolute: str


def compare_two_sided(linear: StatReport, mlp: StatReport, levels: Sequence[float] = LEVELS) -> TwoSidedResult:
    per_level = {}
    for lvl in levels:
        zl = z_value(lvl)
        lin_ci = (linear.r2 - zl * linear.se, linear.r2 + zl * linear.se)
        mlp_ci = (mlp.r2 - zl * mlp.se, mlp.r2 + zl * mlp.se)
        if ci_overlap(lin_ci, mlp_ci):
            per_level[lvl] = "tie"
        else:
            per_level[lvl] = "linear_wins" if linear.r2 > mlp.r2 else "mlp_wins"
    if linear.r2 > mlp.r2:
        absolute = "linear_wins"
    elif mlp.r2 > linear.r2:
        absolute = "mlp_wins"
    else:
        absolute = "tie"
    return TwoSidedResult(per_level, absolute)


@dataclass
class CombinedP:
    p_value: float
    statistic: float
    k: int
    all_significant_bound: float  # (max p)^k
    method: str = METHOD_NOTES["overall_p"]


def aggregate_overall_p(p_values: Sequence[float]) -> CombinedP:
    p = np.asarray(list(p_values), dtype=np.float64)
    if p.size == 0:
        raise ValueError("no p-values to combine")
    if np.any((p <= 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise ValueError("p-values must lie in (0, 1]")
    stat = float(-2.0 * np.log(p).sum())
    combined = float(sps.chi2.sf(stat, 2 * p.size))
    return CombinedP(min(1.0, combined), stat, int(p.size), float(p.max() ** p.size))
