"""Descriptive analyses: temporal coherence, Allan variance, layer x K grids, pooling linearity."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from worldprobe.dataset import TrajectoryDataset

K_DEFAULT = (1, 3, 10, 30)
ACTIVATION_MODES = ("activations", "joint")


# ---- temporal coherence ------------------------------------------------------


@dataclass
class CoherenceCurve:
    dataset: str
    K: list
    mean: list
    std: list
    skipped: list  # zero-norm pairs dropped per K


def _cosine_rows(a: np.ndarray, b: np.ndarray):
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na > 0) & (nb > 0)
    cos = np.einsum("ij,ij->i", a[ok], b[ok]) / (na[ok] * nb[ok])
    return np.clip(cos, -1.0, 1.0), int((~ok).sum())


def temporal_coherence(dataset: TrajectoryDataset, K_list: Sequence[int] = K_DEFAULT) -> CoherenceCurve:
    """cos(e_t, e_{t+K}) averaged within each episode, then across episodes."""
    means, stds, skipped = [], [], []
    pooled = [ep.pooled() for ep in dataset.episodes]
    for K in K_list:
        per_episode, n_skip = [], 0
        for e in pooled:
            if len(e) <= K:
                continue
            cos, s = _cosine_rows(e[:-K], e[K:])
            n_skip += s
            if cos.size:
                per_episode.append(cos.mean())
        skipped.append(n_skip)
        if per_episode:
            means.append(float(np.mean(per_episode)))
            stds.append(float(np.std(per_episode, ddof=1)) if len(per_episode) > 1 else 0.0)
        else:
            means.append(float("nan"))
            stds.append(float("nan"))
    return CoherenceCurve(dataset.name, list(K_list), means, stds, skipped)


# ---- Allan variance ----------------------------------------------------------


def default_taus(n: int) -> np.ndarray:
    """Powers of two up to n/4."""
    taus = []
    tau = 1
    while tau <= n / 4:
        taus.append(tau)
        tau *= 2
    return np.array(taus, dtype=np.int64)


def allan_variance(series, taus: Iterable[int] | None = None):
    """Overlapping Allan variance of cluster averages.

    Returns ``(taus, avar)``. For a 2-D input ([n, dims]) ``avar`` is [len(taus), dims].
    """
    y = np.asarray(series, dtype=np.float64)
    squeeze = y.ndim == 1
    if squeeze:
        y = y[:, None]
    n = y.shape[0]
    taus = default_taus(n) if taus is None else np.asarray(list(taus), dtype=np.int64)
    if taus.size == 0:
        raise ValueError(f"series of length {n} is too short for any cluster size")
    if np.any(taus < 1) or np.any(np.diff(taus) <= 0):
        raise ValueError("cluster sizes must be positive and strictly increasing")
    if taus.max() > n / 2:
        raise ValueError(f"cluster size {taus.max()} exceeds n/2 = {n / 2}")
    if n < 4 * taus.min():
        raise ValueError(f"need n >= 4 * min(tau), got n={n}, tau={taus.min()}")
    # Allan variance ignores constant offsets; centring keeps the running sum small.
    y = y - y.mean(axis=0)
    phase = np.concatenate([np.zeros((1, y.shape[1])), np.cumsum(y, axis=0)])
    out = np.empty((taus.size, y.shape[1]))
    for i, m in enumerate(taus):
        # Mean over [k, k+m) is (phase[k+m] - phase[k]) / m.
        d2 = phase[2 * m :] - 2.0 * phase[m:-m] + phase[: -2 * m]
        out[i] = (d2**2).mean(axis=0) / (2.0 * m * m)
    return taus, (out[:, 0] if squeeze else out)


def allan_deviation(series, taus=None):
    taus, avar = allan_variance(series, taus)
    return taus, np.sqrt(avar)


def loglog_slope(taus, adev, min_tau: float = 0.0, max_tau: float | None = None) -> float:
    """Least-squares slope of log ADEV against log τ over ``min_tau <= τ <= max_tau``."""
    taus = np.asarray(taus, dtype=np.float64)
    adev = np.asarray(adev, dtype=np.float64)
    sel = (taus >= min_tau) & (taus <= (max_tau if max_tau is not None else taus.max()))
    sel &= adev > 0
    return float(np.polyfit(np.log10(taus[sel]), np.log10(adev[sel]), 1)[0])


@dataclass
class AllanReport:
    K: int
    taus: list
    adev: list  # RMS across dimensions, per tau
    rms_total: float
    rms_noise: float

    @property
    def signal_fraction(self) -> float:
        if self.rms_total == 0:
            return float("nan")
        return float(min(1.0, max(0.0, 1.0 - self.rms_noise / self.rms_total)))


def transition_noise_profile(dataset: TrajectoryDataset, K_list: Sequence[int] = K_DEFAULT) -> list[AllanReport]:
    """RMS of transition components vs the white-noise floor from the smallest-τ Allan deviation.

    Allan variances are computed per episode and per dimension, averaged over
    episodes with weights equal to their term counts, then aggregated by RMS
    across dimensions.
    """
    reports = []
    pooled = [ep.pooled() for ep in dataset.episodes]
    for K in K_list:
        deltas = [e[K:] - e[:-K] for e in pooled if len(e) > K]
        if not deltas:
            raise ValueError(f"no transitions at K={K}")
        all_d = np.concatenate(deltas)
        rms_total = float(np.sqrt(np.mean(all_d**2)))
        if rms_total == 0:
            raise ValueError(f"all transitions are zero at K={K}; the noise profile is degenerate")
        shortest = min(len(d) for d in deltas)
        taus = default_taus(shortest)
        if taus.size == 0:
            raise ValueError(f"episodes too short for Allan analysis at K={K}")
        acc = np.zeros((taus.size, all_d.shape[1]))
        weights = np.zeros(taus.size)
        for d in deltas:
            _, avar = allan_variance(d, taus)
            w = np.array([len(d) - 2 * m + 1 for m in taus], dtype=np.float64)
            acc += avar * w[:, None]
            weights += w
        avar = acc / weights[:, None]
        adev = np.sqrt(avar.mean(axis=1))
        reports.append(AllanReport(int(K), taus.tolist(), adev.tolist(), rms_total, float(adev[0])))
    return reports


# ---- layer x K grid ------------------------------------------------------------


@dataclass
class LayerKGrid:
    dataset: str
    layers: list
    Ks: list
    values: np.ndarray  # [layers, Ks], NaN where no result
    sources: dict = field(default_factory=dict)  # (layer, K) -> probe type of the max

    def cell(self, layer: int, K: int) -> float:
        return float(self.values[self.layers.index(layer), self.Ks.index(K)])


def layer_k_grid(results: Sequence, dataset: str | None = None) -> LayerKGrid:
    """Best test R² per (layer, K) over probe kinds and activation-containing modes."""
    rows = [r for r in results if r.mode in ACTIVATION_MODES and r.layer is not None]
    if dataset is not None:
        rows = [r for r in rows if r.dataset == dataset]
    if not rows:
        raise ValueError("no activation-mode probe results to grid")
    layers = sorted({r.layer for r in rows})
    Ks = sorted({r.K for r in rows})
    values = np.full((len(layers), len(Ks)), np.nan)
    sources = {}
    for r in rows:
        i, j = layers.index(r.layer), Ks.index(r.K)
        if np.isnan(values[i, j]) or r.test_r2 > values[i, j]:
            values[i, j] = r.test_r2
            sources[(r.layer, r.K)] = r.probe_type
    name = dataset if dataset is not None else ",".join(sorted({r.dataset for r in rows}))
    return LayerKGrid(name, layers, Ks, values, sources)


def write_grid_csv(grid: LayerKGrid, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "layer", "K", "best_test_r2", "probe_type"])
        for i, layer in enumerate(grid.layers):
            for j, K in enumerate(grid.Ks):
                v = grid.values[i, j]
                if not np.isnan(v):
                    w.writerow([grid.dataset, layer, K, f"{v:.6f}", grid.sources[(layer, K)]])
    return path


def plot_grid_svg(grid: LayerKGrid, path) -> Path:
    from worldprobe.plotting import new_figure, save_svg

    fig, ax = new_figure()
    im = ax.imshow(grid.values, origin="lower", aspect="auto", interpolation="bilinear", cmap="viridis")
    ax.set_xticks(range(len(grid.Ks)), [str(k) for k in grid.Ks])
    ax.set_yticks(range(len(grid.layers)), [str(l) for l in grid.layers])
    ax.set_xlabel("K")
    ax.set_ylabel("layer")
    ax.set_title(f"test R² ({grid.dataset})")
    fig.colorbar(im, ax=ax)
    return save_svg(fig, path)


# ---- pooling linearity -----------------------------------------------------------


@dataclass
class LinearityResult:
    applicable: bool
    max_discrepancy: float = float("nan")
    reason: str = ""


def patch_linearity_check(dataset: TrajectoryDataset, K: int, projection=None) -> LinearityResult:
    """max |Δ(pooled e) - mean_i(p_{t+K,i} - p_{t,i})| over all valid (episode, t).

    ``projection`` ([m, d], no bias) is applied to every patch first.
    """
    if dataset.patch_count < 2:
        return LinearityResult(False, reason="pre-pooled data (patch_count = 1)")
    W = None if projection is None else np.asarray(projection, dtype=np.float64)
    worst = 0.0
    for ep in dataset.episodes:
        if ep.length <= K:
            continue
        p = ep.patches.astype(np.float64)
        if W is not None:
            p = p @ W.T
        pooled = p.mean(axis=1)
        lhs = pooled[K:] - pooled[:-K]
        rhs = (p[K:] - p[:-K]).mean(axis=1)
        worst = max(worst, float(np.abs(lhs - rhs).max()))
    return LinearityResult(True, worst)


# ---- plots ------------------------------------------------------------------------


def plot_coherence_svg(curves: Sequence[CoherenceCurve], path) -> Path:
    from worldprobe.plotting import new_figure, save_svg

    fig, ax = new_figure()
    for c in curves:
        ax.errorbar(c.K, c.mean, yerr=c.std, marker="o", label=c.dataset, capsize=3)
    ax.set_xscale("log")
    ax.set_xlabel("K")
    ax.set_ylabel("cosine(e_t, e_{t+K})")
    ax.legend(fontsize=7)
    return save_svg(fig, path)


def plot_allan_svg(reports: Sequence[AllanReport], path) -> Path:
    from worldprobe.plotting import new_figure, save_svg

    fig, ax = new_figure()
    for r in reports:
        ax.loglog(r.taus, r.adev, marker="o", label=f"K={r.K}")
    ax.set_xlabel("cluster size τ")
    ax.set_ylabel("Allan deviation (RMS over dims)")
    ax.legend(fontsize=7)
    return save_svg(fig, path)
