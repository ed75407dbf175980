"""EDMD Koopman estimation and a numerical error decomposition.

Conventions: a basis evaluated on M points gives a matrix ``Psi`` of shape
[M, N] (one row per sample). The fitted matrix ``A`` [N, N] satisfies
``A psi(x) ≈ psi(F(x))``, so an observable ``phi = c^T psi`` is advanced to
``c^T A psi``; its coefficient vector becomes ``A^T c``.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import astuple, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from worldprobe.seeding import derive_rng

PINV_RCOND = 1e-10


@dataclass(frozen=True)
class ObservableBasis:
    kind: str
    size: int
    fn: Callable = field(repr=False, compare=False)
    params: dict = field(default_factory=dict)

    def __call__(self, x) -> np.ndarray:
        out = np.asarray(self.fn(np.asarray(x, dtype=np.float64)), dtype=np.float64)
        if out.ndim != 2 or out.shape[1] != self.size:
            raise ValueError(f"basis {self.kind} produced shape {out.shape}, expected [M, {self.size}]")
        return out


def fourier_torus(m: int) -> ObservableBasis:
    """{1, √2 cos 2πkx, √2 sin 2πkx : k = 1..m}, orthonormal under the uniform measure."""
    if m < 0:
        raise ValueError("m must be >= 0")

    def fn(x):
        x = np.ravel(x)
        cols = [np.ones_like(x)]
        for k in range(1, m + 1):
            cols.append(math.sqrt(2.0) * np.cos(2 * np.pi * k * x))
            cols.append(math.sqrt(2.0) * np.sin(2 * np.pi * k * x))
        return np.stack(cols, axis=1)

    return ObservableBasis("fourier_torus", 2 * m + 1, fn, {"m": m})


def monomial(degree: int, dim: int = 1, include_constant: bool = False) -> ObservableBasis:
    """Per-coordinate powers x_j^p for p = 1..degree (optionally a leading constant)."""
    if degree < 1:
        raise ValueError("degree must be >= 1")

    def fn(x):
        x = x.reshape(len(x), -1) if x.ndim > 1 else x[:, None]
        if x.shape[1] != dim:
            raise ValueError(f"monomial basis built for dim={dim}, got {x.shape[1]}")
        cols = [x**p for p in range(1, degree + 1)]
        if include_constant:
            cols.insert(0, np.ones((len(x), 1)))
        return np.concatenate(cols, axis=1)

    size = degree * dim + int(include_constant)
    return ObservableBasis("monomial", size, fn, {"degree": degree, "dim": dim, "constant": include_constant})


def activation_features(feature_map: Callable, size: int) -> ObservableBasis:
    """Use an activation map z(e) as the dictionary, psi_i = z_i."""
    return ObservableBasis("activation_features", size, feature_map, {})


@dataclass
class KoopmanEstimate:
    basis: ObservableBasis
    A: np.ndarray
    M: int
    K: int = 1
    rank: int = 0

    def advance(self, coeffs, K: int | None = None) -> np.ndarray:
        return k_step(self, coeffs, self.K if K is None else K)


def _gram_solve(Psi_X: np.ndarray, rhs: np.ndarray, rcond: float):
    """Return pinv(Psi_X^T Psi_X / M) @ rhs and the numerical rank."""
    M = Psi_X.shape[0]
    G = Psi_X.T @ Psi_X / M
    s = np.linalg.svd(G, compute_uv=False)
    rank = int(np.count_nonzero(s > rcond * (s[0] if s.size and s[0] > 0 else 1.0)))
    if rank < G.shape[0]:
        warnings.warn(
            f"Gram matrix is rank deficient (rank {rank} < {G.shape[0]}); "
            "using the minimum-norm pseudoinverse solution",
            RuntimeWarning,
            stacklevel=3,
        )
    return np.linalg.pinv(G, rcond=rcond, hermitian=True) @ rhs, rank


def edmd_fit(X, Y, basis: ObservableBasis, K: int = 1, rcond: float = PINV_RCOND,
             Psi_Y: np.ndarray | None = None) -> KoopmanEstimate:
    """Least-squares A minimising ||A Psi(X) - Psi(Y)||_F over paired samples Y_i = F^K(X_i).

    ``Psi_Y`` may be passed directly, e.g. for noisy measurements of the
    successor observables.
    """
    Psi_X = basis(X)
    if Psi_Y is None:
        Psi_Y = basis(Y)
    if Psi_X.shape != Psi_Y.shape or Psi_X.shape[0] < 1:
        raise ValueError(f"need M >= 1 paired samples, got {Psi_X.shape} and {Psi_Y.shape}")
    M = Psi_X.shape[0]
    # A^T = pinv(G) (Psi_X^T Psi_Y / M), i.e. A = Psi_Y^T Psi_X pinv(Psi_X^T Psi_X).
    At, rank = _gram_solve(Psi_X, Psi_X.T @ Psi_Y / M, rcond)
    return KoopmanEstimate(basis, At.T.copy(), M, K, rank)


def k_step(estimate: KoopmanEstimate, g_coeffs, K: int) -> np.ndarray:
    """Coefficients of the observable advanced by K applications of the estimate."""
    if K < 0:
        raise ValueError(f"K must be >= 0, got {K}")
    c = np.asarray(g_coeffs, dtype=np.float64)
    return np.linalg.matrix_power(estimate.A, K).T @ c


def project(g_values, basis: ObservableBasis, samples, rcond: float = PINV_RCOND) -> np.ndarray:
    """Empirical L² projection of sampled g onto span(basis)."""
    Psi = basis(samples)
    g = np.asarray(g_values, dtype=np.float64).ravel()
    if g.shape[0] != Psi.shape[0]:
        raise ValueError("g_values and samples must have the same length")
    coeffs, _ = _gram_solve(Psi, Psi.T @ g / len(g), rcond)
    return coeffs


# ---- systems with analytically known Koopman action ----------------------


@dataclass(frozen=True)
class TorusRotation:
    """x -> (x + alpha) mod 1; unitary Koopman operator under the uniform measure."""

    alpha: float = math.sqrt(2.0) - 1.0
    name = "torus_rotation"
    operator_norm = 1.0

    def step(self, x, K: int = 1):
        return np.mod(np.asarray(x, dtype=np.float64) + K * self.alpha, 1.0)

    def trajectory(self, n: int, x0: float) -> np.ndarray:
        return np.mod(x0 + self.alpha * np.arange(n, dtype=np.float64), 1.0)

    def training_pairs(self, M: int, rng) -> tuple[np.ndarray, np.ndarray]:
        x = self.trajectory(M + 1, rng.uniform())
        return x[:-1], x[1:]

    def reference(self, L: int, rng) -> np.ndarray:
        return self.trajectory(L, rng.uniform())

    def default_basis(self, N: int) -> ObservableBasis:
        if N < 1 or N % 2 == 0:
            raise ValueError(f"fourier basis size must be odd (2m+1), got {N}")
        return fourier_torus((N - 1) // 2)


@dataclass(frozen=True)
class LinearContraction:
    """x -> rho x. Norms are taken under the standard normal reference measure,
    for which ||K|| = rho^(-1/2)."""

    rho: float = 0.9
    name = "linear_contraction"

    @property
    def operator_norm(self) -> float:
        return self.rho**-0.5

    def step(self, x, K: int = 1):
        return self.rho**K * np.asarray(x, dtype=np.float64)

    def training_pairs(self, M: int, rng):
        x = rng.normal(size=M)
        return x, self.step(x)

    def reference(self, L: int, rng) -> np.ndarray:
        return rng.normal(size=L)

    def default_basis(self, N: int) -> ObservableBasis:
        return monomial(N)


SYSTEMS = {"torus_rotation": TorusRotation, "linear_contraction": LinearContraction}


@dataclass
class DecompositionRow:
    N: int
    M: int
    K: int
    term1: float
    term2: float
    term3: float
    total: float

    @property
    def bound(self) -> float:
        return self.term1 + self.term2 + self.term3


def _rms(v: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(v))))


def decompose_cell(system, g: Callable, basis: ObservableBasis, M: int, K: int, rng,
                   obs_noise: float = 0.0, heldout_factor: int = 10,
                   min_heldout: int = 10_000) -> DecompositionRow:
    """Three error terms for one (basis, M) cell, measured on a held-out sample.

    term1  estimation on F_N:     ||(Â^K - A_N^K) Π g||
    term2  finite-basis error:    ||(K_N^K - K^K) Π g||
    term3  projection truncation: ||K||^K ||(I - Π) g||
    total                         ||Â^K Π g - K^K g||
    """
    if not hasattr(system, "step") or not hasattr(system, "operator_norm"):
        raise ValueError("error decomposition needs a system with a known Koopman action")
    X, Y = system.training_pairs(M, rng)
    Psi_Y = basis(Y)
    if obs_noise > 0:
        Psi_Y = Psi_Y + obs_noise * rng.normal(size=Psi_Y.shape)
    est = edmd_fit(X, Y, basis, Psi_Y=Psi_Y)

    x_ref = system.reference(max(heldout_factor * M, min_heldout), rng)
    y_ref = system.step(x_ref, K)
    Psi_ref = basis(x_ref)
    A_N = edmd_fit(x_ref, system.step(x_ref, 1), basis).A  # projected operator on the reference measure
    c = project(g(x_ref), basis, x_ref)

    c_hat = np.linalg.matrix_power(est.A, K).T @ c
    c_N = np.linalg.matrix_power(A_N, K).T @ c
    Psi_y = basis(y_ref)
    g_y = g(y_ref)
    term1 = _rms(Psi_ref @ (c_hat - c_N))
    term2 = _rms(Psi_ref @ c_N - Psi_y @ c)
    if isinstance(system, TorusRotation):
        # Invariant measure: ||(I-Π)g|| is measured on the propagated sample.
        residual = _rms(g_y - Psi_y @ c)
    else:
        residual = _rms(g(x_ref) - Psi_ref @ c)
    term3 = system.operator_norm**K * residual
    total = _rms(Psi_ref @ c_hat - g_y)
    return DecompositionRow(basis.size, M, K, term1, term2, term3, total)


def error_decomposition(system, N_list: Sequence[int], M_list: Sequence[int], g: Callable,
                        K: int = 1, seed: int = 0, obs_noise: float = 0.0,
                        basis_factory: Callable | None = None, heldout_factor: int = 10,
                        repeats: int = 1) -> list[DecompositionRow]:
    """Sweep (N, M); each cell's randomness derives from (seed, N, M, repeat).

    With ``repeats > 1`` the terms are averaged over independent draws.
    """
    if not isinstance(system, (TorusRotation, LinearContraction)):
        raise ValueError(
            f"no analytic Koopman action for {type(system).__name__}; cannot compute truth terms"
        )
    factory = basis_factory or system.default_basis
    rows = []
    for N in N_list:
        basis = factory(N)
        for M in M_list:
            cells = [
                decompose_cell(system, g, basis, M, K, derive_rng(seed, "koopman.cell", N, M, r),
                               obs_noise, heldout_factor)
                for r in range(repeats)
            ]
            mean = np.mean([astuple(c)[3:] for c in cells], axis=0)
            rows.append(DecompositionRow(basis.size, M, K, *map(float, mean)))
    return rows


CSV_HEADER = ("N", "M", "K", "term1", "term2", "term3", "total")


def write_sweep_csv(rows: Sequence[DecompositionRow], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([r.N, r.M, r.K] + [f"{v:.12e}" for v in (r.term1, r.term2, r.term3, r.total)])
    return path


def plot_sweep_svg(rows: Sequence[DecompositionRow], path: str | Path) -> Path:
    from worldprobe.plotting import new_figure, save_svg

    fig, ax = new_figure()
    for N in sorted({r.N for r in rows}):
        sub = sorted((r for r in rows if r.N == N), key=lambda r: r.M)
        Ms = [r.M for r in sub]
        for name, style in (("term1", "o-"), ("term3", "s--"), ("total", "^:")):
            vals = [max(getattr(r, name), 1e-300) for r in sub]
            ax.loglog(Ms, vals, style, label=f"{name} (N={N})")
    ax.set_xlabel("M (samples)")
    ax.set_ylabel("L² error")
    ax.legend(fontsize=7)
    return save_svg(fig, path)
