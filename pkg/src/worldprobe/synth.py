"""Synthetic closed-loop systems with known dynamics.

Three kinds are supported:

``noisy_drift``
    Latent ``s_{t+1} = s_t + drift_scale * v(s_t) + proc_noise * xi``, where
    ``v(s) = (-kappa I + rotation S) s + nonlinearity * sin(W s + phi)`` with
    ``S`` skew symmetric and unit spectral norm. Patches are noisy views of ``s_t`` around fixed per-patch offsets.
``torus_rotation``
    Scalar ``x_{t+1} = (x_t + alpha) mod 1``; the clean embedding is
    ``(cos 2 pi x, sin 2 pi x)``.
``linear_contraction``
    ``s_{t+1} = rho * s_t``.

Activations at every layer are ``tanh(R z_t) + act_noise * xi`` (or ``R z_t``
with ``act_map="linear"``) where ``z_t`` is the clean embedding. With
``informative=False`` they are pure Gaussian noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from worldprobe.dataset import (
    Episode,
    SplitSpec,
    TrajectoryDataset,
    load_dataset,
    split_sizes,
    write_dataset,
)
from worldprobe.seeding import derive_rng

KINDS = ("noisy_drift", "torus_rotation", "linear_contraction")


@dataclass(frozen=True)
class SynthSystemSpec:
    kind: str = "noisy_drift"
    state_dim: int = 16
    activation_dim: int = 64
    patch_count: int = 4
    drift_scale: float = 0.05
    obs_noise: float = 1.0
    act_noise: float = 0.05
    informative: bool = True
    seed: int = 0
    layers: tuple[int, ...] = (15,)
    proc_noise: float = 0.05
    kappa: float = 0.05
    rotation: float = 1.0
    nonlinearity: float = 0.5
    act_map: str = "tanh"
    act_gain: float = 1.0
    alpha: float = math.sqrt(2.0) - 1.0
    rho: float = 0.9
    x0: float | None = None
    name: str = "synthetic"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        for attr in ("state_dim", "activation_dim", "patch_count"):
            if int(getattr(self, attr)) < 1:
                raise ValueError(f"{attr} must be a positive integer")
        for attr in ("obs_noise", "act_noise", "proc_noise"):
            if getattr(self, attr) < 0:
                raise ValueError(f"{attr} must be >= 0, got {getattr(self, attr)}")
        if self.act_map not in ("tanh", "linear"):
            raise ValueError(f"act_map must be 'tanh' or 'linear', got {self.act_map!r}")
        if self.kind == "linear_contraction" and not 0 < self.rho < 1:
            raise ValueError("linear_contraction needs 0 < rho < 1")
        if not self.layers:
            raise ValueError("at least one layer is required")
        object.__setattr__(self, "layers", tuple(int(x) for x in self.layers))

    @property
    def embed_dim(self) -> int:
        return 2 if self.kind == "torus_rotation" else int(self.state_dim)

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSystemSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown synth spec keys: {sorted(unknown)}")
        data = dict(data)
        if "layers" in data:
            data["layers"] = tuple(data["layers"])
        return cls(**data)

    @classmethod
    def from_json(cls, path: str | Path) -> "SynthSystemSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["layers"] = list(self.layers)
        return out


@dataclass(frozen=True)
class _Params:
    """System parameters drawn once from the master seed."""

    drift_lin: np.ndarray | None = None
    sin_W: np.ndarray | None = None
    sin_phi: np.ndarray | None = None
    patch_offsets: np.ndarray | None = None
    readouts: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SimulatedEpisode:
    latent: np.ndarray  # [T, state_dim] (torus: [T, 1])
    clean: np.ndarray  # clean pooled embedding [T, d]
    patches: np.ndarray  # [T, N, d]
    activations: dict  # layer -> [T, A]


def _draw_params(spec: SynthSystemSpec) -> _Params:
    rng = derive_rng(spec.seed, "synth.params")
    d, A = spec.embed_dim, spec.activation_dim
    drift_lin = sin_W = sin_phi = None
    if spec.kind == "noisy_drift":
        G = rng.normal(size=(d, d))
        skew = G - G.T
        if d > 1:
            skew /= np.linalg.norm(skew, 2)
        drift_lin = -spec.kappa * np.eye(d) + spec.rotation * skew
        sin_W = rng.normal(size=(d, d)) / math.sqrt(d)
        sin_phi = rng.uniform(0.0, 2.0 * math.pi, size=d)
    patch_offsets = 0.5 * rng.normal(size=(spec.patch_count, d))
    if spec.patch_count == 1:
        patch_offsets[:] = 0.0
    readouts = {
        layer: spec.act_gain * rng.normal(size=(A, d)) / math.sqrt(d) for layer in spec.layers
    }
    return _Params(drift_lin, sin_W, sin_phi, patch_offsets, readouts)


def _drift(spec: SynthSystemSpec, p: _Params, s: np.ndarray) -> np.ndarray:
    return p.drift_lin @ s + spec.nonlinearity * np.sin(p.sin_W @ s + p.sin_phi)


def _stationary_std(spec: SynthSystemSpec) -> float:
    rate = spec.drift_scale * spec.kappa
    if rate <= 0 or rate >= 1:
        return 1.0
    return max(spec.proc_noise / math.sqrt(2.0 * rate), 1e-12) if spec.proc_noise > 0 else 1.0


def _simulate_latent(spec: SynthSystemSpec, p: _Params, T: int, ep: int):
    rng = derive_rng(spec.seed, "synth.latent", ep)
    if spec.kind == "torus_rotation":
        x0 = spec.x0 if spec.x0 is not None else rng.uniform()
        # Exact modular accumulation: x_t = (x0 + t*alpha) mod 1.
        x = np.mod(x0 + spec.alpha * np.arange(T, dtype=np.float64), 1.0)
        clean = np.stack([np.cos(2 * np.pi * x), np.sin(2 * np.pi * x)], axis=1)
        return x[:, None], clean
    d = spec.embed_dim
    s = np.empty((T, d))
    if spec.kind == "linear_contraction":
        s[0] = rng.normal(size=d) if spec.x0 is None else spec.x0
        for t in range(1, T):
            s[t] = spec.rho * s[t - 1]
        return s, s.copy()
    s[0] = rng.normal(size=d) * _stationary_std(spec)
    noise = rng.normal(size=(T, d)) * spec.proc_noise
    for t in range(1, T):
        s[t] = s[t - 1] + spec.drift_scale * _drift(spec, p, s[t - 1]) + noise[t]
    return s, s.copy()


def simulate(spec: SynthSystemSpec, episodes: int, T: int) -> list[SimulatedEpisode]:
    """Simulate in memory, keeping the latent state next to the observed streams."""
    if episodes < 1 or T < 2:
        raise ValueError(f"need episodes >= 1 and T >= 2, got {episodes}, {T}")
    p = _draw_params(spec)
    out = []
    for ep in range(episodes):
        latent, clean = _simulate_latent(spec, p, T, ep)
        obs_rng = derive_rng(spec.seed, "synth.patches", ep)
        patches = clean[:, None, :] + p.patch_offsets[None, :, :]
        patches = patches + spec.obs_noise * obs_rng.normal(size=patches.shape)
        acts = {}
        for layer in spec.layers:
            act_rng = derive_rng(spec.seed, "synth.activations", ep, layer)
            if spec.informative:
                z = clean @ p.readouts[layer].T
                if spec.act_map == "tanh":
                    z = np.tanh(z)
                acts[layer] = z + spec.act_noise * act_rng.normal(size=z.shape)
            else:
                acts[layer] = act_rng.normal(size=(T, spec.activation_dim))
        out.append(SimulatedEpisode(latent, clean, patches, acts))
    return out


def _episode_id(i: int) -> str:
    return f"ep{i:04d}"


def to_dataset(spec: SynthSystemSpec, sims: list[SimulatedEpisode]) -> TrajectoryDataset:
    eps = tuple(
        Episode(
            _episode_id(i),
            sim.patches.astype("<f4"),
            {layer: a.astype("<f4") for layer, a in sim.activations.items()},
        )
        for i, sim in enumerate(sims)
    )
    return TrajectoryDataset(
        name=spec.name,
        episodes=eps,
        embed_dim=spec.embed_dim,
        patch_count=spec.patch_count,
        layers=spec.layers,
        activation_dims={layer: spec.activation_dim for layer in spec.layers},
    )


def generate(spec: SynthSystemSpec, episodes: int, T: int, out_dir: str | Path) -> TrajectoryDataset:
    """Simulate, write the dataset directory, and return it as re-loaded from disk."""
    ds = to_dataset(spec, simulate(spec, episodes, T))
    write_dataset(ds, out_dir)
    (Path(out_dir) / "synth_spec.json").write_text(
        json.dumps({"spec": spec.to_dict(), "episodes": episodes, "T": T}, indent=2, sort_keys=True)
        + "\n",
        encoding="utf-8",
    )
    return load_dataset(out_dir)


def _latent_basis(spec: SynthSystemSpec, z: np.ndarray) -> np.ndarray:
    """Regressors that span the one-step conditional mean for the given kind."""
    if spec.kind == "noisy_drift" and spec.nonlinearity != 0:
        p = _draw_params(spec)
        return np.concatenate([z, np.sin(z @ p.sin_W.T + p.sin_phi)], axis=1)
    return z


def oracle_r2(
    spec: SynthSystemSpec,
    K: int,
    mode: str = "activations",
    episodes: int = 20,
    T: int = 300,
    split: SplitSpec = SplitSpec(),
) -> float:
    """Test R² of a normal-equations fit from latent-derived features to the clean transition.

    ``activations`` mode sees the true latent state when activations are
    informative (pure noise otherwise); ``embeddings`` mode sees the pooled
    observation ``e_t``. Both predict the clean transition ``z_{t+K} - z_t``,
    using the drift basis of their respective inputs.
    """
    if not isinstance(spec, SynthSystemSpec):
        raise TypeError("oracle_r2 needs a SynthSystemSpec; real datasets have no latent truth")
    if mode not in ("activations", "embeddings"):
        raise ValueError(f"mode must be 'activations' or 'embeddings', got {mode!r}")
    from worldprobe.stats import r2_score

    sims = simulate(spec, episodes, T)
    feats, targets = [], []
    for i, sim in enumerate(sims):
        if sim.clean.shape[0] <= K:
            continue
        if mode == "activations":
            if spec.informative:
                x = _latent_basis(spec, sim.clean)
            else:
                x = derive_rng(spec.seed, "synth.oracle_null", i).normal(size=sim.clean.shape)
        else:
            p = _draw_params(spec)
            x = _latent_basis(spec, sim.patches.mean(axis=1) - p.patch_offsets.mean(axis=0))
        x = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
        feats.append(x[:-K])
        targets.append(sim.clean[K:] - sim.clean[:-K])
    X, Y = np.concatenate(feats), np.concatenate(targets)
    n_train, n_val, _ = split_sizes(len(X), split)
    Xtr, Ytr = X[:n_train], Y[:n_train]
    Xte, Yte = X[n_train + n_val :], Y[n_train + n_val :]
    gram = Xtr.T @ Xtr
    rhs = Xtr.T @ Ytr
    try:
        beta = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError:
        beta = np.linalg.lstsq(gram, rhs, rcond=None)[0]
    return float(r2_score(Yte, Xte @ beta, allow_nan=True))
