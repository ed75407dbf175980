"""Trajectory datasets: on-disk format, validation, pooling, transition pairs, splits.

Directory layout::

    manifest.json
    <episode id>/patches.f32        little-endian float32, [T, N, d]
    <episode id>/act_<layer>.f32    little-endian float32, [T, A_layer]
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

MODES = ("activations", "embeddings", "joint")
_F32 = np.dtype("<f4")


class DatasetError(ValueError):
    """Raised when a dataset directory or in-memory dataset is malformed."""


@dataclass(frozen=True)
class Episode:
    id: str
    patches: np.ndarray  # [T, N, d]
    activations: Mapping[int, np.ndarray] = field(default_factory=dict)  # layer -> [T, A]

    @property
    def length(self) -> int:
        return int(self.patches.shape[0])

    def pooled(self) -> np.ndarray:
        """Mean-pooled embeddings e_t, shape [T, d], float64."""
        return self.patches.astype(np.float64).mean(axis=1)


@dataclass(frozen=True)
class TrajectoryDataset:
    name: str
    episodes: tuple[Episode, ...]
    embed_dim: int
    patch_count: int
    layers: tuple[int, ...]
    activation_dims: Mapping[int, int]

    def __post_init__(self):
        _check_consistency(self)

    @property
    def n_steps(self) -> int:
        return sum(ep.length for ep in self.episodes)

    def manifest(self) -> dict:
        return {
            "name": self.name,
            "embed_dim": int(self.embed_dim),
            "patch_count": int(self.patch_count),
            "layers": [int(layer) for layer in self.layers],
            "activation_dims": {str(k): int(self.activation_dims[k]) for k in self.layers},
            "episodes": [{"id": ep.id, "length": ep.length} for ep in self.episodes],
        }


@dataclass(frozen=True)
class TransitionSample:
    episode_id: str
    t: int
    K: int
    features: np.ndarray
    target: np.ndarray


@dataclass(frozen=True)
class TransitionSet:
    """Column-stacked transition samples; row order is (episode order, t)."""

    X: np.ndarray  # [n, feature_dim]
    Y: np.ndarray  # [n, d]
    episode_index: np.ndarray  # [n] position of the source episode in the dataset
    t: np.ndarray  # [n]
    K: int
    mode: str
    layer: int | None
    episode_ids: tuple[str, ...] = ()

    def __len__(self) -> int:
        return int(self.X.shape[0])

    def subset(self, idx) -> "TransitionSet":
        return TransitionSet(
            self.X[idx], self.Y[idx], self.episode_index[idx], self.t[idx],
            self.K, self.mode, self.layer, self.episode_ids,
        )

    def with_targets(self, Y: np.ndarray) -> "TransitionSet":
        return TransitionSet(
            self.X, Y, self.episode_index, self.t, self.K, self.mode, self.layer,
            self.episode_ids,
        )

    def samples(self) -> list[TransitionSample]:
        return [
            TransitionSample(
                self.episode_ids[int(e)] if self.episode_ids else str(int(e)),
                int(t), self.K, self.X[i], self.Y[i],
            )
            for i, (e, t) in enumerate(zip(self.episode_index, self.t))
        ]


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.70
    val: float = 0.15
    test: float = 0.15
    mode: str = "chronological"

    def __post_init__(self):
        fractions = (self.train, self.val, self.test)
        if any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
            raise ValueError(f"split fractions must be non-negative and sum to 1, got {fractions}")
        if self.mode != "chronological":
            raise ValueError(f"unsupported split mode {self.mode!r}")


def _check_consistency(ds: TrajectoryDataset) -> None:
    if ds.embed_dim < 1 or ds.patch_count < 1:
        raise DatasetError("embed_dim and patch_count must be positive")
    if set(ds.activation_dims) != set(ds.layers):
        raise DatasetError(
            f"activation_dims keys {sorted(ds.activation_dims)} do not match layers {list(ds.layers)}"
        )
    for ep in ds.episodes:
        T = ep.length
        if T < 1:
            raise DatasetError(f"episode {ep.id!r} is empty")
        if ep.patches.shape != (T, ds.patch_count, ds.embed_dim):
            raise DatasetError(
                f"episode {ep.id!r}: patches shape {ep.patches.shape} != "
                f"{(T, ds.patch_count, ds.embed_dim)}"
            )
        for layer in ds.layers:
            if layer not in ep.activations:
                raise DatasetError(f"episode {ep.id!r}: missing activations for layer {layer}")
            shape = ep.activations[layer].shape
            if shape != (T, ds.activation_dims[layer]):
                raise DatasetError(
                    f"episode {ep.id!r}: layer {layer} activations shape {shape} != "
                    f"{(T, ds.activation_dims[layer])}"
                )


def _check_finite(ep_id: str, stream: str, arr: np.ndarray) -> None:
    bad = ~np.isfinite(arr)
    if bad.any():
        coord = np.argwhere(bad)[0]
        raise DatasetError(
            f"non-finite value {arr[tuple(coord)]!r} in episode {ep_id!r}, stream {stream!r}, "
            f"step t={int(coord[0])} (index {tuple(int(c) for c in coord)})"
        )


def _read_f32(path: Path, shape: tuple[int, ...]) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(f"missing stream file {path}")
    expected = 4 * int(np.prod(shape))
    actual = path.stat().st_size
    if actual != expected:
        raise DatasetError(
            f"shape mismatch for {path}: declared shape {shape} needs {expected} bytes, "
            f"file holds {actual}"
        )
    return np.fromfile(path, dtype=_F32).reshape(shape)


def load_dataset(path: str | Path) -> TrajectoryDataset:
    """Load and fully validate a dataset directory."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DatasetError(f"missing manifest: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"invalid manifest JSON in {manifest_path}: {exc}") from exc
    for key in ("name", "embed_dim", "patch_count", "layers", "activation_dims", "episodes"):
        if key not in manifest:
            raise DatasetError(f"manifest missing key {key!r}")

    d = int(manifest["embed_dim"])
    n_patch = int(manifest["patch_count"])
    layers = tuple(int(layer) for layer in manifest["layers"])
    act_dims = {int(k): int(v) for k, v in manifest["activation_dims"].items()}
    if set(act_dims) != set(layers):
        raise DatasetError("manifest activation_dims keys do not match layers")

    episodes = []
    for entry in manifest["episodes"]:
        ep_id, T = str(entry["id"]), int(entry["length"])
        if T < 1:
            raise DatasetError(f"episode {ep_id!r} declares non-positive length {T}")
        ep_dir = root / ep_id
        patches = _read_f32(ep_dir / "patches.f32", (T, n_patch, d))
        _check_finite(ep_id, "patches", patches)
        acts = {}
        for layer in layers:
            arr = _read_f32(ep_dir / f"act_{layer}.f32", (T, act_dims[layer]))
            _check_finite(ep_id, f"act_{layer}", arr)
            acts[layer] = arr
        episodes.append(Episode(ep_id, patches, acts))

    return TrajectoryDataset(
        name=str(manifest["name"]),
        episodes=tuple(episodes),
        embed_dim=d,
        patch_count=n_patch,
        layers=layers,
        activation_dims=act_dims,
    )


def write_dataset(ds: TrajectoryDataset, path: str | Path) -> Path:
    """Write ``ds`` in the directory format; output bytes depend only on ``ds``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for ep in ds.episodes:
        ep_dir = root / ep.id
        ep_dir.mkdir(parents=True, exist_ok=True)
        np.ascontiguousarray(ep.patches, dtype=_F32).tofile(ep_dir / "patches.f32")
        for layer in ds.layers:
            np.ascontiguousarray(ep.activations[layer], dtype=_F32).tofile(
                ep_dir / f"act_{layer}.f32"
            )
    text = json.dumps(ds.manifest(), indent=2, sort_keys=True) + "\n"
    (root / "manifest.json").write_text(text, encoding="utf-8")
    return root


def mean_pool(patches) -> np.ndarray:
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 2:
        raise ValueError(f"expected [N, d] patches, got shape {patches.shape}")
    if patches.shape[0] == 0:
        raise ValueError("cannot mean-pool zero patches")
    return patches.mean(axis=0)


def _episode_features(ep: Episode, pooled: np.ndarray, mode: str, layer: int | None) -> np.ndarray:
    if mode == "embeddings":
        return pooled
    acts = ep.activations[layer].astype(np.float64)
    if mode == "activations":
        return acts
    return np.concatenate([acts, pooled], axis=1)


def compute_transitions(
    dataset: TrajectoryDataset, K: int, layer: int | None = None, mode: str = "activations"
) -> TransitionSet:
    """Pair features at t with Δe = e_{t+K} - e_t inside each episode."""
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode != "embeddings" and layer not in dataset.layers:
        raise ValueError(f"layer {layer!r} not in dataset layers {list(dataset.layers)}")

    Xs, Ys, eps, ts = [], [], [], []
    for e_idx, ep in enumerate(dataset.episodes):
        T = ep.length
        if T <= K:
            continue
        pooled = ep.pooled()
        feats = _episode_features(ep, pooled, mode, layer)
        Xs.append(feats[: T - K])
        Ys.append(pooled[K:] - pooled[: T - K])
        eps.append(np.full(T - K, e_idx, dtype=np.int64))
        ts.append(np.arange(T - K, dtype=np.int64))

    ids = tuple(ep.id for ep in dataset.episodes)
    layer_out = None if mode == "embeddings" else layer
    if not Xs:
        warnings.warn(
            f"K={K} is not shorter than any episode in {dataset.name!r}; no transitions",
            RuntimeWarning,
            stacklevel=2,
        )
        feat_dim = _feature_dim(dataset, mode, layer)
        return TransitionSet(
            np.zeros((0, feat_dim)), np.zeros((0, dataset.embed_dim)),
            np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), K, mode, layer_out, ids,
        )
    return TransitionSet(
        np.concatenate(Xs), np.concatenate(Ys), np.concatenate(eps), np.concatenate(ts),
        K, mode, layer_out, ids,
    )


def _feature_dim(dataset: TrajectoryDataset, mode: str, layer: int | None) -> int:
    if mode == "embeddings":
        return dataset.embed_dim
    a = dataset.activation_dims[layer]
    return a if mode == "activations" else a + dataset.embed_dim


def split_sizes(n: int, spec: SplitSpec = SplitSpec()) -> tuple[int, int, int]:
    """Floor for train and val, remainder to test."""
    if n < 3:
        raise ValueError(f"need at least 3 samples to split, got {n}")
    n_train = int(math.floor(n * spec.train + 1e-9))
    n_val = int(math.floor(n * spec.val + 1e-9))
    return n_train, n_val, n - n_train - n_val


def chronological_split(samples: Sequence | TransitionSet, spec: SplitSpec = SplitSpec()):
    """Contiguous prefix / middle / suffix split by sample index."""
    n = len(samples)
    n_train, n_val, _ = split_sizes(n, spec)
    if isinstance(samples, TransitionSet):
        return (
            samples.subset(slice(0, n_train)),
            samples.subset(slice(n_train, n_train + n_val)),
            samples.subset(slice(n_train + n_val, n)),
        )
    samples = list(samples)
    return samples[:n_train], samples[n_train : n_train + n_val], samples[n_train + n_val :]
