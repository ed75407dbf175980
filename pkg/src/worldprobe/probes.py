"""Linear (L1-penalized, no bias) and two-layer MLP probes trained with Adam.

Both probes minimise the per-sample squared error averaged over the batch,
``(1/2b) sum_i ||f(x_i) - y_i||^2``, plus ``lam * ||W||_1`` for the linear
probe. The L1 term is handled by a proximal step scaled by Adam's
per-coordinate step size, so weights reach exact zeros.
"""

from __future__ import annotations

import itertools
import json
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from worldprobe.dataset import TransitionSet
from worldprobe.seeding import derive_rng
from worldprobe.stats import r2_score

MODE_LABELS = {"activations": "Regular", "joint": "Joint", "embeddings": "Embedding"}
LABEL_MODES = {v: k for k, v in MODE_LABELS.items()}
KIND_LABELS = {"linear": "Linear", "mlp": "MLP"}
_PROBE_TYPE = re.compile(r"^(Linear|MLP)-(Regular|Joint|Embedding)(?:-L(-?\d+))?$")


_REFIT_STREAM = 10_000
_NOT_APPLICABLE = "—"  # hyperparameter the probe kind does not have


class ProbeDivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 512
    sweep_epochs: int = 50
    final_epochs: int = 300
    max_epochs: int = 1000
    seed: int = 0
    lr_grid: tuple = (1e-3, 1e-4, 1e-5)
    lam_grid: tuple = (1e-7, 1e-8, 1e-9)
    dropout_grid: tuple = (0.1,)
    standardize_features: bool = False
    patience: int = 50
    min_delta: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        return cls(**data)


class Adam:
    """Adam with bias correction; optional L1 proximal step per parameter."""

    def __init__(self, shapes, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads, l1=None):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i, (p, g) in enumerate(zip(params, grads)):
            m, v = self.m[i], self.v[i]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            step = self.lr / (np.sqrt(v / c2) + self.eps)
            p -= step * (m / c1)
            lam = l1[i] if l1 is not None else 0.0
            if lam:
                np.copyto(p, np.sign(p) * np.maximum(np.abs(p) - step * lam, 0.0))


@dataclass
class LinearProbe:
    weights: np.ndarray  # [p, d]
    lam: float
    lr: float
    x_mean: np.ndarray | None = None
    x_scale: np.ndarray | None = None
    epochs_run: int = 0

    kind = "linear"

    @property
    def dropout(self):
        return None

    def _prep(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.weights.shape[0]:
            raise ValueError(
                f"feature dimension mismatch: probe expects {self.weights.shape[0]}, got {X.shape}"
            )
        if self.x_mean is not None:
            X = (X - self.x_mean) / self.x_scale
        return X

    def __call__(self, X):
        return self._prep(X) @ self.weights


@dataclass
class MlpProbe:
    W1: np.ndarray  # [p, h]
    b1: np.ndarray
    W2: np.ndarray  # [h, d]
    b2: np.ndarray
    dropout: float
    lr: float
    x_mean: np.ndarray | None = None
    x_scale: np.ndarray | None = None
    epochs_run: int = 0

    kind = "mlp"
    lam = None

    @property
    def params(self):
        return [self.W1, self.b1, self.W2, self.b2]

    def __call__(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.W1.shape[0]:
            raise ValueError(
                f"feature dimension mismatch: probe expects {self.W1.shape[0]}, got {X.shape}"
            )
        if self.x_mean is not None:
            X = (X - self.x_mean) / self.x_scale
        return np.maximum(X @ self.W1 + self.b1, 0.0) @ self.W2 + self.b2


def predict(probe, features) -> np.ndarray:
    """Predicted transition Δe; add to e_t for the predicted e_{t+K}."""
    return probe(features)


# ---- losses and gradients -------------------------------------------------


def linear_loss_grad(W, X, Y, lam=0.0):
    """Smooth loss, its gradient, and the full objective including L1."""
    R = X @ W - Y
    n = X.shape[0]
    loss = 0.5 * float((R * R).sum()) / n
    return loss, X.T @ R / n, loss + lam * float(np.abs(W).sum())


def mlp_forward(params, X, mask=None):
    W1, b1, W2, b2 = params
    pre = X @ W1 + b1
    hidden = np.maximum(pre, 0.0)
    if mask is not None:
        hidden = hidden * mask
    return pre, hidden, hidden @ W2 + b2


def mlp_loss_grad(params, X, Y, mask=None):
    """Loss and gradients for [W1, b1, W2, b2]; ``mask`` is the scaled dropout mask."""
    W1, b1, W2, b2 = params
    n = X.shape[0]
    pre, hidden, out = mlp_forward(params, X, mask)
    R = out - Y
    loss = 0.5 * float((R * R).sum()) / n
    dout = R / n
    gW2 = hidden.T @ dout
    gb2 = dout.sum(axis=0)
    dh = dout @ W2.T
    if mask is not None:
        dh = dh * mask
    dpre = dh * (pre > 0)
    gW1 = X.T @ dpre
    gb1 = dpre.sum(axis=0)
    return loss, [gW1, gb1, gW2, gb2]


# ---- training ---------------------------------------------------------------


def _as_xy(data):
    if isinstance(data, TransitionSet):
        return np.asarray(data.X, dtype=np.float64), np.asarray(data.Y, dtype=np.float64)
    X, Y = data
    return np.asarray(X, dtype=np.float64), np.asarray(Y, dtype=np.float64)


def _standardizer(X, on):
    if not on:
        return None, None
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    return mean, scale


def _check_inputs(X, Y):
    if X.shape[0] < 1 or X.shape[0] != Y.shape[0]:
        raise ValueError(f"bad training shapes {X.shape}, {Y.shape}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("training features/targets contain non-finite values")


class _BestTracker:
    """Keep the best epoch's weights.

    With validation data the score is validation R² and training stops after
    ``patience`` epochs without a ``min_delta`` gain. Without it the score is
    the negated full training objective and every epoch runs.
    """

    def __init__(self, score, patience=None, min_delta=0.0):
        self.score = score
        self.patience, self.min_delta = patience, min_delta
        self.best = -np.inf
        self.best_state = None
        self.since = 0

    def update(self, state) -> bool:
        score = self.score()
        if not np.isfinite(score):
            score = -np.inf
        improved = score > self.best + self.min_delta
        if score > self.best or self.best_state is None:
            self.best = score
            self.best_state = [a.copy() for a in state]
        self.since = 0 if improved else self.since + 1
        return self.patience is not None and self.since >= self.patience


def _tracker(probe, val, config, train_objective):
    if val is None:
        return _BestTracker(lambda: -train_objective())
    Xv, Yv = _as_xy(val)
    return _BestTracker(
        lambda: r2_score(Yv, probe(Xv), allow_nan=True), config.patience, config.min_delta
    )


def _epoch_budget(epochs, config):
    epochs = config.final_epochs if epochs is None else epochs
    return min(int(epochs), int(config.max_epochs))


def fit_linear(
    train,
    config: TrainConfig = TrainConfig(),
    lr: float | None = None,
    lam: float | None = None,
    epochs: int | None = None,
    val=None,
    stream: tuple = (),
    init=None,
) -> LinearProbe:
    """Mini-batch proximal Adam on the L1-penalised squared error; no bias term."""
    X, Y = _as_xy(train)
    _check_inputs(X, Y)
    lr = config.lr_grid[0] if lr is None else lr
    lam = config.lam_grid[0] if lam is None else lam
    mean, scale = _standardizer(X, config.standardize_features)
    Xs = X if mean is None else (X - mean) / scale
    W = np.zeros((X.shape[1], Y.shape[1])) if init is None else np.array(init, dtype=np.float64)
    probe = LinearProbe(W, lam, lr, mean, scale)
    opt = Adam([W.shape], lr, config.beta1, config.beta2, config.eps)
    rng = derive_rng(config.seed, "probes.linear", *stream)
    stopper = _tracker(probe, val, config, lambda: linear_loss_grad(W, Xs, Y, lam)[2])
    n, bs = X.shape[0], config.batch_size
    n_epochs = _epoch_budget(epochs, config)
    for epoch in range(n_epochs):
        order = rng.permutation(n)
        for lo in range(0, n, bs):
            idx = order[lo : lo + bs]
            Xb, Yb = Xs[idx], Y[idx]
            R = Xb @ W - Yb
            grad = Xb.T @ R / len(idx)
            opt.step([W], [grad], l1=[lam])
        if not np.all(np.isfinite(W)):
            raise ProbeDivergenceError(
                f"linear probe diverged at epoch {epoch} (lr={lr:g}, lam={lam:g})"
            )
        probe.epochs_run = epoch + 1
        if stopper.update([W]):
            break
    if stopper.best_state is not None:
        W[...] = stopper.best_state[0]
    return probe


def init_mlp(p: int, d: int, rng) -> list:
    h = 2 * p
    b1_ = 1.0 / math.sqrt(p)
    b2_ = 1.0 / math.sqrt(h)
    return [
        rng.uniform(-b1_, b1_, size=(p, h)),
        rng.uniform(-b1_, b1_, size=h),
        rng.uniform(-b2_, b2_, size=(h, d)),
        rng.uniform(-b2_, b2_, size=d),
    ]


def fit_mlp(
    train,
    config: TrainConfig = TrainConfig(),
    lr: float | None = None,
    dropout: float | None = None,
    epochs: int | None = None,
    val=None,
    stream: tuple = (),
) -> MlpProbe:
    """Two-layer ReLU network, hidden width 2x input, inverted dropout on the hidden layer."""
    X, Y = _as_xy(train)
    _check_inputs(X, Y)
    lr = config.lr_grid[0] if lr is None else lr
    dropout = config.dropout_grid[0] if dropout is None else dropout
    if not 0 <= dropout < 1:
        raise ValueError(f"dropout must be in [0, 1), got {dropout}")
    mean, scale = _standardizer(X, config.standardize_features)
    Xs = X if mean is None else (X - mean) / scale
    init_rng = derive_rng(config.seed, "probes.mlp.init", *stream)
    params = init_mlp(X.shape[1], Y.shape[1], init_rng)
    probe = MlpProbe(*params, dropout=dropout, lr=lr, x_mean=mean, x_scale=scale)
    params = probe.params
    opt = Adam([a.shape for a in params], lr, config.beta1, config.beta2, config.eps)
    rng = derive_rng(config.seed, "probes.mlp.batches", *stream)
    mask_rng = derive_rng(config.seed, "probes.mlp.dropout", *stream)
    stopper = _tracker(probe, val, config, lambda: mlp_loss_grad(params, Xs, Y)[0])
    n, bs, h = X.shape[0], config.batch_size, params[0].shape[1]
    keep = 1.0 - dropout
    for epoch in range(_epoch_budget(epochs, config)):
        order = rng.permutation(n)
        for lo in range(0, n, bs):
            idx = order[lo : lo + bs]
            mask = None
            if dropout > 0:
                mask = (mask_rng.random((len(idx), h)) < keep) / keep
            loss, grads = mlp_loss_grad(params, Xs[idx], Y[idx], mask)
            if not math.isfinite(loss):
                raise ProbeDivergenceError(
                    f"MLP probe loss became non-finite at epoch {epoch} (lr={lr:g}, dropout={dropout:g})"
                )
            opt.step(params, grads)
        if not all(np.all(np.isfinite(a)) for a in params):
            raise ProbeDivergenceError(f"MLP probe diverged at epoch {epoch} (lr={lr:g})")
        probe.epochs_run = epoch + 1
        if stopper.update(params):
            break
    if stopper.best_state is not None:
        for a, best in zip(params, stopper.best_state):
            a[...] = best
    return probe


# ---- results and grid search -----------------------------------------------


@dataclass
class ProbeResult:
    dataset: str
    K: int
    kind: str  # "linear" | "mlp"
    mode: str  # "activations" | "joint" | "embeddings"
    layer: int | None
    train_r2: float
    test_r2: float
    lr: float
    lam: float | None
    dropout: float | None
    train_std: float | None = None
    test_std: float | None = None
    val_r2: float | None = None
    extra: dict = field(default_factory=dict)

    CSV_COLUMNS = (
        "dataset", "K", "train_r2", "train_std", "test_r2", "test_std",
        "lr", "lambda", "dropout", "probe_type",
    )

    @property
    def probe_type(self) -> str:
        return probe_type_string(self.kind, self.mode, self.layer)

    def csv_row(self) -> dict:
        return {
            "dataset": self.dataset,
            "K": str(self.K),
            "train_r2": _fmt(self.train_r2),
            "train_std": _fmt(self.train_std),
            "test_r2": _fmt(self.test_r2),
            "test_std": _fmt(self.test_std),
            "lr": _fmt_sci(self.lr),
            "lambda": _NOT_APPLICABLE if self.lam is None else _fmt_sci(self.lam),
            "dropout": _NOT_APPLICABLE if self.dropout is None else _fmt(self.dropout),
            "probe_type": self.probe_type,
        }

    @classmethod
    def from_csv_row(cls, row: dict) -> "ProbeResult":
        kind, mode, layer = parse_probe_type(row["probe_type"])
        return cls(
            dataset=row["dataset"], K=int(row["K"]), kind=kind, mode=mode, layer=layer,
            train_r2=_parse(row.get("train_r2")), test_r2=_parse(row.get("test_r2")),
            lr=_parse(row.get("lr")), lam=_parse(row.get("lambda")),
            dropout=_parse(row.get("dropout")), train_std=_parse(row.get("train_std")),
            test_std=_parse(row.get("test_std")),
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["probe_type"] = self.probe_type
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def probe_type_string(kind: str, mode: str, layer: int | None) -> str:
    base = f"{KIND_LABELS[kind]}-{MODE_LABELS[mode]}"
    return base if layer is None else f"{base}-L{layer}"


def parse_probe_type(text: str):
    m = _PROBE_TYPE.match(text.strip())
    if not m:
        raise ValueError(f"unrecognised probe type {text!r}")
    kind = "linear" if m.group(1) == "Linear" else "mlp"
    layer = int(m.group(3)) if m.group(3) is not None else None
    return kind, LABEL_MODES[m.group(2)], layer


def _fmt(x):
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


def _fmt_sci(x):
    return "" if x is None else f"{x:.2e}"


def _parse(x):
    if x is None:
        return None
    x = str(x).strip()
    if x in ("", "—", "-", "nan"):
        return None
    return float(x)


@dataclass
class GridCell:
    index: int
    lr: float
    lam: float | None
    dropout: float | None
    val_r2: float = float("nan")
    error: str | None = None


@dataclass
class GridSearchResult:
    best: GridCell
    probe: object
    result: ProbeResult
    cells: list


def grid_cells(kind: str, grids: dict | None, config: TrainConfig) -> list[GridCell]:
    grids = grids or {}
    lrs = tuple(grids.get("lr", config.lr_grid))
    if kind == "linear":
        lams = tuple(grids.get("lam", config.lam_grid))
        combos = [(lr, lam, None) for lr, lam in itertools.product(lrs, lams)]
    else:
        drops = tuple(grids.get("dropout", config.dropout_grid))
        combos = [(lr, None, dr) for lr, dr in itertools.product(lrs, drops)]
    if not combos:
        raise ValueError("empty hyperparameter grid")
    return [GridCell(i, lr, lam, dr) for i, (lr, lam, dr) in enumerate(combos)]


def _fit(kind, train, config, cell, epochs, val, stream):
    if kind == "linear":
        return fit_linear(train, config, lr=cell.lr, lam=cell.lam, epochs=epochs, val=val, stream=stream)
    return fit_mlp(train, config, lr=cell.lr, dropout=cell.dropout, epochs=epochs, val=val, stream=stream)


def _selection_key(cell: GridCell):
    # Highest val R², then larger lambda, then smaller lr, then smaller dropout.
    return (-cell.val_r2, -(cell.lam or 0.0), cell.lr, cell.dropout or 0.0)


def grid_search(
    train,
    val,
    test,
    kind: str = "linear",
    config: TrainConfig = TrainConfig(),
    grids: dict | None = None,
    dataset: str = "",
    threads: int = 1,
    stream: tuple = (),
) -> GridSearchResult:
    """Sweep every grid cell for ``sweep_epochs``, pick by validation R², refit the winner."""
    if kind not in KIND_LABELS:
        raise ValueError(f"kind must be 'linear' or 'mlp', got {kind!r}")
    cells = grid_cells(kind, grids, config)
    Xv, Yv = _as_xy(val)

    def run(cell):
        try:
            probe = _fit(kind, train, config, cell, config.sweep_epochs, None, stream + (cell.index,))
            cell.val_r2 = r2_score(Yv, probe(Xv), allow_nan=True)
            if not np.isfinite(cell.val_r2):
                cell.error = "validation R² is not finite"
        except (ProbeDivergenceError, FloatingPointError) as exc:
            cell.error = str(exc)
        return cell

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            cells = list(pool.map(run, cells))
    else:
        cells = [run(c) for c in cells]

    ok = [c for c in cells if c.error is None]
    if not ok:
        detail = "; ".join(f"cell {c.index} (lr={c.lr}, lam={c.lam}, dropout={c.dropout}): {c.error}" for c in cells)
        raise ProbeDivergenceError(f"every grid cell failed: {detail}")
    best = min(ok, key=_selection_key)
    probe = _fit(kind, train, config, best, config.final_epochs, val, stream + (_REFIT_STREAM + best.index,))
    Xtr, Ytr = _as_xy(train)
    Xte, Yte = _as_xy(test)
    mode = getattr(train, "mode", "activations")
    layer = getattr(train, "layer", None)
    K = getattr(train, "K", 0)
    result = ProbeResult(
        dataset=dataset, K=K, kind=kind, mode=mode, layer=layer,
        train_r2=r2_score(Ytr, probe(Xtr)), test_r2=r2_score(Yte, probe(Xte)),
        lr=best.lr, lam=best.lam, dropout=best.dropout,
        val_r2=r2_score(Yv, probe(Xv)),
    )
    return GridSearchResult(best, probe, result, cells)


def refit_recipe(kind: str, config: TrainConfig, lr, lam=None, dropout=None, epochs=None, stream=()):
    """A fixed-hyperparameter training function, as used by permutation tests."""
    cell = GridCell(0, lr, lam, dropout)
    n_epochs = config.final_epochs if epochs is None else epochs

    def fit(train):
        return _fit(kind, train, config, cell, n_epochs, None, stream)

    return fit
