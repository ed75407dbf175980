"""Command-line entry point: ``worldprobe <subcommand> ...``.

Subcommands: synth, ingest-check, probe, permtest, bootstrap, coherence,
allan, koopman, report. Analysis subcommands read a JSON run configuration
(see ``RunConfig``); command-line flags override config values, and the
``WORLDPROBE_SEED`` environment variable overrides the config seed.

Exit codes: 0 success, 1 partial (some cells failed), 2 invalid input.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from worldprobe import analysis, koopman, stats
from worldprobe.dataset import DatasetError, SplitSpec, chronological_split, compute_transitions, load_dataset
from worldprobe.probes import KIND_LABELS, ProbeResult, TrainConfig, grid_search, refit_recipe
from worldprobe.seeding import component_key
from worldprobe.synth import SynthSystemSpec, generate

log = logging.getLogger("worldprobe")

EXIT_OK, EXIT_PARTIAL, EXIT_INVALID = 0, 1, 2
SEED_ENV = "WORLDPROBE_SEED"

PROBE_CSV = "probe_results.csv"
PROBE_JSON = "probe_results.json"
PRED_DIR = "predictions"


class InputError(Exception):
    """Invalid user input; maps to exit code 2."""


# ---- configuration ---------------------------------------------------------------


@dataclass
class RunConfig:
    datasets: list = field(default_factory=list)  # paths, or {"path": ..., "name": ...}
    K: list = field(default_factory=lambda: [1, 3, 10, 30])
    layers: list | None = None  # None -> every layer in the dataset
    kinds: list = field(default_factory=lambda: ["linear", "mlp"])
    modes: list = field(default_factory=lambda: ["activations", "joint", "embeddings"])
    grids: dict = field(default_factory=dict)  # {"lr": [...], "lam": [...], "dropout": [...]}
    train: dict = field(default_factory=dict)  # TrainConfig overrides
    stats: dict = field(default_factory=dict)  # n_reps, n_perm, levels
    split: dict = field(default_factory=dict)  # train / val / test fractions
    koopman: dict = field(default_factory=dict)
    out_dir: str = "run"
    seed: int = 0
    threads: int = 1

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InputError(f"unknown config keys: {unknown}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not isinstance(self.K, list) or not all(isinstance(k, int) and k >= 1 for k in self.K):
            raise InputError(f"K must be a list of positive integers, got {self.K!r}")
        bad = [k for k in self.kinds if k not in KIND_LABELS]
        if bad:
            raise InputError(f"unknown probe kinds {bad}")
        bad = [m for m in self.modes if m not in ("activations", "joint", "embeddings")]
        if bad:
            raise InputError(f"unknown input modes {bad}")
        if self.threads < 1:
            raise InputError("threads must be >= 1")
        try:
            self.train_config()
            self.split_spec()
        except (TypeError, ValueError) as exc:
            raise InputError(str(exc)) from exc

    def train_config(self) -> TrainConfig:
        overrides = dict(self.train)
        overrides.setdefault("seed", self.seed)
        return TrainConfig.from_dict(overrides)

    def split_spec(self) -> SplitSpec:
        return SplitSpec(**self.split) if self.split else SplitSpec()

    @property
    def n_reps(self) -> int:
        return int(self.stats.get("n_reps", 400))

    @property
    def n_perm(self) -> int:
        return int(self.stats.get("n_perm", 100))

    @property
    def levels(self) -> tuple:
        return tuple(self.stats.get("levels", stats.LEVELS))

    def dataset_entries(self) -> list[tuple[Path, str | None]]:
        out = []
        for d in self.datasets:
            if isinstance(d, dict):
                out.append((Path(d["path"]), d.get("name")))
            else:
                out.append((Path(d), None))
        return out

    def to_dict(self) -> dict:
        """Serializable form; execution-only settings (threads, out_dir) are left out."""
        out = asdict(self)
        out.pop("threads")
        out.pop("out_dir")
        return out


def load_config(args) -> RunConfig:
    data = {}
    if getattr(args, "config", None):
        data = _read_json(args.config, "config")
    for key in ("out_dir", "threads", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            data[key] = val
    env = os.environ.get(SEED_ENV)
    if env is not None and getattr(args, "seed", None) is None:
        try:
            data["seed"] = int(env)
        except ValueError as exc:
            raise InputError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
    for key in ("datasets", "K", "layers", "kinds", "modes"):
        val = getattr(args, key, None)
        if val:
            data[key] = val
    try:
        return RunConfig.from_dict(data)
    except TypeError as exc:
        raise InputError(f"bad config: {exc}") from exc


def _read_json(path, what: str) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {what} file {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{what} file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise InputError(f"{what} file {path} must hold a JSON object")
    return data


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _clean(x):
    """NaN -> None so JSON stays standard."""
    if isinstance(x, float) and math.isnan(x):
        return None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    return x


def _load_datasets(cfg: RunConfig):
    if not cfg.datasets:
        raise InputError("config lists no datasets")
    out = []
    for path, name in cfg.dataset_entries():
        try:
            ds = load_dataset(path)
        except DatasetError as exc:
            raise InputError(f"dataset {path}: {exc}") from exc
        out.append((name or ds.name, ds))
    names = [n for n, _ in out]
    if len(set(names)) != len(names):
        raise InputError(f"dataset names must be unique, got {names}")
    return out


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---- probe cells ----------------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    dataset_index: int
    dataset: str
    K: int
    mode: str
    layer: int | None
    kind: str

    @property
    def key(self) -> str:
        layer = "none" if self.layer is None else str(self.layer)
        return f"{self.dataset}__K{self.K}__{self.mode}__L{layer}__{self.kind}"

    @property
    def stream(self) -> tuple:
        layer = -1 if self.layer is None else self.layer
        return (
            self.dataset_index, self.K, component_key(self.mode), layer, component_key(self.kind),
        )


def _cells(cfg: RunConfig, datasets) -> list[Cell]:
    cells = []
    for di, (name, ds) in enumerate(datasets):
        layers = list(ds.layers) if cfg.layers is None else list(cfg.layers)
        missing = [l for l in layers if l not in ds.layers]
        if missing:
            raise InputError(f"dataset {name!r} has no layers {missing}; available {list(ds.layers)}")
        for K in cfg.K:
            for mode in cfg.modes:
                for layer in ([None] if mode == "embeddings" else layers):
                    for kind in cfg.kinds:
                        cells.append(Cell(di, name, K, mode, layer, kind))
    return cells


def _splits(ds, cell: Cell, spec: SplitSpec):
    ts = compute_transitions(ds, cell.K, cell.layer, cell.mode)
    if len(ts) == 0:
        raise ValueError(f"no transitions for K={cell.K}")
    return chronological_split(ts, spec)


def run_cell(cfg: RunConfig, ds, cell: Cell, out: Path) -> dict:
    config = cfg.train_config()
    train, val, test = _splits(ds, cell, cfg.split_spec())
    gs = grid_search(
        train, val, test, kind=cell.kind, config=config, grids=cfg.grids,
        dataset=cell.dataset, threads=cfg.threads, stream=cell.stream,
    )
    y_hat_train, y_hat_test = gs.probe(train.X), gs.probe(test.X)
    seed = cfg.seed
    test_rep = stats.block_bootstrap(test.Y, y_hat_test, cfg.n_reps, cfg.levels, seed)
    train_rep = stats.block_bootstrap(train.Y, y_hat_train, cfg.n_reps, cfg.levels, seed)
    res = gs.result
    res.train_std, res.test_std = train_rep.se, test_rep.se
    pred_dir = out / PRED_DIR
    pred_dir.mkdir(exist_ok=True)
    np.savez(
        pred_dir / f"{cell.key}.npz",
        y_train=train.Y, y_hat_train=y_hat_train, y_test=test.Y, y_hat_test=y_hat_test,
    )
    return {
        "key": cell.key,
        "result": _clean(res.to_dict()),
        "test_report": _clean(test_rep.to_dict()),
        "train_report": _clean(train_rep.to_dict()),
        "grid": [_clean(asdict(c)) for c in gs.cells],
        "n": {"train": len(train), "val": len(val), "test": len(test)},
    }


def write_results_csv(results, path: Path) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=ProbeResult.CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in results:
            w.writerow(r.csv_row())


def read_results_csv(path: Path) -> list[ProbeResult]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(ProbeResult.CSV_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise InputError(f"{path} lacks columns {sorted(missing)}")
        rows, last = [], ""
        for row in reader:
            # Table-2 style files leave the dataset blank on continuation rows.
            row["dataset"] = (row.get("dataset") or "").strip() or last
            last = row["dataset"]
            rows.append(ProbeResult.from_csv_row(row))
    return rows


def cmd_probe(args) -> int:
    cfg = load_config(args)
    datasets = _load_datasets(cfg)
    out = _out_dir(cfg)
    records, failures = [], []
    by_name = dict(datasets)
    for cell in _cells(cfg, datasets):
        log.info("probe cell %s", cell.key)
        try:
            records.append(run_cell(cfg, by_name[cell.dataset], cell, out))
        except Exception as exc:  # noqa: BLE001 - every cell failure is reported, the run continues
            log.error("cell %s failed: %s", cell.key, exc)
            failures.append({"key": cell.key, "error": f"{type(exc).__name__}: {exc}"})
    results = [ProbeResult(**{k: v for k, v in r["result"].items() if k != "probe_type"}) for r in records]
    write_results_csv(results, out / PROBE_CSV)
    _write_json(out / PROBE_JSON, {
        "config": cfg.to_dict(), "cells": records, "failures": failures, "methods": stats.METHOD_NOTES,
    })
    print(f"{len(records)} cells ok, {len(failures)} failed -> {out / PROBE_CSV}")
    for f in failures:
        print(f"FAILED {f['key']}: {f['error']}")
    if failures:
        return EXIT_PARTIAL if records else EXIT_INVALID
    return EXIT_OK


# ---- bootstrap ------------------------------------------------------------------------


def cmd_bootstrap(args) -> int:
    """Recompute StatReports from saved predictions with the config's stats settings."""
    cfg = load_config(args)
    out = _out_dir(cfg)
    pred_dir = out / PRED_DIR
    files = sorted(pred_dir.glob("*.npz")) if pred_dir.is_dir() else []
    if not files:
        raise InputError(f"no saved predictions under {pred_dir}; run `probe` first")
    reports, rows = {}, []
    for f in files:
        with np.load(f) as z:
            test_rep = stats.block_bootstrap(z["y_test"], z["y_hat_test"], cfg.n_reps, cfg.levels, cfg.seed)
            train_rep = stats.block_bootstrap(z["y_train"], z["y_hat_train"], cfg.n_reps, cfg.levels, cfg.seed)
        reports[f.stem] = {"test": _clean(test_rep.to_dict()), "train": _clean(train_rep.to_dict())}
        row = {"key": f.stem, "test_r2": f"{test_rep.r2:.6f}", "test_se": f"{test_rep.se:.6f}",
               "block_length": test_rep.block_length, "n": test_rep.n}
        for lvl in cfg.levels:
            lo, hi = test_rep.ci[lvl]
            row[f"ci{lvl}_lo"], row[f"ci{lvl}_hi"] = f"{lo:.6f}", f"{hi:.6f}"
        rows.append(row)
    _write_json(out / "bootstrap.json", {"reports": reports, "n_reps": cfg.n_reps, "seed": cfg.seed,
                                          "methods": stats.METHOD_NOTES})
    with (out / "bootstrap.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    print(f"{len(rows)} bootstrap reports -> {out / 'bootstrap.csv'}")
    return EXIT_OK


# ---- permutation tests ------------------------------------------------------------------


def tally_group(result: ProbeResult) -> str:
    return f"L{result.layer} {KIND_LABELS[result.kind]}"


def permutation_tally(tested: list[tuple[ProbeResult, float]], Ks, alpha: float = 0.01) -> dict:
    """Successes (p < alpha) over tested probes, grouped by "L<layer> <Kind>" and K."""
    groups = sorted({tally_group(r) for r, _ in tested},
                    key=lambda g: (int(g.split()[0][1:]), g.split()[1]))
    table = {}
    for g in groups + ["Total"]:
        row = {}
        for K in list(Ks) + ["Overall"]:
            sel = [p for r, p in tested
                   if (g == "Total" or tally_group(r) == g) and (K == "Overall" or r.K == K)]
            row[str(K)] = f"{sum(p < alpha for p in sel)}/{len(sel)}"
        table[g] = row
    return table


def cmd_permtest(args) -> int:
    cfg = load_config(args)
    out = _out_dir(cfg)
    prior = out / PROBE_JSON
    if not prior.exists():
        raise InputError(f"missing prior probe results {prior}; run `probe` first")
    records = json.loads(prior.read_text(encoding="utf-8"))["cells"]
    loaded = _load_datasets(cfg)
    datasets = dict(loaded)
    ds_index = {name: i for i, (name, _) in enumerate(loaded)}
    config = cfg.train_config()
    rows, tested, failures = [], [], []
    for rec in records:
        r = rec["result"]
        res = ProbeResult(**{k: v for k, v in r.items() if k != "probe_type"})
        if res.mode == "embeddings" or res.test_r2 is None or not res.test_r2 > 0:
            continue
        if res.dataset not in datasets:
            failures.append({"key": rec["key"], "error": f"dataset {res.dataset!r} not in config"})
            continue
        cell = Cell(ds_index[res.dataset], res.dataset, res.K, res.mode, res.layer, res.kind)
        train, _, test = _splits(datasets[res.dataset], cell, cfg.split_spec())
        fit = refit_recipe(res.kind, config, res.lr, res.lam, res.dropout, stream=cell.stream)
        try:
            pr = stats.permutation_test(train, test, fit, cfg.n_perm,
                                        seed=cfg.seed + component_key(rec["key"]), threads=cfg.threads)
        except Exception as exc:  # noqa: BLE001
            failures.append({"key": rec["key"], "error": f"{type(exc).__name__}: {exc}"})
            continue
        tested.append((res, pr.p_value))
        rows.append({"dataset": res.dataset, "K": res.K, "probe_type": res.probe_type,
                     "test_r2": f"{res.test_r2:.6f}", "observed_r2": f"{pr.observed:.6f}",
                     "p_value": f"{pr.p_value:.6f}", "n_perm": pr.n_permutations})
    with (out / "permtest.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["dataset", "K", "probe_type", "test_r2", "observed_r2",
                                           "p_value", "n_perm"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    tally = permutation_tally(tested, cfg.K) if tested else {}
    combined = stats.aggregate_overall_p([p for _, p in tested]) if tested else None
    _write_json(out / "permtest.json", {
        "tests": rows, "tally": tally, "failures": failures,
        "overall": None if combined is None else asdict(combined),
    })
    if tally:
        cols = [str(K) for K in cfg.K] + ["Overall"]
        with (out / "permtest_tally.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["probe_type"] + [f"K={c}" if c != "Overall" else c for c in cols])
            for g, row in tally.items():
                w.writerow([g] + [row[c] for c in cols])
    print(f"{len(tested)} probes tested" + (f", tally {tally['Total']['Overall']}" if tally else ""))
    return EXIT_PARTIAL if failures else EXIT_OK


# ---- descriptive analyses -------------------------------------------------------------------


def cmd_coherence(args) -> int:
    cfg = load_config(args)
    out = _out_dir(cfg)
    curves = []
    for name, ds in _load_datasets(cfg):
        c = analysis.temporal_coherence(ds, cfg.K)
        c.dataset = name
        curves.append(c)
    with (out / "coherence.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "K", "mean_cosine", "std_cosine", "skipped_pairs"])
        for c in curves:
            for K, m, s, n in zip(c.K, c.mean, c.std, c.skipped):
                w.writerow([c.dataset, K, f"{m:.6f}", f"{s:.6f}", n])
    _write_json(out / "coherence.json", {"curves": [_clean(asdict(c)) for c in curves]})
    analysis.plot_coherence_svg(curves, out / "coherence.svg")
    print(f"coherence for {len(curves)} dataset(s) -> {out / 'coherence.csv'}")
    return EXIT_OK


def cmd_allan(args) -> int:
    cfg = load_config(args)
    out = _out_dir(cfg)
    per_dataset = {}
    for name, ds in _load_datasets(cfg):
        try:
            per_dataset[name] = analysis.transition_noise_profile(ds, cfg.K)
        except ValueError as exc:
            raise InputError(f"dataset {name!r}: {exc}") from exc
    with (out / "allan.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "K", "tau", "adev"])
        for name, reps in per_dataset.items():
            for r in reps:
                for tau, a in zip(r.taus, r.adev):
                    w.writerow([name, r.K, tau, f"{a:.8e}"])
    with (out / "allan_summary.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "K", "rms_total", "rms_noise", "signal_fraction"])
        for name, reps in per_dataset.items():
            for r in reps:
                w.writerow([name, r.K, f"{r.rms_total:.8e}", f"{r.rms_noise:.8e}", f"{r.signal_fraction:.6f}"])
    _write_json(out / "allan.json", {
        name: [dict(asdict(r), signal_fraction=r.signal_fraction) for r in reps]
        for name, reps in per_dataset.items()
    })
    for name, reps in per_dataset.items():
        analysis.plot_allan_svg(reps, out / f"allan_{name}.svg")
    print(f"Allan profiles for {len(per_dataset)} dataset(s) -> {out / 'allan_summary.csv'}")
    return EXIT_OK


# ---- Koopman sweep ---------------------------------------------------------------------------


def parse_observable(text: str):
    """``cos:k`` -> cos(2πkx), ``sin:k`` -> sin(2πkx), ``pow:p`` -> x^p (first coordinate)."""
    try:
        name, arg = text.split(":")
        k = float(arg)
    except ValueError as exc:
        raise InputError(f"observable must look like 'cos:1', got {text!r}") from exc

    def first(x):
        x = np.asarray(x, dtype=np.float64)
        return x if x.ndim == 1 else x[:, 0]

    if name == "cos":
        return lambda x: np.cos(2 * np.pi * k * first(x))
    if name == "sin":
        return lambda x: np.sin(2 * np.pi * k * first(x))
    if name == "pow":
        return lambda x: first(x) ** k
    raise InputError(f"unknown observable family {name!r}")


def _system(spec: dict):
    kind = spec.get("system", "torus_rotation")
    if kind == "torus_rotation":
        return koopman.TorusRotation(float(spec.get("alpha", math.sqrt(2) - 1)))
    if kind == "linear_contraction":
        return koopman.LinearContraction(float(spec.get("rho", 0.9)))
    raise InputError(f"unknown Koopman system {kind!r}")


def cmd_koopman(args) -> int:
    cfg = load_config(args)
    out = _out_dir(cfg)
    spec = dict(cfg.koopman)
    system = _system(spec)
    g = parse_observable(spec.get("g", "cos:1"))
    try:
        rows = koopman.error_decomposition(
            system, spec.get("N", [3]), spec.get("M", [100, 1000, 10000]), g,
            K=int(spec.get("K", 1)), seed=cfg.seed, obs_noise=float(spec.get("obs_noise", 0.0)),
            repeats=int(spec.get("repeats", 1)),
        )
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    koopman.write_sweep_csv(rows, out / "koopman_sweep.csv")
    _write_json(out / "koopman_sweep.json", {
        "spec": spec, "seed": cfg.seed,
        "rows": [dict(asdict(r), bound=r.bound, bound_holds=bool(r.total <= r.bound * (1 + 1e-9)))
                 for r in rows],
    })
    koopman.plot_sweep_svg(rows, out / "koopman_sweep.svg")
    print(f"{len(rows)} sweep cells -> {out / 'koopman_sweep.csv'}")
    return EXIT_OK


# ---- report ----------------------------------------------------------------------------------


def _report_from(r: ProbeResult) -> stats.StatReport:
    se = r.test_std if r.test_std is not None else float("nan")
    return stats.StatReport(r.test_r2, se, {}, 0, 0, 0, 0)


def one_way_table(results: list[ProbeResult], levels=stats.LEVELS) -> list[dict]:
    """Best activation-mode probe vs best embedding probe, per dataset and K."""
    rows = []
    for ds in sorted({r.dataset for r in results}):
        for K in sorted({r.K for r in results if r.dataset == ds}):
            sub = [r for r in results if r.dataset == ds and r.K == K and r.test_r2 is not None]
            adv = [r for r in sub if r.mode in analysis.ACTIVATION_MODES]
            base = [r for r in sub if r.mode == "embeddings"]
            if not adv or not base:
                continue
            a, b = max(adv, key=lambda r: r.test_r2), max(base, key=lambda r: r.test_r2)
            row = {"dataset": ds, "K": K, "advanced": a.probe_type, "advanced_r2": a.test_r2,
                   "baseline": b.probe_type, "baseline_r2": b.test_r2}
            try:
                cmp = stats.compare_one_way(_report_from(a), _report_from(b), levels)
                row.update(z=cmp.z, p_one_sided=cmp.p_one_sided,
                           ci_overlap={str(k): v for k, v in cmp.ci_overlap.items()})
            except ValueError as exc:
                row.update(z=None, p_one_sided=None, note=str(exc))
            rows.append(row)
    return rows


def mlp_vs_linear_table(results: list[ProbeResult], levels=stats.LEVELS) -> dict:
    """Two-sided CI comparison of matched MLP and linear probes."""
    index = {(r.dataset, r.K, r.mode, r.layer, r.kind): r for r in results}
    pairs = []
    for (ds, K, mode, layer, kind), lin in sorted(index.items(), key=lambda kv: str(kv[0])):
        if kind != "linear":
            continue
        mlp = index.get((ds, K, mode, layer, "mlp"))
        if mlp is not None:
            pairs.append(stats.compare_two_sided(_report_from(lin), _report_from(mlp), levels))
    n = len(pairs)
    table = {}
    for label, outcomes in [("Absolute", [p.absolute for p in pairs])] + [
        (f"{lvl}% Two-Sided CI", [p.per_level[lvl] for p in pairs]) for lvl in levels
    ]:
        table[label] = {o: outcomes.count(o) for o in ("mlp_wins", "tie", "linear_wins")}
    return {"n_pairs": n, "table": table}


def _write_mlp_vs_linear_csv(summary: dict, path: Path) -> None:
    n = summary["n_pairs"]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "mlp_wins", "tie", "linear_wins", "n"])
        for label, counts in summary["table"].items():
            w.writerow([label, counts["mlp_wins"], counts["tie"], counts["linear_wins"], n])


REPORT_SECTIONS = ("probe", "stats", "coherence", "allan", "grid")


def cmd_report(args) -> int:
    run = Path(args.run_dir)
    csv_path = Path(args.results_csv) if args.results_csv else run / PROBE_CSV
    if not csv_path.exists():
        raise InputError(f"no probe results at {csv_path}")
    run.mkdir(parents=True, exist_ok=True)
    results = read_results_csv(csv_path)
    report: dict = {"sections": {}, "missing": []}
    report["sections"]["probe"] = [_clean(r.csv_row()) for r in results]

    if any(r.test_std is not None for r in results):
        mvl = mlp_vs_linear_table(results)
        report["sections"]["stats"] = {
            "one_way": _clean(one_way_table(results)),
            "mlp_vs_linear": mvl,
            "methods": stats.METHOD_NOTES,
        }
        _write_mlp_vs_linear_csv(mvl, run / "report_mlp_vs_linear.csv")
        with (run / "report_one_way.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["dataset", "K", "advanced", "advanced_r2", "baseline", "baseline_r2", "z", "p_one_sided"])
            for row in report["sections"]["stats"]["one_way"]:
                w.writerow([row["dataset"], row["K"], row["advanced"], f"{row['advanced_r2']:.6f}",
                            row["baseline"], f"{row['baseline_r2']:.6f}",
                            "" if row["z"] is None else f"{row['z']:.6f}",
                            "" if row["p_one_sided"] is None else f"{row['p_one_sided']:.6e}"])
        perm = run / "permtest.json"
        if perm.exists():
            report["sections"]["stats"]["permutation"] = json.loads(perm.read_text(encoding="utf-8"))
    else:
        report["missing"].append("stats")

    for section, fname in (("coherence", "coherence.json"), ("allan", "allan.json")):
        p = run / fname
        if p.exists():
            report["sections"][section] = json.loads(p.read_text(encoding="utf-8"))
        else:
            report["missing"].append(section)

    grids = {}
    for ds in sorted({r.dataset for r in results}):
        try:
            grid = analysis.layer_k_grid(results, ds)
        except ValueError:
            continue
        safe = "".join(ch if ch.isalnum() else "_" for ch in ds)
        analysis.write_grid_csv(grid, run / f"grid_{safe}.csv")
        analysis.plot_grid_svg(grid, run / f"grid_{safe}.svg")
        grids[ds] = {
            "layers": grid.layers, "K": grid.Ks, "values": _clean(grid.values.tolist()),
            "sources": {f"L{l} K{k}": v for (l, k), v in sorted(grid.sources.items())},
        }
    if grids:
        report["sections"]["grid"] = grids
    else:
        report["missing"].append("grid")

    koop = run / "koopman_sweep.json"
    if koop.exists():
        report["sections"]["koopman"] = json.loads(koop.read_text(encoding="utf-8"))
    report["complete"] = not report["missing"]
    _write_json(run / "report.json", report)
    status = "complete" if report["complete"] else f"INCOMPLETE (missing: {', '.join(report['missing'])})"
    print(f"report {status} -> {run / 'report.json'}")
    return EXIT_OK


# ---- synth / ingest-check ---------------------------------------------------------------------


def cmd_synth(args) -> int:
    data = _read_json(args.spec, "spec")
    episodes = int(data.pop("episodes", 20))
    T = int(data.pop("T", 300))
    if "spec" in data:
        data = data["spec"]
    if args.episodes is not None:
        episodes = args.episodes
    if args.T is not None:
        T = args.T
    try:
        spec = SynthSystemSpec.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid synthetic spec: {exc}") from exc
    ds = generate(spec, episodes, T, args.out)
    print(f"wrote {ds.name!r}: {len(ds.episodes)} episodes x {T} steps -> {args.out}")
    return EXIT_OK


def cmd_ingest_check(args) -> int:
    try:
        ds = load_dataset(args.path)
    except DatasetError as exc:
        print(f"INVALID {args.path}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    lengths = [ep.length for ep in ds.episodes]
    print(json.dumps({
        "name": ds.name, "episodes": len(ds.episodes), "steps": sum(lengths),
        "min_length": min(lengths), "max_length": max(lengths), "embed_dim": ds.embed_dim,
        "patch_count": ds.patch_count, "layers": list(ds.layers),
        "activation_dims": {str(k): v for k, v in ds.activation_dims.items()},
    }, indent=2, sort_keys=True))
    return EXIT_OK


# ---- argument parsing -------------------------------------------------------------------------


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--datasets", nargs="+", help="dataset directories (override config)")
    p.add_argument("--K", nargs="+", type=int, help="horizons")
    p.add_argument("--layers", nargs="+", type=int)
    p.add_argument("--kinds", nargs="+", choices=sorted(KIND_LABELS))
    p.add_argument("--modes", nargs="+", choices=["activations", "joint", "embeddings"])
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="cap on worker threads")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="worldprobe", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("spec", help="SynthSystemSpec JSON (may carry 'episodes' and 'T')")
    p.add_argument("out", help="output dataset directory")
    p.add_argument("--episodes", type=int)
    p.add_argument("--T", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest-check", help="validate a dataset directory")
    p.add_argument("path")
    p.set_defaults(func=cmd_ingest_check)

    for name, func, help_ in (
        ("probe", cmd_probe, "grid-search, fit and bootstrap every probe cell"),
        ("permtest", cmd_permtest, "permutation tests for probes with positive test R²"),
        ("bootstrap", cmd_bootstrap, "recompute bootstrap reports from saved predictions"),
        ("coherence", cmd_coherence, "temporal cosine coherence of pooled embeddings"),
        ("allan", cmd_allan, "Allan deviation profile of transitions"),
        ("koopman", cmd_koopman, "EDMD error-decomposition sweep"),
    ):
        p = sub.add_parser(name, help=help_)
        _add_run_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="merge run outputs into report.json")
    p.add_argument("run_dir")
    p.add_argument("--results-csv", help="use a pre-made results CSV in probe_results.csv layout instead of the run's")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
