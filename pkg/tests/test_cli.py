import csv
import json

import pytest

from conftest import DATA
from worldprobe.cli import main, permutation_tally, read_results_csv
from worldprobe.dataset import load_dataset
from worldprobe.probes import ProbeResult

SMALL_SPEC = {"state_dim": 4, "activation_dim": 12, "seed": 0, "layers": [15], "episodes": 4, "T": 150}
FAST = {"sweep_epochs": 5, "final_epochs": 20}


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.json").write_text(json.dumps(SMALL_SPEC))
    assert main(["synth", str(root / "spec.json"), str(root / "ds")]) == 0
    return root / "ds"


def write_config(path, **kw):
    cfg = {"K": [1, 10], "kinds": ["linear"], "modes": ["activations", "embeddings"],
           "grids": {"lr": [1e-2], "lam": [1e-7], "dropout": [0.1]}, "train": FAST,
           "stats": {"n_reps": 40, "n_perm": 9}}
    cfg.update(kw)
    path.write_text(json.dumps(cfg))
    return str(path)


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def test_synth_round_trip_and_determinism(tmp_path, dataset_dir):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps(SMALL_SPEC))
    assert main(["synth", str(spec), str(tmp_path / "again")]) == 0
    assert len(load_dataset(tmp_path / "again").episodes) == 4
    for f in sorted(p for p in dataset_dir.rglob("*") if p.is_file()):
        assert f.read_bytes() == (tmp_path / "again" / f.relative_to(dataset_dir)).read_bytes()


def test_synth_invalid_json(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{state_dim: 4")
    assert main(["synth", str(bad), str(tmp_path / "out")]) == 2
    assert "not valid JSON" in capsys.readouterr().err


def test_synth_invalid_field(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"kind": "lorenz"}))
    assert main(["synth", str(bad), str(tmp_path / "out")]) == 2


def test_ingest_check(dataset_dir, tmp_path, capsys):
    assert main(["ingest-check", str(dataset_dir)]) == 0
    assert json.loads(capsys.readouterr().out)["episodes"] == 4
    assert main(["ingest-check", str(tmp_path)]) == 2


def test_unknown_subcommand_is_invalid():
    assert main(["frobnicate"]) == 2


def test_probe_single_cell(tmp_path, dataset_dir):
    cfg = write_config(tmp_path / "c.json", datasets=[str(dataset_dir)], K=[10], modes=["joint"],
                       out_dir=str(tmp_path / "run"))
    assert main(["probe", "--config", cfg]) == 0
    rows = read_csv(tmp_path / "run" / "probe_results.csv")
    assert len(rows) == 1
    assert list(rows[0]) == list(ProbeResult.CSV_COLUMNS)
    assert all(v != "" for v in rows[0].values())
    assert rows[0]["probe_type"] == "Linear-Joint-L15" and rows[0]["dropout"] == "—"


def test_probe_activation_beats_embedding(tmp_path, dataset_dir):
    cfg = write_config(tmp_path / "c.json", datasets=[str(dataset_dir)], K=[10],
                       out_dir=str(tmp_path / "run"))
    assert main(["probe", "--config", cfg]) == 0
    r2 = {r["probe_type"]: float(r["test_r2"]) for r in read_csv(tmp_path / "run" / "probe_results.csv")}
    assert r2["Linear-Regular-L15"] > r2["Linear-Embedding"]


def test_probe_partial_failure_exit_code(tmp_path, dataset_dir):
    cfg = write_config(tmp_path / "c.json", datasets=[str(dataset_dir)], K=[1, 500], modes=["embeddings"],
                       out_dir=str(tmp_path / "run"))
    with pytest.warns(RuntimeWarning):
        assert main(["probe", "--config", cfg]) == 1
    report = json.loads((tmp_path / "run" / "probe_results.json").read_text())
    assert len(report["cells"]) == 1 and "K500" in report["failures"][0]["key"]


def test_probe_bad_config(tmp_path, dataset_dir):
    cfg = write_config(tmp_path / "c.json", datasets=[str(dataset_dir)], colour="red")
    assert main(["probe", "--config", cfg]) == 2
    cfg = write_config(tmp_path / "c.json", datasets=[str(dataset_dir)], layers=[99], out_dir=str(tmp_path))
    assert main(["probe", "--config", cfg]) == 2
    assert main(["probe", "--config", str(tmp_path / "missing.json")]) == 2


def test_flags_and_env_override_seed(tmp_path, dataset_dir, monkeypatch):
    cfg = write_config(tmp_path / "c.json", datasets=[str(dataset_dir)], K=[1], modes=["joint"],
                       out_dir=str(tmp_path / "a"), seed=0)
    monkeypatch.setenv("WORLDPROBE_SEED", "7")
    assert main(["probe", "--config", cfg]) == 0
    assert json.loads((tmp_path / "a" / "probe_results.json").read_text())["config"]["seed"] == 7
    assert main(["probe", "--config", cfg, "--seed", "3", "--out-dir", str(tmp_path / "b")]) == 0
    assert json.loads((tmp_path / "b" / "probe_results.json").read_text())["config"]["seed"] == 3


def test_permutation_tally_counts():
    rs = [ProbeResult("d", K, "linear", "joint", 15, 0.5, 0.3, 1e-3, 1e-8, None) for K in (1, 3, 10)]
    tally = permutation_tally([(r, 1 / 101) for r in rs], [1, 3, 10])
    assert tally["Total"]["Overall"] == "3/3"
    assert tally["L15 Linear"]["3"] == "1/1"
    tally = permutation_tally([(rs[0], 1 / 101), (rs[1], 0.2)], [1, 3, 10])
    assert tally["Total"]["Overall"] == "1/2" and tally["L15 Linear"]["10"] == "0/0"


def test_permtest_excludes_nonpositive_r2(tmp_path, dataset_dir):
    run = tmp_path / "run"
    cfg = write_config(tmp_path / "c.json", datasets=[str(dataset_dir)], K=[1, 10], modes=["activations"],
                       out_dir=str(run))
    assert main(["probe", "--config", cfg]) == 0
    results = read_results_csv(run / "probe_results.csv")
    positive = [r for r in results if r.test_r2 > 0]
    assert main(["permtest", "--config", cfg]) == 0
    tested = read_csv(run / "permtest.csv")
    assert len(tested) == len(positive)
    tally = json.loads((run / "permtest.json").read_text())["tally"]
    if positive:
        assert tally["Total"]["Overall"].endswith(f"/{len(positive)}")


def test_permtest_without_probe_results(tmp_path, dataset_dir):
    cfg = write_config(tmp_path / "c.json", datasets=[str(dataset_dir)], out_dir=str(tmp_path / "empty"))
    assert main(["permtest", "--config", cfg]) == 2


def test_permtest_null_dataset_rarely_succeeds(tmp_path):
    spec = tmp_path / "null.json"
    spec.write_text(json.dumps(dict(SMALL_SPEC, informative=False, name="null")))
    assert main(["synth", str(spec), str(tmp_path / "null")]) == 0
    cfg = write_config(tmp_path / "c.json", datasets=[str(tmp_path / "null")], K=[1, 3, 10],
                       modes=["activations"], out_dir=str(tmp_path / "run"),
                       stats={"n_reps": 20, "n_perm": 99})
    assert main(["probe", "--config", cfg]) == 0
    assert main(["permtest", "--config", cfg]) == 0
    tally = json.loads((tmp_path / "run" / "permtest.json").read_text())["tally"]
    if tally:
        ok, total = map(int, tally["Total"]["Overall"].split("/"))
        assert ok <= 1


def test_full_run_report_and_missing_allan(tmp_path, dataset_dir, capsys):
    run = tmp_path / "run"
    cfg = write_config(tmp_path / "c.json", datasets=[str(dataset_dir)], kinds=["linear", "mlp"],
                       modes=["activations", "joint", "embeddings"], out_dir=str(run),
                       koopman={"g": "cos:2", "N": [3], "M": [100, 1000]})
    for cmd in ("probe", "bootstrap", "coherence", "koopman"):
        assert main([cmd, "--config", cfg]) == 0, cmd
    assert main(["report", str(run)]) == 0
    report = json.loads((run / "report.json").read_text())
    assert report["complete"] is False and report["missing"] == ["allan"]
    assert "INCOMPLETE" in capsys.readouterr().out

    assert main(["allan", "--config", cfg]) == 0
    assert main(["report", str(run)]) == 0
    report = json.loads((run / "report.json").read_text())
    assert report["complete"] is True
    assert {"probe", "stats", "coherence", "allan", "grid"} <= set(report["sections"])
    stats = report["sections"]["stats"]
    assert len(stats["one_way"]) == 2
    assert stats["mlp_vs_linear"]["n_pairs"] == 6
    counts = stats["mlp_vs_linear"]["table"]["95% Two-Sided CI"]
    assert sum(counts.values()) == 6
    for name in ("grid_synthetic.svg", "coherence.svg", "allan_synthetic.svg", "koopman_sweep.svg",
                 "report_mlp_vs_linear.csv", "report_one_way.csv", "bootstrap.csv"):
        assert (run / name).exists(), name
    sweep = json.loads((run / "koopman_sweep.json").read_text())
    assert all(r["bound_holds"] for r in sweep["rows"])


def test_report_from_reference_csv(tmp_path):
    assert main(["report", str(tmp_path), "--results-csv", str(DATA / "reference_results.csv")]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    grid = report["sections"]["grid"]["long (10)"]
    cell = grid["values"][grid["layers"].index(15)][grid["K"].index(30)]
    assert cell == pytest.approx(0.5151)
    assert report["complete"] is False  # no coherence / Allan outputs alongside


def test_report_without_results(tmp_path):
    assert main(["report", str(tmp_path)]) == 2


def test_koopman_unknown_system(tmp_path):
    cfg = write_config(tmp_path / "c.json", out_dir=str(tmp_path), koopman={"system": "lorenz"})
    assert main(["koopman", "--config", cfg]) == 2


def test_probe_outputs_identical_across_threads(tmp_path, dataset_dir):
    base = dict(datasets=[str(dataset_dir)], K=[1, 10], kinds=["linear", "mlp"],
                grids={"lr": [1e-2, 1e-3], "lam": [1e-7, 1e-8], "dropout": [0.1]})
    outputs = []
    for threads, name in ((1, "a"), (3, "b"), (1, "c")):
        cfg = write_config(tmp_path / f"{name}.json", out_dir=str(tmp_path / name), threads=threads, **base)
        assert main(["probe", "--config", cfg]) == 0
        assert main(["permtest", "--config", cfg]) == 0
        outputs.append([(tmp_path / name / f).read_bytes()
                        for f in ("probe_results.csv", "probe_results.json", "permtest.csv", "permtest.json")])
    assert outputs[0] == outputs[1] == outputs[2]
