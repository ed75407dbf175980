import json

import numpy as np
import pytest

from worldprobe.dataset import chronological_split, compute_transitions, load_dataset
from worldprobe.probes import TrainConfig, fit_linear
from worldprobe.stats import r2_score
from worldprobe.synth import SynthSystemSpec, generate, oracle_r2, simulate, to_dataset


def test_torus_states_quarter_turns():
    spec = SynthSystemSpec(kind="torus_rotation", alpha=0.25, x0=0.0, obs_noise=0.0, patch_count=1)
    sim = simulate(spec, 1, 6)[0]
    np.testing.assert_allclose(sim.latent[:, 0], [0, 0.25, 0.5, 0.75, 0, 0.25], atol=1e-12)
    np.testing.assert_allclose(sim.clean[1], [0.0, 1.0], atol=1e-12)


def test_zero_drift_zero_noise_gives_zero_targets():
    spec = SynthSystemSpec(drift_scale=0.0, obs_noise=0.0, act_noise=0.0, proc_noise=0.0, state_dim=3,
                           activation_dim=4)
    ds = to_dataset(spec, simulate(spec, 2, 20))
    for K in (1, 5):
        assert np.all(compute_transitions(ds, K, 15).Y == 0)


def test_uninformative_activations_are_unpredictive():
    spec = SynthSystemSpec(state_dim=4, activation_dim=16, informative=False, seed=3)
    ds = to_dataset(spec, simulate(spec, 4, 200))
    tr, va, te = chronological_split(compute_transitions(ds, 10, 15, "activations"))
    probe = fit_linear(tr, TrainConfig(), lr=1e-2, lam=1e-4, epochs=100)
    assert r2_score(te.Y, probe(te.X)) <= 0.02


def test_generate_is_byte_identical(tmp_path):
    spec = SynthSystemSpec(state_dim=3, activation_dim=5, layers=(7, 15))
    generate(spec, 2, 15, tmp_path / "a")
    generate(spec, 2, 15, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    saved = json.loads((tmp_path / "a" / "synth_spec.json").read_text())
    assert SynthSystemSpec.from_dict(saved["spec"]) == spec


def test_generate_round_trips_through_loader(tmp_path):
    spec = SynthSystemSpec(kind="torus_rotation", activation_dim=6)
    ds = generate(spec, 3, 11, tmp_path)
    again = load_dataset(tmp_path)
    assert ds.embed_dim == 2 and len(again.episodes) == 3 and again.episodes[0].length == 11


def test_seed_changes_data():
    a = simulate(SynthSystemSpec(state_dim=2, activation_dim=3, seed=0), 1, 10)[0]
    b = simulate(SynthSystemSpec(state_dim=2, activation_dim=3, seed=1), 1, 10)[0]
    assert not np.allclose(a.patches, b.patches)


def test_patch_offsets_average_to_pooled_view():
    spec = SynthSystemSpec(state_dim=3, activation_dim=4, obs_noise=0.0, patch_count=3)
    sim = simulate(spec, 1, 8)[0]
    spread = sim.patches - sim.clean[:, None, :]
    # Offsets are fixed per patch, so the spread is the same at every step.
    np.testing.assert_allclose(spread, np.broadcast_to(spread[0], spread.shape), atol=1e-12)


@pytest.mark.parametrize("bad", [
    {"kind": "lorenz"}, {"obs_noise": -1.0}, {"act_map": "relu"}, {"kind": "linear_contraction", "rho": 1.5},
    {"state_dim": 0}, {"colour": "blue"},
])
def test_invalid_specs(bad):
    with pytest.raises(ValueError):
        SynthSystemSpec.from_dict(bad)


def test_oracle_exact_for_noise_free_contraction():
    spec = SynthSystemSpec(kind="linear_contraction", rho=0.9, obs_noise=0.0, state_dim=3, activation_dim=4)
    assert oracle_r2(spec, 1, "embeddings", episodes=5, T=40) == pytest.approx(1.0, abs=1e-9)


def test_oracle_activations_beat_embeddings():
    spec = SynthSystemSpec(state_dim=16, activation_dim=64, seed=0)
    for K in (1, 30):
        assert oracle_r2(spec, K, "activations") >= oracle_r2(spec, K, "embeddings")


def test_oracle_without_drift_is_uninformative():
    spec = SynthSystemSpec(state_dim=4, activation_dim=8, drift_scale=0.0)
    assert oracle_r2(spec, 3, "activations") <= 0.02


def test_oracle_refuses_datasets(toy_dataset):
    with pytest.raises(TypeError):
        oracle_r2(toy_dataset, 1)
