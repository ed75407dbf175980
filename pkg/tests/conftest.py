import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from worldprobe.dataset import Episode, TrajectoryDataset  # noqa: E402
from worldprobe.synth import SynthSystemSpec, simulate, to_dataset  # noqa: E402

DATA = Path(__file__).parent / "data"


def make_dataset(lengths=(12, 9), d=3, n_patch=2, layers=(7, 15), A=5, seed=0, name="toy"):
    rng = np.random.default_rng(seed)
    eps = []
    for i, T in enumerate(lengths):
        patches = rng.normal(size=(T, n_patch, d)).astype("<f4")
        acts = {layer: rng.normal(size=(T, A)).astype("<f4") for layer in layers}
        eps.append(Episode(f"ep{i}", patches, acts))
    return TrajectoryDataset(name, tuple(eps), d, n_patch, tuple(layers), {l: A for l in layers})


@pytest.fixture
def toy_dataset():
    return make_dataset()


@pytest.fixture(scope="session")
def small_synth():
    spec = SynthSystemSpec(state_dim=4, activation_dim=12, seed=0, layers=(7, 15))
    return spec, to_dataset(spec, simulate(spec, 4, 120))
