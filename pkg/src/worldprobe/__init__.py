"""Probe agent activations for latent state-transition knowledge."""

from worldprobe.dataset import (
    DatasetError,
    Episode,
    SplitSpec,
    TrajectoryDataset,
    TransitionSample,
    chronological_split,
    compute_transitions,
    load_dataset,
    mean_pool,
    write_dataset,
)

__all__ = [
    "DatasetError",
    "Episode",
    "SplitSpec",
    "TrajectoryDataset",
    "TransitionSample",
    "chronological_split",
    "compute_transitions",
    "load_dataset",
    "mean_pool",
    "write_dataset",
]

__version__ = "0.1.0"
