"""Deterministic SVG output via matplotlib's Agg backend."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "worldprobe"


def new_figure(size=(6.0, 4.0)):
    fig, ax = plt.subplots(figsize=size)
    return fig, ax


def save_svg(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path
