"""Learning-curve SVGs: mean line and min-max band across seeds, one colour per label."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import numpy as np


def load_curves(paths) -> dict[str, dict[int, list[tuple[float, float]]]]:
    """label -> seed -> [(env_steps, mean_reward), ...]"""
    data: dict[str, dict[int, list[tuple[float, float]]]] = defaultdict(lambda: defaultdict(list))
    for path in paths:
        with Path(path).open() as fh:
            for row in csv.DictReader(fh):
                data[row["label"]][int(row["seed"])].append(
                    (float(row["env_steps"]), float(row["mean_reward"])))
    return data


def curve_bands(per_seed: dict[int, list[tuple[float, float]]]):
    """Interpolate every seed onto a shared step axis; returns (x, mean, lo, hi)."""
    series = [sorted(v) for v in per_seed.values() if v]
    x = np.array(sorted({s for ser in series for s, _ in ser}))
    ys = np.stack([np.interp(x, [s for s, _ in ser], [r for _, r in ser]) for ser in series])
    return x, ys.mean(0), ys.min(0), ys.max(0)


def emit_plot(curve_paths, output: str | Path, title: str | None = None) -> Path:
    curve_paths = list(curve_paths)
    if not curve_paths:
        raise ValueError("no curve files given")
    data = load_curves(curve_paths)
    if not data:
        raise ValueError("curve files contain no rows")
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    # fixed salt so element ids, and hence the file bytes, are reproducible
    matplotlib.rcParams["svg.hashsalt"] = "cnap"

    fig, ax = plt.subplots(figsize=(6, 4))
    for label in sorted(data):
        x, mean, lo, hi = curve_bands(data[label])
        (line,) = ax.plot(x, mean, label=label)
        ax.fill_between(x, lo, hi, color=line.get_color(), alpha=0.25, linewidth=0)
    ax.set_xlabel("env steps")
    ax.set_ylabel("mean reward")
    if title:
        ax.set_title(title)
    ax.legend(fontsize="small")
    output = Path(output)
    output.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(output, format="svg", metadata={"Date": None})
    plt.close(fig)
    return output
