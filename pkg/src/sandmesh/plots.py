"""Figures for sweep tables: speedup, total runtime and communication share."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from sandmesh.perfmodel import SweepRow  # noqa: E402

FIGURE_NAMES = ("speedup.png", "runtime.png", "comm_breakdown.png")

_STYLE = {
    "figure.figsize": (5.0, 3.4),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "savefig.dpi": 120,
}


def _save(fig: plt.Figure, path: Path) -> Path:
    fig.tight_layout()
    # no Software tag: keeps PNG bytes reproducible
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def render_sweep_figures(rows: Sequence[SweepRow], outdir: str | Path) -> list[Path]:
    """Write the three scaling figures into `outdir` and return their paths."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    n = [r.n_nodes for r in rows]
    paths = []
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.plot(n, [r.ideal_speedup for r in rows], "k:", label="ideal")
        ax.plot(n, [r.speedup for r in rows], "o", label="simulated")
        ax.set_xlabel("nodes")
        ax.set_ylabel("speedup")
        ax.legend(loc="upper left")
        paths.append(_save(fig, out / FIGURE_NAMES[0]))

        fig, ax = plt.subplots()
        ax.plot(n, [r.report.wall_time_s / 60.0 for r in rows], "o-")
        ax.set_xlabel("nodes")
        ax.set_ylabel("total runtime (min)")
        paths.append(_save(fig, out / FIGURE_NAMES[1]))

        fig, ax = plt.subplots()
        comm = [100.0 * r.report.comm_fraction for r in rows]
        compute = [100.0 - c for c in comm]
        labels = [str(x) for x in n]
        ax.bar(labels, compute, label="analysis")
        ax.bar(labels, comm, bottom=compute, label="communication")
        ax.set_xlabel("nodes")
        ax.set_ylabel("share of runtime (%)")
        ax.set_ylim(0, 100)
        ax.legend(loc="lower left")
        paths.append(_save(fig, out / FIGURE_NAMES[2]))
    return paths
