"""Static PNG figures for the report command."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamps or version strings, so reruns give identical bytes
_META = {"Software": None}


def _save(fig, path: Path):
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def statistic_figure(path, times, statistic, windows, title: str = ""):
    fig, ax = plt.subplots(figsize=(8, 3))
    ax.semilogy(times, np.maximum(statistic, 1e-12), lw=0.8)
    for w in windows:
        ax.axvspan(w.lo, w.hi, color="tab:orange", alpha=0.2)
    ax.set_xlabel("time [s]")
    ax.set_ylabel("normalized MSD")
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, Path(path))


def cir_figure(path, series, max_delay: float = 0.03):
    n = min(series.taps.shape[1], int(max_delay * series.tap_rate))
    mag = 20 * np.log10(np.abs(series.taps[:, :n]) + 1e-12)
    top = mag.max()
    fig, ax = plt.subplots(figsize=(8, 3))
    extent = (series.times[0], series.times[-1], 1e3 * n / series.tap_rate, 0.0)
    ax.imshow(mag.T, aspect="auto", extent=extent, vmin=top - 40, vmax=top, cmap="viridis")
    ax.set_xlabel("time [s]")
    ax.set_ylabel("delay [ms]")
    ax.set_title(series.link)
    fig.tight_layout()
    _save(fig, Path(path))


def trajectory_figure(path, nav_csv, cfg):
    est = np.loadtxt(nav_csv, delimiter=",", skiprows=1, ndmin=2)
    truth = cfg.target.trajectory.positions(est[:, 0])
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(truth[:, 0], truth[:, 1], "k-", lw=1, label="true")
    ax.plot(est[:, 1], est[:, 2], ".", ms=2, label="estimate")
    for node in cfg.nodes.values():
        ax.plot(node.position.x, node.position.y, "^", color="tab:red")
        ax.annotate(node.id, (node.position.x, node.position.y))
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.legend(loc="best")
    fig.tight_layout()
    _save(fig, Path(path))
