"""Figures written next to the CSV outputs of the command-line tool."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.collections import LineCollection  # noqa: E402

from .network import Network  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def plot_trace(trace: list, path) -> None:
    it = [r["iteration"] for r in trace]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(it, [r["objective"] for r in trace], lw=0.6, alpha=0.5, label="batch objective")
    ax.plot(it, [r["smoothed"] for r in trace], lw=1.5, label="window mean")
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean log-likelihood")
    if any(r.get("t_rmsle") is not None for r in trace):
        ax2 = ax.twinx()
        ax2.plot(it, [r.get("t_rmsle", np.nan) for r in trace], color="C3", lw=1, label="RMSLE(T)")
        ax2.set_ylabel("RMSLE of T", color="C3")
    ax.legend(loc="lower right", fontsize=8)
    _save(fig, path)


def plot_two_arc(expected_time, expected_loss, scan_x, scan_loss, path) -> None:
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3.2))
    k = np.arange(len(expected_time))
    a.semilogy(k, expected_time, "o-", label="match expected time")
    a.plot(np.arange(len(expected_loss)), expected_loss, "s-", label="minimize expected loss")
    a.set_xlabel("iteration")
    a.set_ylabel("x")
    a.legend(fontsize=8)
    b.plot(scan_x, scan_loss)
    b.axvline(2.0, ls=":", color="gray")
    b.set_xlabel("x")
    b.set_ylabel("expected MSLE")
    _save(fig, path)


def plot_network_times(net: Network, T, path, title: str = "") -> None:
    T = np.asarray(T, dtype=float)
    pace = T * 60.0 / net.length  # s/m
    # offset each direction slightly so two-way streets show both arcs
    dx = net.x[net.head] - net.x[net.tail]
    dy = net.y[net.head] - net.y[net.tail]
    norm = np.hypot(dx, dy)
    norm[norm == 0] = 1.0
    off = 0.04 * np.median(net.length)
    ox, oy = dy / norm * off, -dx / norm * off
    segs = np.stack([np.column_stack([net.x[net.tail] + ox, net.y[net.tail] + oy]),
                     np.column_stack([net.x[net.head] + ox, net.y[net.head] + oy])], axis=1)
    fig, ax = plt.subplots(figsize=(5, 5))
    lc = LineCollection(segs, array=pace, cmap="viridis", linewidths=2)
    ax.add_collection(lc)
    ax.autoscale()
    ax.set_aspect("equal")
    fig.colorbar(lc, ax=ax, label="pace (s/m)")
    if title:
        ax.set_title(title)
    _save(fig, path)


def plot_predictions(observed, predicted, path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.loglog(observed, predicted, ".", ms=3, alpha=0.5)
    lo = min(np.min(observed), np.min(predicted))
    hi = max(np.max(observed), np.max(predicted))
    ax.plot([lo, hi], [lo, hi], "k:", lw=1)
    ax.set_xlabel("observed time (min)")
    ax.set_ylabel("predicted time (min)")
    _save(fig, path)


def plot_leaderboard(rows: list, path) -> None:
    ok = [r for r in rows if np.isfinite(r["val_rmsle"])]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if ok:
        sc = ax.scatter([r["eta"] for r in ok], [r["val_rmsle"] for r in ok],
                        c=np.log10([r["gamma"] for r in ok]), cmap="coolwarm")
        fig.colorbar(sc, ax=ax, label="log10 gamma")
    ax.set_xscale("log")
    ax.set_xlabel("learning rate")
    ax.set_ylabel("validation RMSLE")
    _save(fig, path)
