"""Report figures rendered to files next to the CSV outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_figure(fig, path, dpi=150):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=dpi, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_network_trajectories(log, model, highlight=None, path=None):
    """All subsystem states and inputs over time, one highlighted."""
    T = log.steps
    t_x = np.arange(T + 1)
    t_u = np.arange(T)
    fig, (ax_x, ax_u) = plt.subplots(2, 1, figsize=(8, 6), sharex=True)
    for i in range(model.M):
        xs = log.x[:, model.state_slice(i)]
        us = log.u[:, model.input_slice(i)]
        kw = {"color": "0.7", "lw": 0.6, "alpha": 0.6, "zorder": 1}
        ax_x.plot(t_x, xs, **kw)
        ax_u.plot(t_u, us, **kw)
    if highlight is not None:
        ax_x.plot(t_x, log.x[:, model.state_slice(highlight)], color="k", lw=1.5, zorder=3)
        ax_u.plot(t_u, log.u[:, model.input_slice(highlight)], color="k", lw=1.5, zorder=3)
    ax_x.set_ylabel("state")
    ax_u.set_ylabel("input")
    ax_u.set_xlabel("time step")
    fig.suptitle("closed-loop trajectories, all subsystems")
    if path is not None:
        return save_figure(fig, path)
    return fig


def _bound_lines(constraints_for_i, table_values, steps):
    """Raw-unit tightened bound lines for scalar box half-spaces."""
    lines = []
    for j, hs in enumerate(constraints_for_i):
        h = hs.direction
        if h.size != 1 or h[0] == 0.0:
            continue
        c = table_values[j, :steps]
        lines.append(((1.0 - c) / h[0], np.sign(h[0])))
    return lines


def plot_subsystem_detail(log, model, constraints, table, i, bank=None, path=None):
    """State/input of one subsystem with tightened bounds and load samples."""
    T = log.steps
    t_x, t_u = np.arange(T + 1), np.arange(T)
    n_rows = 3 if bank is not None else 2
    fig, axes = plt.subplots(n_rows, 1, figsize=(8, 3 * n_rows), sharex=True)
    ax_x, ax_u = axes[0], axes[1]
    ax_x.plot(t_x, log.x[:, model.state_slice(i)], "k", lw=1.4, label="state")
    ax_x.plot(t_x, log.z[:, model.state_slice(i)], "r", lw=1.2, label="nominal")
    for line, _ in _bound_lines(constraints.state_for(i), table.state[i], T + 1):
        ax_x.plot(t_x, line, "b--", lw=0.9)
    ax_u.plot(t_u, log.u[:, model.input_slice(i)], "k", lw=1.4, label="input")
    ax_u.plot(t_u, log.v[:, model.input_slice(i)], "r", lw=1.2, label="nominal input")
    for line, _ in _bound_lines(constraints.input_for(i), table.input[i], T):
        ax_u.plot(t_u, line, "b--", lw=0.9)
    ax_x.legend(loc="upper right", fontsize=8)
    ax_u.legend(loc="upper right", fontsize=8)
    ax_x.set_ylabel("state")
    ax_u.set_ylabel("input")
    if bank is not None:
        ax_w = axes[2]
        sl = model.disturbance_slice(i)
        for l in range(min(bank.count, 40)):
            ax_w.plot(np.arange(T), bank.samples[l, :T, sl], color="orange",
                      lw=0.5, alpha=0.45, zorder=1)
        ax_w.plot(t_u, log.w[:, sl], "k", lw=1.3, zorder=3, label="realized")
        ax_w.legend(loc="upper right", fontsize=8)
        ax_w.set_ylabel("disturbance")
        ax_w.set_xlabel("time step")
    else:
        ax_u.set_xlabel("time step")
    fig.suptitle(f"subsystem {i}: trajectories, tightened bounds, load")
    if path is not None:
        return save_figure(fig, path)
    return fig


def plot_violation_frequencies(report, path=None, worst=6):
    """Per-step violation frequency for the worst constraints."""
    frame = report.per_step
    fig, ax = plt.subplots(figsize=(8, 4))
    if len(frame):
        ranked = (
            frame.groupby(["kind", "i", "j"])["frequency"].max().sort_values(ascending=False)
        )
        for kind, i, j in ranked.index[:worst]:
            sel = frame[(frame["kind"] == kind) & (frame["i"] == i) & (frame["j"] == j)]
            ax.plot(sel["t"], sel["frequency"], lw=1.0,
                    label=f"{kind} i={i} j={j}")
        level = 1.0 - frame["probability_level"].iloc[0]
        ax.axhline(level, color="r", ls="--", lw=1.0, label="allowed level")
        ax.legend(fontsize=7)
    ax.set_xlabel("time step")
    ax.set_ylabel("empirical violation frequency")
    fig.suptitle("chance-constraint violations across runs")
    if path is not None:
        return save_figure(fig, path)
    return fig
