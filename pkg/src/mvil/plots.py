"""Figure rendering for the report paths; every plot lands next to its CSV."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def save_trajectory_figure(path, result, world=None) -> None:
    """Top-down x-y track plus z vs time for one run."""
    fig, axes = plt.subplots(2, 1, figsize=(8, 8))
    ax = axes[0]
    if world is not None:
        ts = np.linspace(0.0, world.traj_run.duration, 400)
        gt = np.array([world.traj_run.position(t) for t in ts])
        ax.plot(gt[:, 0], gt[:, 1], "k-", lw=1, label="ground truth")
    ax.plot(result.est_p[:, 0], result.est_p[:, 1], "C1--", lw=1, label="estimate")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.axis("equal")
    ax.legend(loc="best", fontsize=8)
    ax.grid(True, alpha=0.3)

    ax = axes[1]
    if world is not None:
        ax.plot(ts, gt[:, 2], "k-", lw=1, label="ground truth")
    ax.plot(result.t, result.est_p[:, 2], "C1--", lw=1, label="estimate")
    ax.set_xlabel("t [s]")
    ax.set_ylabel("z [m]")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_error_3sigma_figure(path, result) -> None:
    """Per-axis position error with the estimator's 3-sigma envelope."""
    fig, axes = plt.subplots(3, 1, figsize=(8, 7), sharex=True)
    for k, name in enumerate("xyz"):
        sig = 3.0 * np.sqrt(result.cov_pos_diag[:, k])
        axes[k].plot(result.t, result.err_pos[:, k], "C0-", lw=0.8, label="error")
        axes[k].plot(result.t, sig, "r--", lw=0.8, label=r"$\pm 3\sigma$")
        axes[k].plot(result.t, -sig, "r--", lw=0.8)
        axes[k].set_ylabel(f"{name} [m]")
        axes[k].grid(True, alpha=0.3)
    axes[0].legend(loc="upper right", fontsize=8)
    axes[2].set_xlabel("t [s]")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_nees_figure(path, t, nees_series, n_runs, dof=6, band=(4.8, 7.3), labels=None) -> None:
    """Average NEES over a Monte Carlo batch with the chi-square acceptance band."""
    fig, ax = plt.subplots(figsize=(8, 4))
    series = np.atleast_2d(np.asarray(nees_series))
    for i, s in enumerate(series):
        lbl = labels[i] if labels else (f"run set {i}" if series.shape[0] > 1 else "mean NEES")
        ax.plot(t[:len(s)], s, lw=1.0, label=lbl)
    ax.axhline(dof, color="k", lw=0.8, alpha=0.6)
    ax.axhspan(band[0], band[1], color="g", alpha=0.15,
               label=f"95% band (n={n_runs})")
    ax.set_xlabel("t [s]")
    ax.set_ylabel(f"NEES ({dof} dof)")
    ax.set_yscale("log")
    ax.legend(loc="best", fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_singular_values_figure(path, spectra: dict) -> None:
    """Observability spectra per regime, normalized by the largest singular value."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    markers = {"ideal": "o", "estimated": "s", "fej": "^"}
    for name, sv in spectra.items():
        sv = np.asarray(sv)
        ax.semilogy(np.arange(1, sv.size + 1), sv / sv[0],
                    marker=markers.get(name, "."), ms=4, lw=0.8, label=name)
    ax.set_xlabel("singular value index")
    ax.set_ylabel(r"$\sigma_i / \sigma_{max}$")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_timing_figure(path, table: dict) -> None:
    """Log-log per-update time vs nuisance keyframe count with fitted slopes."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    M = np.asarray(table["M"], dtype=float)
    for key, style in (("schmidt_us", "C0o-"), ("full_ekf_us", "C3s-")):
        label = key.replace("_us", "")
        slope = table.get(key.replace("_us", "_slope"))
        if slope is not None:
            label += f" (slope {slope:.2f})"
        ax.loglog(M, table[key], style, ms=4, lw=1.0, label=label)
    ax.set_xlabel("map keyframes in state (M)")
    ax.set_ylabel("update time [µs]")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_rmse_bars(path, names, rmses) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(range(len(names)), rmses, color="C0")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("mean position RMSE [m]")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
