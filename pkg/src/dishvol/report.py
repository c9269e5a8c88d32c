"""Figures and delimited outputs for reports and debugging.

All figures go through the Agg backend and straight to files; the CLI
report path drops them next to the JSON/CSV outputs.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_disparity_figure(disparity, path) -> None:
    """Color-mapped disparity map with invalid pixels masked out."""
    vals = np.ma.masked_where(~disparity.valid, disparity.values)
    fig, ax = plt.subplots(figsize=(8, 6))
    im = ax.imshow(vals, cmap="turbo")
    fig.colorbar(im, ax=ax, label="disparity (rectified px)")
    ax.set_title("disparity")
    ax.set_xlabel("rectified column")
    ax.set_ylabel("epipolar row")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_mesh_figure(mesh, plane, path) -> None:
    """3-D view of the food surface triangles, colored per item."""
    fig = plt.figure(figsize=(8, 6))
    ax = fig.add_subplot(111, projection="3d")
    food = [int(l) for l in np.unique(mesh.tri_label) if l >= 2]
    cmap = plt.get_cmap("tab10")
    for i, label in enumerate(food):
        tris = mesh.triangles[mesh.tri_label == label]
        if len(tris) == 0:
            continue
        heights = mesh.vertices @ plane.normal - plane.offset
        ax.plot_trisurf(mesh.vertices[:, 0], mesh.vertices[:, 1], heights,
                        triangles=tris, color=cmap(i % 10), alpha=0.85,
                        linewidth=0.1)
    ax.set_xlabel("x (mm)")
    ax.set_ylabel("y (mm)")
    ax.set_zlabel("height above dish (mm)")
    ax.set_title("food surface")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_error_histogram(signed_errors_pct, path) -> None:
    """Distribution of signed percentage errors across all estimates."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.hist(np.asarray(signed_errors_pct), bins=30, color="#4878d0",
            edgecolor="white")
    ax.axvline(0.0, color="k", linewidth=1)
    ax.set_xlabel("signed volume error (%)")
    ax.set_ylabel("estimates")
    ax.set_title("signed percentage error distribution")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_cv_histogram(cvs_pct, path) -> None:
    """Distribution of per-item coefficients of variation."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.hist(np.asarray(cvs_pct), bins=20, color="#d65f5f",
            edgecolor="white")
    ax.set_xlabel("per-item CV (%)")
    ax.set_ylabel("items")
    ax.set_title("estimate stability")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def write_metrics_csv(report, path) -> None:
    """Per-item metrics as a delimited table."""
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pair", "label", "true_ml", "n_estimates", "mean_ml",
                    "mape_pct", "cv_pct"])
        for it in report.items:
            w.writerow([it.pair, it.label, f"{it.true_ml:.6g}",
                        it.n_estimates, f"{it.mean_ml:.6g}",
                        f"{it.mape:.6g}", f"{it.cv:.6g}"])


def render_metrics_report(report, fig_dir) -> list:
    """All metrics figures into a directory; returns the written paths."""
    fig_dir = Path(fig_dir)
    fig_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if report.signed_errors_pct is not None and len(report.signed_errors_pct):
        p = fig_dir / "signed_error_hist.png"
        save_error_histogram(report.signed_errors_pct, p)
        written.append(p)
    cvs = [it.cv for it in report.items]
    if cvs:
        p = fig_dir / "cv_hist.png"
        save_cv_histogram(cvs, p)
        written.append(p)
    return written


def render_debug_artifacts(artifacts, report, debug_dir) -> list:
    """Disparity (16-bit PNG + figure) and mesh figure for one pair."""
    debug_dir = Path(debug_dir)
    debug_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if artifacts.disparity is not None:
        p16 = debug_dir / "disparity16.png"
        artifacts.disparity.to_png16(p16)
        written.append(p16)
        pfig = debug_dir / "disparity.png"
        save_disparity_figure(artifacts.disparity, pfig)
        written.append(pfig)
    if artifacts.mesh is not None and len(artifacts.mesh.triangles):
        pmesh = debug_dir / "mesh.png"
        save_mesh_figure(artifacts.mesh, report.dish_plane, pmesh)
        written.append(pmesh)
    return written
