"""Report figures rendered to files next to the delimited metrics streams:
training curves, code-usage histograms, and image grids."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402 - backend must be set first
import numpy as np

from . import autodiff as ad
from . import nets, quantizer
from .autodiff import Tensor


def _imshow(axis, img):
    if img.shape[0] == 1:
        axis.imshow(img[0], cmap="gray", vmin=-0.5, vmax=0.5)
    else:
        axis.imshow(np.clip(img.transpose(1, 2, 0) + 0.5, 0.0, 1.0))
    axis.set_axis_off()


def render_curves(path, history, keys, ylabel):
    steps = [r["step"] for r in history]
    fig, axis = plt.subplots(figsize=(7, 4))
    for key in keys:
        axis.plot(steps, [r[key] for r in history], label=key, linewidth=1.0)
    axis.set_xlabel("step")
    axis.set_ylabel(ylabel)
    axis.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_usage(path, counts):
    counts = np.asarray(counts)
    fig, axis = plt.subplots(figsize=(7, 3))
    axis.bar(np.arange(len(counts)), counts, width=1.0)
    axis.set_xlabel("code index")
    axis.set_ylabel("assignments")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_image_rows(path, rows, labels=None):
    """One subplot row per array of (N, C, H, W) images."""
    n = max(r.shape[0] for r in rows)
    fig, axes = plt.subplots(len(rows), n, figsize=(1.1 * n, 1.2 * len(rows)),
                             squeeze=False)
    for i, row in enumerate(rows):
        for j in range(n):
            axis = axes[i][j]
            if j < row.shape[0]:
                _imshow(axis, row[j])
            else:
                axis.set_axis_off()
        if labels:
            axes[i][0].set_title(labels[i], fontsize=8, loc="left")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_vqvae_report(out_dir, history, model, spec, dataset, n_show=8):
    """curves.png, usage.png and recon.png for a finished training run."""
    out_dir = Path(out_dir)
    if history:
        render_curves(out_dir / "curves.png", history,
                      ("recon_nll", "codebook_loss", "commit_loss"), "nats")
        render_curves(out_dir / "perplexity.png", history,
                      ("perplexity",), "perplexity")
    show = dataset.images[:n_show]
    with ad.no_grad():
        x = Tensor(show)
        z_e = model.encode(x)
        z_q, grid = model.quantize(z_e)
        recon = nets.mean_output(model.decode(z_q), spec)
    counts, _ = quantizer.codebook_stats(grid, model.codebook.size)
    render_usage(out_dir / "usage.png", counts)
    render_image_rows(out_dir / "recon.png", [show, recon],
                      labels=["original", "reconstruction"])


def render_prior_report(out_dir, history, pspec):
    """Prior loss curve against the uniform ln K floor."""
    if not history:
        return
    out_dir = Path(out_dir)
    steps = [r["step"] for r in history]
    positions = pspec.grid_h * pspec.grid_w
    fig, axis = plt.subplots(figsize=(7, 4))
    axis.plot(steps, [r["prior_nll"] / positions for r in history],
              label="prior_nll / position", linewidth=1.0)
    axis.axhline(math.log(pspec.codebook_size), color="gray", linestyle="--",
                 linewidth=1.0, label="uniform ln K")
    axis.set_xlabel("step")
    axis.set_ylabel("nats")
    axis.legend()
    fig.tight_layout()
    fig.savefig(out_dir / "prior_curve.png", dpi=110)
    plt.close(fig)
