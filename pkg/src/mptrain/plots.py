"""Figure rendering for evaluation and comparison reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def plot_curves(curves, path, ylabel, title=None, logy=False):
    """Overlay labeled MetricCurves on one time axis and save to `path`."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, curve in curves.items():
        ax.plot(curve.times, curve.values, label=label)
    ax.set_xlabel("time")
    ax.set_ylabel(ylabel)
    if logy:
        ax.set_yscale("log")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_spectra(spectra, path, title=None):
    """Energy spectra vs wavenumber on log-log axes."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, curve in spectra.items():
        k = np.arange(len(curve.values))
        ax.loglog(k[1:], np.maximum(curve.values[1:], 1e-300), label=label)
    ax.set_xlabel("wavenumber")
    ax.set_ylabel("kinetic energy")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_training_log(rows, path):
    """Loss components and mean discontinuity norm over epochs."""
    epochs = [r["epoch"] for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    axes[0].semilogy(epochs, [max(r["loss_gt"], 1e-300) for r in rows],
                     label="ground-truth loss")
    axes[0].semilogy(epochs, [max(r["loss_total"], 1e-300) for r in rows],
                     label="total loss", linestyle="--")
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("loss")
    axes[0].legend()
    axes[1].plot(epochs, [r["mean_delta_norm"] for r in rows],
                 label="mean discontinuity norm")
    ax2 = axes[1].twinx()
    ax2.semilogy(epochs, [max(r["mu"], 1e-300) for r in rows], color="gray",
                 alpha=0.6, label="penalty strength")
    axes[1].set_xlabel("epoch")
    axes[1].legend(loc="upper left")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
