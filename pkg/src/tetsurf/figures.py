"""Matplotlib renderings written next to the delimited report files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def training_curve(history: list[dict], path):
    epochs = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(epochs, [h["l1"] for h in history], marker="o", label="L1")
    ax.semilogy(epochs, [h["eikonal"] for h in history], marker="s", label="eikonal")
    ax.semilogy(epochs, [h["total"] for h in history], marker="^", label="total")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def precondition_report(rows: list[dict], path):
    labels = [r["case"] for r in rows]
    before = [r["kappa_before"] for r in rows]
    after = [r["kappa_after"] for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(x - 0.2, before, width=0.4, label="before")
    ax.bar(x + 0.2, after, width=0.4, label="after")
    ax.set_xticks(x, labels, rotation=30)
    ax.set_ylabel("condition number")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def metrics_report(report: dict, path):
    keys = [k for k in ("cd", "ssdf", "vsdf", "ad_deg") if k in report]
    vals = [max(report[k], 1e-18) for k in keys]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.bar(range(len(keys)), vals)
    ax.set_yscale("log")
    ax.set_xticks(range(len(keys)), keys)
    ax.set_ylabel("value (log scale)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def skeleton_report(stats: dict, path):
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.bar([0, 1], [stats["n_vertices"], stats["n_edges"]])
    ax.set_yscale("log")
    ax.set_xticks([0, 1], ["vertices", "edges"])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def extraction_growth(log: list[dict], path):
    cols = [r["column"] for r in log]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(cols, [r["vertices"] for r in log], marker="o", label="vertices")
    ax.plot(cols, [r["edges"] for r in log], marker="s", label="edges")
    ax.plot(cols, [r["splits"] for r in log], marker="^", label="splits/pass")
    ax.set_yscale("log")
    ax.set_xlabel("neuron pass")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
