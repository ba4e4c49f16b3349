"""Figure rendering for completed runs.

Reads only the files a run leaves behind (clients.csv, synthetic CSVs,
results.csv, kl.csv, loss JSONs), so figures can be regenerated at any time
without touching the trained artifacts.
"""

from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .config import ExperimentConfig
from .datagen import load_clients_csv
from .metrics import load_results_csv
from .server import load_synthetic_csv

_CMAP = plt.get_cmap("tab10")
_METHOD_COLORS = {"feddeo": "#2a6fbb", "prompts_only": "#c55a11",
                  "ceiling": "#5a5a5a", "fedavg": "#3f8f4e"}


def _save(fig, out: str, name: str) -> str:
    path = os.path.join(out, name)
    fig.savefig(path, dpi=130, bbox_inches="tight")
    plt.close(fig)
    return name


def fig_world(cfg: ExperimentConfig, out: str) -> str:
    """True data per client, colored by category, one panel per client."""
    clients = load_clients_csv(os.path.join(out, "clients.csv"))
    n = len(clients)
    cols = min(n, 3)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(3.2 * cols, 3.0 * rows),
                             squeeze=False, sharex=True, sharey=True)
    for ax in axes.flat:
        ax.set_axis_off()
    for i, c in enumerate(clients):
        ax = axes.flat[i]
        ax.set_axis_on()
        ax.scatter(c.train_x[:, 0], c.train_x[:, 1], c=[_CMAP(int(v) % 10) for v in c.train_y],
                   s=4, alpha=0.6, linewidths=0)
        ax.set_title(f"client {c.client_id} (domain {c.domain})", fontsize=9)
        ax.set_aspect("equal")
        ax.tick_params(labelsize=7)
    fig.suptitle("local training data", fontsize=11)
    return _save(fig, out, "fig_world.png")


def fig_synthetic(cfg: ExperimentConfig, out: str) -> str:
    """Synthetic samples against the true test data, per generation mode."""
    clients = load_clients_csv(os.path.join(out, "clients.csv"))
    test_x = np.vstack([c.test_x for c in clients])
    panels = [("description guided", os.path.join(out, "synthetic_feddeo.csv"))]
    prompts = os.path.join(out, "synthetic_prompts.csv")
    if os.path.exists(prompts):
        panels.append(("class embedding only", prompts))
    fig, axes = plt.subplots(1, len(panels), figsize=(4.2 * len(panels), 4.0),
                             squeeze=False, sharex=True, sharey=True)
    for ax, (title, path) in zip(axes.flat, panels):
        synth = load_synthetic_csv(path)
        ax.scatter(test_x[:, 0], test_x[:, 1], c="#cccccc", s=3, alpha=0.4,
                   linewidths=0, label="true test")
        ax.scatter(synth.x[:, 0], synth.x[:, 1], c=[_CMAP(int(v) % 10) for v in synth.y],
                   s=5, alpha=0.8, linewidths=0)
        ax.set_title(title, fontsize=10)
        ax.set_aspect("equal")
        ax.tick_params(labelsize=7)
        ax.legend(fontsize=7, loc="upper right")
    fig.suptitle("synthetic data vs. true test data", fontsize=11)
    return _save(fig, out, "fig_synthetic.png")


def fig_accuracy(cfg: ExperimentConfig, out: str) -> str:
    tables = load_results_csv(os.path.join(out, "results.csv"))
    clients = sorted({cid for t in tables for cid in t.per_client})
    width = 0.8 / len(tables)
    fig, ax = plt.subplots(figsize=(1.1 + 1.4 * len(clients), 3.6))
    xs = np.arange(len(clients), dtype=float)
    for j, t in enumerate(tables):
        vals = [t.per_client.get(cid, 0.0) for cid in clients]
        color = _METHOD_COLORS.get(t.method, _CMAP(j))
        ax.bar(xs + (j - (len(tables) - 1) / 2) * width, vals, width,
               label=f"{t.method} ({t.average:.3f})", color=color)
    ax.set_xticks(xs, [f"c{cid}" for cid in clients])
    ax.set_ylim(0, 1.02)
    ax.set_ylabel("test accuracy")
    ax.set_title("per-client accuracy (legend shows the mean)", fontsize=10)
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    return _save(fig, out, "fig_accuracy.png")


def fig_kl(cfg: ExperimentConfig, out: str) -> str:
    rows: dict[str, dict[int, float]] = {}
    with open(os.path.join(out, "kl.csv")) as fh:
        next(fh)
        for line in fh:
            method, cid, value = line.strip().split(",")[:3]
            rows.setdefault(method, {})[int(cid)] = float(value)
    clients = sorted({cid for vals in rows.values() for cid in vals})
    width = 0.8 / max(len(rows), 1)
    fig, ax = plt.subplots(figsize=(1.1 + 1.4 * len(clients), 3.6))
    xs = np.arange(len(clients), dtype=float)
    for j, (method, vals) in enumerate(rows.items()):
        color = _METHOD_COLORS.get(method, _CMAP(j))
        mean = np.mean(list(vals.values()))
        ax.bar(xs + (j - (len(rows) - 1) / 2) * width,
               [vals.get(cid, 0.0) for cid in clients], width,
               label=f"{method} (mean {mean:.3f})", color=color)
    ax.set_xticks(xs, [f"c{cid}" for cid in clients])
    ax.set_ylabel("KL(true test || synthetic)")
    ax.set_title("distribution match per client (lower is better)", fontsize=10)
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    return _save(fig, out, "fig_kl.png")


def fig_losses(cfg: ExperimentConfig, out: str) -> str:
    fig, axes = plt.subplots(1, 3, figsize=(12.0, 3.4))
    with open(os.path.join(out, "pretrain_losses.json")) as fh:
        pre = json.load(fh)
    axes[0].plot(range(1, len(pre) + 1), pre, color="#2a6fbb")
    axes[0].set_title("denoiser pretraining", fontsize=10)
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("noise MSE")
    with open(os.path.join(out, "description_losses.json")) as fh:
        desc = json.load(fh)
    for cid, trace in sorted(desc.items(), key=lambda kv: int(kv[0])):
        axes[1].plot(range(1, len(trace) + 1), trace, label=f"c{cid}", alpha=0.8)
    axes[1].set_title("description training (per client)", fontsize=10)
    axes[1].set_xlabel("epoch")
    axes[1].legend(fontsize=7)
    with open(os.path.join(out, "classifier_losses.json")) as fh:
        clf = json.load(fh)
    for method, trace in clf.items():
        axes[2].plot(range(1, len(trace) + 1), trace,
                     label=method, color=_METHOD_COLORS.get(method))
    axes[2].set_title("classifier training", fontsize=10)
    axes[2].set_xlabel("epoch")
    axes[2].set_ylabel("cross entropy")
    axes[2].legend(fontsize=7)
    for ax in axes:
        ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, out, "fig_losses.png")


def fig_sweep(out: str, kind: str) -> str:
    """Mean accuracy vs. the swept knob, one line per method."""
    path = os.path.join(out, f"sweep_{kind}.csv")
    acc: dict[str, dict[int, list[float]]] = {}
    with open(path) as fh:
        next(fh)
        for line in fh:
            _, value, method, _, accuracy = line.strip().split(",")
            acc.setdefault(method, {}).setdefault(int(value), []).append(float(accuracy))
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    for j, (method, by_value) in enumerate(acc.items()):
        values = sorted(by_value)
        means = [float(np.mean(by_value[v])) for v in values]
        ax.plot(values, means, marker="o",
                label=method, color=_METHOD_COLORS.get(method, _CMAP(j)))
    label = {"R": "synthetic samples per (client, category)",
             "S": "description training epochs"}.get(kind, kind)
    ax.set_xlabel(label)
    ax.set_ylabel("mean test accuracy")
    ax.set_title(f"ablation over {kind}", fontsize=10)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    name = f"fig_sweep_{kind}.png"
    return _save(fig, out, name)


def render_all(cfg: ExperimentConfig, out: str) -> list[str]:
    files = [fig_world(cfg, out), fig_synthetic(cfg, out),
             fig_accuracy(cfg, out), fig_kl(cfg, out), fig_losses(cfg, out)]
    for kind in ("R", "S"):
        if os.path.exists(os.path.join(out, f"sweep_{kind}.csv")):
            files.append(fig_sweep(out, kind))
    return files
