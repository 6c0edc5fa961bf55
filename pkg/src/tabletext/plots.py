"""Static figures: attention bar charts, loss curves, metric comparisons.

Everything renders through the Agg backend straight to image files, so the
plotting path works on headless machines.
"""

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import TABLE_COLUMNS

BAR_COLOR = "#4878a8"
HILITE_COLOR = "#c44e52"


def attention_step_figure(step, out_path, entity_names=None, record_labels=None):
    """Bar charts for one decoding step.

    Hierarchical traces get two panels: entity weights on top, record
    weights of the strongest entity below. Flat traces get a single panel
    over the linearized records. Label lists are optional; indices are used
    when they are absent.
    """
    alpha = np.asarray(step.alpha, dtype=float)
    if not step.beta:
        fig, ax = plt.subplots(figsize=(max(6.0, 0.45 * len(alpha)), 3.2))
        labels = entity_names if entity_names else [str(i) for i in range(len(alpha))]
        ax.bar(range(len(alpha)), alpha, color=BAR_COLOR)
        ax.set_xticks(range(len(alpha)))
        ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
        ax.set_ylim(0.0, 1.0)
        ax.set_ylabel("record weight")
        ax.set_title(f"step {step.t}: {step.token!r}")
        fig.tight_layout()
        fig.savefig(out_path, dpi=120)
        plt.close(fig)
        return str(out_path)

    top = int(np.argmax(alpha))
    beta_top = np.asarray(step.beta[top], dtype=float)
    fig, (ax_ent, ax_rec) = plt.subplots(2, 1, figsize=(max(6.0, 0.6 * len(alpha)), 5.4))

    ent_labels = entity_names if entity_names else [str(i) for i in range(len(alpha))]
    colors = [HILITE_COLOR if i == top else BAR_COLOR for i in range(len(alpha))]
    ax_ent.bar(range(len(alpha)), alpha, color=colors)
    ax_ent.set_xticks(range(len(alpha)))
    ax_ent.set_xticklabels(ent_labels, rotation=30, ha="right", fontsize=8)
    ax_ent.set_ylim(0.0, 1.0)
    ax_ent.set_ylabel("entity weight")
    ax_ent.set_title(f"step {step.t}: {step.token!r}")

    rec_labels = (
        record_labels[top]
        if record_labels and top < len(record_labels)
        else [str(j) for j in range(len(beta_top))]
    )
    ax_rec.bar(range(len(beta_top)), beta_top, color=BAR_COLOR)
    ax_rec.set_xticks(range(len(beta_top)))
    ax_rec.set_xticklabels(rec_labels, rotation=45, ha="right", fontsize=7)
    ax_rec.set_ylim(0.0, 1.0)
    ax_rec.set_ylabel("record weight")
    ax_rec.set_title(f"records of {ent_labels[top]}")

    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return str(out_path)


def attention_figures(trace, out_dir, entity_names=None, record_labels=None):
    """One image per decoding step; returns the written paths."""
    paths = []
    for step in trace:
        out_path = f"{out_dir}/step-{step.t:03d}.png"
        paths.append(attention_step_figure(step, out_path, entity_names, record_labels))
    return paths


def loss_curve_figure(curve_path, out_path):
    """Loss per update with the learning-rate schedule on a twin axis."""
    updates, lrs, losses = [], [], []
    with open(curve_path, "r", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            updates.append(int(row["update"]))
            lrs.append(float(row["lr"]))
            losses.append(float(row["loss"]))

    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    ax.plot(updates, losses, color=BAR_COLOR, linewidth=1.0, label="loss")
    ax.set_xlabel("update")
    ax.set_ylabel("per-token NLL")
    ax.grid(True, alpha=0.3)
    if updates:
        ax_lr = ax.twinx()
        ax_lr.step(updates, lrs, where="post", color=HILITE_COLOR, linewidth=1.0, label="lr")
        ax_lr.set_ylabel("learning rate")
        ax_lr.set_yscale("log")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return str(out_path)


def metrics_figure(rows, out_path):
    """Grouped bars, one group per metric column, one bar per system."""
    labels = list(rows)
    n_sys = len(labels)
    n_col = len(TABLE_COLUMNS)
    width = 0.8 / max(n_sys, 1)
    fig, ax = plt.subplots(figsize=(1.6 * n_col, 4.2))
    for s, label in enumerate(labels):
        rep = rows[label]
        values = (rep.bleu, rep.rg_p, rep.rg_num, rep.cs_p, rep.cs_r, rep.cs_f1, rep.co)
        offsets = np.arange(n_col) + (s - (n_sys - 1) / 2.0) * width
        ax.bar(offsets, values, width=width, label=label)
    ax.set_xticks(np.arange(n_col))
    ax.set_xticklabels(TABLE_COLUMNS)
    ax.set_ylabel("score")
    ax.legend(fontsize=8)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return str(out_path)
