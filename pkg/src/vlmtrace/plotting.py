"""Matplotlib figures for a pipeline directory (written as PNG next to the reports)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io import read_trace  # noqa: E402

METHOD_COLORS = {"ordinary": "#7f7f7f", "rna": "#1f77b4", "pla": "#d62728"}


def _save(fig, path: Path, meta: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps the PNG bytes reproducible
    info = {"Software": None, "Description": ";".join(f"{k}={meta[k]}" for k in sorted(meta))}
    fig.savefig(path, dpi=100, metadata=info)
    plt.close(fig)
    return path


def plot_loss_traces(trace_dir: Path, methods, n_qa: int, path: Path, meta: dict) -> Path:
    fig, axes = plt.subplots(1, len(methods), figsize=(4 * len(methods), 3.2), sharey=True, squeeze=False)
    for ax, m in zip(axes[0], methods):
        for qa in range(n_qa):
            p = trace_dir / f"{m}-qa{qa}.csv"
            if p.exists():
                t = read_trace(p)
                ax.plot(t[:, 0], t[:, 1], lw=0.8, label=f"qa {qa}")
        ax.set_title(m)
        ax.set_xlabel("step")
        ax.set_yscale("log")
    axes[0][0].set_ylabel("target loss (mean over images)")
    axes[0][-1].legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path, meta)


def plot_headline(headline: dict, path: Path, meta: dict) -> Path:
    methods = list(headline)
    suspects = sorted({s for m in methods for s in headline[m]["per_suspect"]})
    x = np.arange(len(suspects) + 1)
    w = 0.8 / max(len(methods), 1)
    fig, ax = plt.subplots(figsize=(max(6, 1.1 * len(x)), 3.6))
    for i, m in enumerate(methods):
        vals = [headline[m]["per_suspect"].get(s, 0.0) for s in suspects] + [headline[m]["mean"]]
        ax.bar(x + (i - (len(methods) - 1) / 2) * w, vals, w, label=m, color=METHOD_COLORS.get(m))
    ax.set_xticks(x, suspects + ["mean"], rotation=30, ha="right", fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_ylabel("TMR on fine-tuned suspect")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path, meta)


def plot_robustness(cells: dict, path: Path, meta: dict) -> Path:
    # cells keyed "suspect|method|transform|surgery"
    labels, vals = {}, {}
    for key, v in cells.items():
        _, method, t, s = key.split("|")
        lab = t if s == "none" else (s if t == "none" else f"{t} + {s}")
        labels.setdefault(lab, None)
        vals.setdefault((method, lab), []).append(v)
    methods = sorted({m for m, _ in vals})
    labs = list(labels)
    fig, ax = plt.subplots(figsize=(7, max(3, 0.22 * len(labs) + 1)))
    y = np.arange(len(labs))
    h = 0.8 / max(len(methods), 1)
    for i, m in enumerate(methods):
        ax.barh(y + i * h, [np.mean(vals.get((m, lab), [0.0])) for lab in labs], h, label=m,
                color=METHOD_COLORS.get(m))
    ax.set_yticks(y + h * (len(methods) - 1) / 2, labs, fontsize=6)
    ax.set_xlim(0, 1)
    ax.set_xlabel("mean TMR over fine-tuned suspects")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path, meta)


def plot_ablation(ablation: dict, path: Path, meta: dict) -> Path:
    titles = {"model-lr": "model learning rate", "epochs": "fine-tuning epochs",
              "samples": "fine-tuning samples"}
    kinds = [k for k in titles if ablation.get(k)]
    fig, axes = plt.subplots(1, max(len(kinds), 1), figsize=(4 * max(len(kinds), 1), 3.2), squeeze=False)
    for ax, k in zip(axes[0], kinds):
        pts = sorted(ablation[k])
        xs = [p[0] for p in pts]
        if k == "model-lr":
            xs = list(range(len(pts)))
            ax.set_xticks(xs, [f"{p[0]:g}" for p in pts], rotation=30, fontsize=7)
        ax.plot(xs, [p[1] for p in pts], "o-", color=METHOD_COLORS["pla"])
        ax.set_title(titles[k])
        ax.set_ylim(0, 1)
    axes[0][0].set_ylabel("TMR on fine-tuned suspects")
    fig.tight_layout()
    return _save(fig, path, meta)


def render_figures(run, summary: dict) -> list[Path]:
    meta = {"config_hash": summary["config_hash"], "released_checksum": summary["released_checksum"]}
    fig_dir = run.path("figures")
    out = [plot_loss_traces(run.path("traces"), list(run.cfg.attacks), len(run.cfg.qa_pairs),
                            fig_dir / "loss_traces.png", meta),
           plot_headline(summary["headline"], fig_dir / "headline_tmr.png", meta)]
    if summary.get("robust_cells"):
        out.append(plot_robustness(summary["robust_cells"], fig_dir / "robustness.png", meta))
    if summary.get("ablation"):
        out.append(plot_ablation(summary["ablation"], fig_dir / "ablation.png", meta))
    return out
