"""Figures written next to the JSON/CSV artifacts of a run."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}

GROUP_STYLE = {
    "loss_b_aligned": ("M_B aligned", "tab:red", "-"),
    "loss_b_conflicting": ("M_B conflicting", "tab:red", "--"),
    "loss_d_aligned": ("M_D aligned", "tab:blue", "-"),
    "loss_d_conflicting": ("M_D conflicting", "tab:blue", "--"),
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_dynamics(history: list[dict], path, title: str = "") -> Path:
    """Group training losses per epoch (left) and selection FPR (right)."""
    epochs = [h["epoch"] for h in history]
    with plt.rc_context(RC):
        fig, (ax_l, ax_f) = plt.subplots(1, 2, figsize=(7.5, 2.8))
        for key, (label, color, ls) in GROUP_STYLE.items():
            ys = [h.get(key) for h in history]
            if all(y is None for y in ys):
                continue
            ax_l.plot(epochs, [max(y, 1e-8) if y is not None else float("nan") for y in ys],
                      color=color, ls=ls, label=label)
        ax_l.set_yscale("log")
        ax_l.set_xlabel("epoch")
        ax_l.set_ylabel("mean training CE")
        ax_l.legend(frameon=False)
        fpr = [h.get("fpr") for h in history]
        if any(f is not None for f in fpr):
            ax_f.plot(epochs, [f if f is not None else float("nan") for f in fpr], color="k")
        else:
            ax_f.text(0.5, 0.5, "no selection\n(method without hybrids)", ha="center", va="center",
                      transform=ax_f.transAxes)
        ax_f.set_xlabel("epoch")
        ax_f.set_ylabel("selection FPR")
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_method_comparison(reports: dict, path) -> Path:
    """Grouped bars of mean accuracy with 95% CI error bars, one group per metric."""
    metrics = [("overall_acc", "overall"), ("aligned_acc", "aligned"), ("conflicting_acc", "conflicting")]
    methods = list(reports)
    width = 0.8 / max(len(methods), 1)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5.5, 3.0))
        for j, m in enumerate(methods):
            means = [reports[m].metrics[k]["mean"] or 0.0 for k, _ in metrics]
            errs = [reports[m].metrics[k]["ci"] or 0.0 for k, _ in metrics]
            xs = [i + (j - (len(methods) - 1) / 2) * width for i in range(len(metrics))]
            ax.bar(xs, means, width, yerr=errs, capsize=2, label=m)
        ax.set_xticks(range(len(metrics)), [lab for _, lab in metrics])
        ax.set_ylabel("test accuracy")
        ax.set_ylim(0, 1)
        ax.legend(frameon=False, ncol=len(methods))
        fig.tight_layout()
        return _save(fig, path)


def plot_sweep(rows: list[dict], param: str, path, metric: str = "conflicting_acc") -> Path:
    """Metric mean with CI against one swept hyperparameter.

    Rows that differ in other swept columns are drawn as separate lines.
    """
    others = [c for c in ("alpha", "beta", "t_bc") if c != param and len({r[c] for r in rows}) > 1]
    lines = {}
    for r in rows:
        lines.setdefault(tuple(r[c] for c in others), []).append(r)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.6, 2.8))
        for key, rs in sorted(lines.items()):
            rs = sorted(rs, key=lambda r: r[param])
            xs = [r[param] for r in rs]
            ys = [r[f"{metric}_mean"] if r[f"{metric}_mean"] is not None else float("nan") for r in rs]
            es = [r[f"{metric}_ci"] or 0.0 for r in rs]
            label = ", ".join(f"{c}={v}" for c, v in zip(others, key)) or None
            ax.errorbar(xs, ys, yerr=es, marker="o", capsize=2, label=label)
        ax.set_xlabel(param)
        ax.set_ylabel(metric.replace("_", " "))
        if others:
            ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)
