"""Figures written next to the JSON reports."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def training_curves(records, path, initial_metric=None):
    """Loss and validation mean percentile per optimizer step."""
    steps = [r["step"] for r in records]
    fig, (ax_loss, ax_val) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax_loss.plot(steps, [r["loss"] for r in records], color="C0", lw=1.2)
    ax_loss.set_xlabel("optimizer step")
    ax_loss.set_ylabel("pairwise loss (sum)")

    vs = [(r["step"], r["val_mean_percentile"]) for r in records if r.get("val_mean_percentile") is not None]
    if initial_metric is not None:
        vs.insert(0, (0, initial_metric))
    if vs:
        x, y = zip(*vs)
        ax_val.plot(x, y, marker="o", ms=3, color="C1", lw=1.2)
    ax_val.axhline(50.0, color="0.6", ls=":", lw=1)
    ax_val.set_ylim(0, 100)
    ax_val.set_xlabel("optimizer step")
    ax_val.set_ylabel("val mean percentile rank")
    for ax in (ax_loss, ax_val):
        ax.spines[["top", "right"]].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def percentile_histogram(report, path, title=None):
    values = np.array(list(report.per_persona.values()), dtype=float)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.hist(values, bins=np.linspace(0, 100, 21), color="C2", edgecolor="white")
    ax.axvline(report.mean, color="k", lw=1, ls="--", label=f"mean {report.mean:.2f}")
    ax.set_xlim(0, 100)
    ax.set_xlabel("percentile rank of teacher winner")
    ax.set_ylabel("personas")
    if title:
        ax.set_title(title, fontsize=9)
    ax.legend(frameon=False, fontsize=8)
    ax.spines[["top", "right"]].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
