"""Figure rendering for cost reports. Uses the non-interactive Agg backend and
only ever writes files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STAGES = (
    ("stem", ("color.", "stem.")),
    ("fusion", ("iaaf.",)),
    ("embedding", ("ire.",)),
    ("attention", (".attn.",)),
    ("block other", ("blocks.",)),
    ("reconstruction", ("recon.",)),
)


def stage_of(name: str) -> str:
    for stage, keys in STAGES:
        if any(k in name if k.startswith(".") else name.startswith(k) for k in keys):
            return stage
    return "other"


def stage_totals(report, attr: str = "macs") -> dict:
    totals = {s: 0 for s, _ in STAGES}
    for layer in report.layers:
        totals[stage_of(layer.name)] = totals.get(stage_of(layer.name), 0) + getattr(layer, attr)
    return totals


def plot_cost_breakdown(reports, path, title: str | None = None) -> None:
    """Stacked bars of MACs and parameters per pipeline stage, one bar per report."""
    labels = [r.label for r in reports]
    x = np.arange(len(reports))
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
    for ax, attr, scale, unit in ((axes[0], "macs", 1e9, "GMACs"), (axes[1], "params", 1e6, "M params")):
        bottom = np.zeros(len(reports))
        for stage, _ in STAGES:
            vals = np.array([stage_totals(r, attr)[stage] for r in reports]) / scale
            if not vals.any():
                continue
            ax.bar(x, vals, 0.6, bottom=bottom, label=stage)
            bottom += vals
        ax.set_xticks(x, labels)
        ax.set_ylabel(unit)
        ax.spines[["top", "right"]].set_visible(False)
    axes[1].legend(frameon=False, fontsize=8, loc="upper left", bbox_to_anchor=(1.0, 1.0))
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
