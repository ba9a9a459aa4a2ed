"""Optional figures rendered next to the CSV/JSON reports (PNG bytes)."""
from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {
    "figure.figsize": (6.0, 3.6),
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _png(fig) -> bytes:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return buf.getvalue()


def ess_trace(trace, n_particles: int, kappa: float) -> bytes:
    steps = [r.step for r in trace.rows]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        ax.plot(steps, [r.ess for r in trace.rows], lw=1.2, label="ESS before resampling")
        ax.axhline(kappa * n_particles, color="k", ls="--", lw=0.8, label=r"$\kappa N$")
        fired = [r.step for r in trace.rows if r.resampled]
        if fired:
            ax.plot(fired, [kappa * n_particles] * len(fired), "v", color="C3", ms=4, label="resample")
        ax.set_xlabel("token step")
        ax.set_ylabel("ESS")
        ax.set_ylim(0, n_particles * 1.05)
        ax.legend(frameon=False, fontsize=8)
        return _png(fig)


def distributions(labels, columns: dict) -> bytes:
    """Grouped bars, one group per sequence, one bar per named distribution."""
    x = np.arange(len(labels))
    width = 0.8 / max(len(columns), 1)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(max(6.0, 0.45 * len(labels)), 3.6))
        for k, (name, vals) in enumerate(columns.items()):
            ax.bar(x + (k - (len(columns) - 1) / 2) * width, vals, width, label=name)
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=7)
        ax.set_ylabel("probability")
        ax.legend(frameon=False, fontsize=8)
        return _png(fig)


def cost_ledgers(reports) -> bytes:
    names = [r["regime"] for r in reports]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        x = np.arange(len(names))
        ax.bar(x - 0.2, [r["analytic"] for r in reports], 0.4, label="analytic")
        ax.bar(x + 0.2, [r["empirical_mean"] for r in reports], 0.4, label="empirical mean")
        ax.set_xticks(x)
        ax.set_xticklabels(names)
        ax.set_yscale("log")
        ax.set_ylabel("token-evals")
        ax.legend(frameon=False, fontsize=8)
        return _png(fig)
