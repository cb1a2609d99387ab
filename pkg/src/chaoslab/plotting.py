"""Matplotlib figures for the report path (rendered with the Agg backend)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

golden_mean = (np.sqrt(5) - 1.0) / 2.0
fig_width = 5.0
params = {
    "figure.figsize": [fig_width, fig_width * golden_mean],
    "figure.dpi": 100,
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "lines.markersize": 4,
    "lines.linewidth": 1.2,
    "svg.hashsalt": "chaoslab",
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None} if str(path).endswith(".png") else None)
    plt.close(fig)
    return path


def plot_rate(ns, estimates, stderrs, reference, path, *, ylabel="estimate", title=None):
    """Log-log estimates with 2-sigma bars and the reference curve rescaled to the first point."""
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        ns = np.asarray(ns, float)
        est = np.asarray(estimates, float)
        se = np.asarray(stderrs, float)
        ax.errorbar(ns, est, yerr=2 * se, fmt="o-", capsize=2, label="estimate")
        ref = np.asarray(reference, float)
        if np.all(np.isfinite(ref)) and ref[0] > 0 and est[0] > 0:
            ax.plot(ns, ref * est[0] / ref[0], "k--", label="reference rate")
        ax.set_xscale("log")
        if np.all(est > 0):
            ax.set_yscale("log")
        ax.set_xlabel("n")
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        ax.legend()
        return _save(fig, path)


def plot_tails(rows, path):
    """Exceedance frequencies with Clopper-Pearson bands and both envelope terms."""
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        eps = np.array([r.epsilon for r in rows])
        prob = np.array([r.probability for r in rows])
        lo = np.array([r.ci[0] for r in rows])
        hi = np.array([r.ci[1] for r in rows])
        ax.plot(eps, prob, "o-", label="frequency")
        ax.fill_between(eps, lo, hi, alpha=0.3)
        env = np.minimum(1.0, np.array([r.reference_a + r.reference_b for r in rows]))
        ax.plot(eps, env, "k--", label="envelope")
        ax.set_xlabel("epsilon")
        ax.set_ylabel("P(W >= epsilon)")
        ax.legend()
        return _save(fig, path)


def plot_paths(nodes, y, path, max_paths=32):
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        for i in range(min(max_paths, y.shape[1])):
            ax.plot(nodes, y[:, i, 0], lw=0.6, alpha=0.7)
        ax.set_xlabel("t")
        ax.set_ylabel("Y")
        return _save(fig, path)
