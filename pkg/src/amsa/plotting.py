"""Log-log convergence plots rendered to deterministic SVG files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

COLORS = {"amsa": "#1f77b4", "msa": "#d62728"}
LABELS = {"amsa": "A-MSA", "msa": "MSA"}


def plot_curves(path, quantity, curves, fits=None, predicted=None, title=None):
    """Write a log-log plot of seed-averaged curves.

    ``curves`` maps solver name to ``(t, mean, stderr)``; ``fits`` maps solver
    to a :class:`RateFit`; ``predicted`` maps solver to the predicted slope.
    Reference lines are anchored at the fitted value at the window start.
    """
    fits = fits or {}
    predicted = predicted or {}
    with plt.rc_context({"svg.hashsalt": "amsa", "svg.fonttype": "path"}):
        fig, ax = plt.subplots(figsize=(6.0, 4.2))
        for solver, (t, mean, se) in curves.items():
            keep = (t > 0) & (mean > 0)
            color = COLORS.get(solver)
            ax.loglog(t[keep] + 1, mean[keep], color=color, lw=1.4, label=LABELS.get(solver, solver))
            lo = np.clip(mean - se, mean * 1e-3, None)
            ax.fill_between(t[keep] + 1, lo[keep], (mean + se)[keep], color=color, alpha=0.2, lw=0)
            fit = fits.get(solver)
            if fit is None:
                continue
            t_lo, t_hi = fit.window
            tt = np.array([t_lo + 1.0, t_hi + 1.0])
            yy = np.exp(fit.intercept) * tt ** fit.slope
            ax.loglog(tt, yy, color=color, ls="--", lw=1.0,
                      label=f"{LABELS.get(solver, solver)} fit {fit.slope:.3f}")
            if solver in predicted:
                yp = yy[0] * (tt / tt[0]) ** predicted[solver]
                ax.loglog(tt, yp, color=color, ls=":", lw=1.0,
                          label=f"{LABELS.get(solver, solver)} predicted {predicted[solver]:.3f}")
        ax.set_xlabel("iteration t + 1")
        ax.set_ylabel(quantity)
        if title:
            ax.set_title(title)
        ax.grid(True, which="major", alpha=0.3)
        ax.legend(fontsize=8, loc="lower left")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path
