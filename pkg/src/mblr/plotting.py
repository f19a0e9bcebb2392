"""Forest plots of odds ratios on a log axis, written as SVG."""

from __future__ import annotations

from collections.abc import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.ticker import FixedLocator, NullLocator  # noqa: E402

from .posterior import EffectEstimate  # noqa: E402

__all__ = ["STYLE", "forest_plot", "treatment_by_issue", "prior_mean_effects", "covariate_breakdown"]

STYLE = {
    "font.family": "DejaVu Sans",
    "font.size": 9,
    "axes.linewidth": 0.6,
    "xtick.direction": "out",
    "ytick.left": False,
    "svg.hashsalt": "mblr",
    "svg.fonttype": "none",
}
METHOD_STYLE = {"MBLR": ("k", "o"), "RLR": ("0.55", "s")}
OR_TICKS = (0.05, 0.1, 0.2, 0.5, 1, 2, 5, 10, 20, 50)


def forest_plot(rows: Sequence[tuple[str, EffectEstimate]], path, title: str = "", level: float = 0.90):
    """Point and whisker per row; labels on the left, log-scaled odds-ratio axis.

    Rows sharing a label are drawn side by side with a small vertical offset
    per method.
    """
    labels = list(dict.fromkeys(lab for lab, _ in rows))
    methods = list(dict.fromkeys(e.method for _, e in rows))
    ypos = {lab: len(labels) - i for i, lab in enumerate(labels)}
    offs = {m: (0.15 * (len(methods) - 1) / 2 - 0.15 * j) for j, m in enumerate(methods)}

    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 0.9 + 0.28 * len(labels)))
        for m in methods:
            sel = [(lab, e) for lab, e in rows if e.method == m]
            y = np.array([ypos[lab] + offs[m] for lab, _ in sel])
            pt = np.array([e.or_point for _, e in sel])
            lo = np.array([e.or_low for _, e in sel])
            hi = np.array([e.or_high for _, e in sel])
            color, marker = METHOD_STYLE.get(m, ("C0", "o"))
            ax.hlines(y, lo, hi, color=color, lw=1.0)
            ax.plot(pt, y, marker, color=color, ms=4, label=m, ls="none")
        ax.axvline(1.0, color="0.3", lw=0.6, ls=":")
        ax.set_xscale("log")
        vals = [v for _, e in rows for v in (e.or_low, e.or_high) if np.isfinite(v) and v > 0]
        lo_lim, hi_lim = (min(vals) / 1.3, max(vals) * 1.3) if vals else (0.1, 10)
        ax.set_xlim(min(lo_lim, 0.8), max(hi_lim, 1.25))
        ax.xaxis.set_major_locator(FixedLocator([t for t in OR_TICKS if lo_lim <= t <= hi_lim] or [1]))
        ax.xaxis.set_minor_locator(NullLocator())
        ax.xaxis.set_major_formatter(matplotlib.ticker.FormatStrFormatter("%g"))
        ax.set_yticks([ypos[lab] for lab in labels], labels)
        ax.set_ylim(0.4, len(labels) + 0.6)
        ax.set_xlabel(f"odds ratio ({round(level * 100):d}% interval)")
        for side in ("top", "right", "left"):
            ax.spines[side].set_visible(False)
        if len(methods) > 1:
            ax.legend(frameon=False, loc="upper left", bbox_to_anchor=(1.0, 1.0), fontsize=8)
        if title:
            ax.set_title(title, loc="left", fontsize=10)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)
    return path


def _lookup(estimates, term_type, term=None):
    return [e for e in estimates if e.term_type == term_type and (term is None or e.term == term)]


def treatment_by_issue(estimates: Sequence[EffectEstimate], path, level: float = 0.90):
    """Treatment odds ratio for the prior mean and every issue, both methods."""
    rows = [("All issues" if e.issue == "PRIOR_MEAN" else e.issue, e) for e in _lookup(estimates, "TREAT")]
    rows.sort(key=lambda r: r[0] != "All issues")
    return forest_plot(rows, path, "Treatment effect by issue", level)


def prior_mean_effects(estimates: Sequence[EffectEstimate], path, level: float = 0.90):
    """Prior-mean treatment odds ratio overall and within each covariate category (MBLR)."""
    rows = [("Treatment", e) for e in _lookup(estimates, "TREAT") if e.issue == "PRIOR_MEAN" and e.method == "MBLR"]
    rows += [
        (e.term.split("|", 1)[1], e)
        for e in _lookup(estimates, "SUBGROUP")
        if e.issue == "PRIOR_MEAN" and e.method == "MBLR"
    ]
    return forest_plot(rows, path, "Prior-mean treatment effect by subgroup", level)


def covariate_breakdown(estimates: Sequence[EffectEstimate], issue: str, path, level: float = 0.90):
    """Subgroup treatment odds ratios for one issue, both methods."""
    rows = [("Overall", e) for e in _lookup(estimates, "TREAT") if e.issue == issue]
    rows += [(e.term.split("|", 1)[1], e) for e in _lookup(estimates, "SUBGROUP") if e.issue == issue]
    if len(rows) == 0:
        raise ValueError(f"no estimates for issue {issue!r}")
    return forest_plot(rows, path, f"Treatment effect by subgroup: {issue}", level)
