"""Delimited report tables for fits, descriptive summaries and simulations."""

from __future__ import annotations

import csv
import math
from collections.abc import Iterable, Sequence

import numpy as np

from .dataset import GroupedDataset
from .grid import DiscretePosterior
from .model import RLR_PHI, ConditionalPosterior
from .posterior import BayesFactorSummary, EffectEstimate, prior_sd_summary

__all__ = [
    "fmt",
    "write_csv",
    "grid_table",
    "estimate_rows",
    "bayes_factor_table",
    "naive_odds_ratio",
    "issue_table",
    "covariate_table",
    "ESTIMATE_HEADER",
]

PHI_NAMES = ("sigma_A", "sigma_0", "sigma_B", "tau")
ESTIMATE_HEADER = ("method", "term", "term_type", "issue", "coef", "sd", "or", "or_low", "or_high", "pinned")


def fmt(x) -> str:
    """15 significant digits for floats; integers and strings pass through."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "NA"
        return f"{x:.15g}"
    return str(x)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def _pct(p: float) -> str:
    return f"{100 * p:.2f}%"


def grid_table(grid: DiscretePosterior):
    """Row 0 is the RLR point, rows 1..33 the grid, then Mean and St.Dev. rows.

    The PROB entry of the Mean row holds the dispersion sum(pi^2).
    """
    header = ("row", *PHI_NAMES, "PROB", "pi", "log_g")
    rows = [(0, *RLR_PHI, _pct(0.0), 0.0, float("nan"))]
    for s in range(grid.S):
        rows.append((s + 1, *grid.phis[s], _pct(grid.pi[s]), grid.pi[s], grid.log_g[s]))
    summ = prior_sd_summary(grid)
    rows.append(("Mean", *summ["mean"], _pct(summ["dispersion"]), float("nan"), float("nan")))
    rows.append(("St.Dev.", *summ["sd"], "", float("nan"), float("nan")))
    return header, rows


def estimate_rows(estimates: Iterable[EffectEstimate]):
    return [
        (e.method, e.term, e.term_type, e.issue, e.coef, e.sd, e.or_point, e.or_low, e.or_high, e.pinned)
        for e in estimates
    ]


def bayes_factor_table(grid: DiscretePosterior, rlr_fit: ConditionalPosterior, bf: BayesFactorSummary):
    """Laplace log marginal likelihood per point, relative to the RLR point, plus the mixture summary."""
    header = ("row", *PHI_NAMES, "pi", "logL", "log_det_Vstar", "log_bf", "log_bf_vs_rlr")
    rows = [(0, *RLR_PHI, 0.0, rlr_fit.logL, rlr_fit.log_det_Vstar, rlr_fit.log_bf, 0.0)]
    for s, fit in enumerate(grid.fits):
        rows.append((s + 1, *grid.phis[s], grid.pi[s], fit.logL, fit.log_det_Vstar, bf.grid_log_bf[s],
                     bf.log_ratio_per_point[s]))
    nan = float("nan")
    rows.append(("mixture", nan, nan, nan, nan, 1.0, nan, nan, nan, bf.log_ratio))
    return header, rows


def naive_odds_ratio(a: float, n1: float, c: float, n0: float, z: float = 1.96):
    """Treatment/comparator odds ratio with 0.5 added to every cell of the 2x2 table.

    ``a`` of ``n1`` treated and ``c`` of ``n0`` comparator subjects had the event.
    Returns ``(or, low, high)``.
    """
    cells = np.array([a, n1 - a, c, n0 - c], dtype=float) + 0.5
    if (cells <= 0).any():
        raise ValueError("event counts must not exceed arm sizes")
    aa, bb, cc, dd = cells
    log_or = math.log(aa * dd / (bb * cc))
    se = math.sqrt(float(np.sum(1.0 / cells)))
    return math.exp(log_or), math.exp(log_or - z * se), math.exp(log_or + z * se)


def issue_table(data: GroupedDataset):
    """Per-issue events by arm and the continuity-corrected 95% odds-ratio interval."""
    trt = data.treat == 1
    n1, n0 = int(data.n[trt].sum()), int(data.n[~trt].sum())
    header = ("issue", "treatment_events", "treatment_n", "comparator_events", "comparator_n",
              "or", "or_low", "or_high")
    rows = []
    for k, name in enumerate(data.spec.issues):
        a, c = int(data.N[trt, k].sum()), int(data.N[~trt, k].sum())
        rows.append((name, a, n1, c, n0, *naive_odds_ratio(a, n1, c, n0)))
    return header, rows


def covariate_table(data: GroupedDataset):
    """Subjects per covariate category and arm, with arm totals first."""
    trt = data.treat == 1
    header = ("covariate", "category", "treatment", "comparator")
    rows = [("Total", "", int(data.n[trt].sum()), int(data.n[~trt].sum()))]
    for j, (name, cats) in enumerate(data.spec.covariates):
        for c, cat in enumerate(cats):
            hit = data.levels[:, j] == c
            rows.append((name, cat, int(data.n[hit & trt].sum()), int(data.n[hit & ~trt].sum())))
    return header, rows


def simulation_tables(report):
    """(name, header, rows) for the accuracy, prior-SD and selection tables."""
    acc_head = ("subset", "method", "term_type", "target", "estimators", "replications",
                "BIAS", "RMSE", "Z2", "CI05", "CI95")
    phi_head = ("subset", "replications", *(f for n in PHI_NAMES for f in (n, f"SD_{n}")))
    sel_head = ("subset", "replications", "TRUE_INT", "BIAS", "BIAS_SE", "RMSE", "Z2", "CI05", "CI95")
    return [
        ("sim_accuracy.csv", acc_head, [[r[h] for h in acc_head] for r in report.accuracy]),
        ("sim_prior_sd.csv", phi_head, [[r[h] for h in phi_head] for r in report.phi]),
        ("sim_selection.csv", sel_head, [[r[h] for h in sel_head] for r in report.selection]),
    ]
