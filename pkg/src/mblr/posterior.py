"""Mixture posterior over the grid, odds-ratio intervals, RLR and Bayes factors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .dataset import GroupedDataset
from .grid import DiscretePosterior
from .model import RLR_PHI, CoefficientVector, ConditionalPosterior, maximize

__all__ = [
    "MixturePosterior",
    "EffectEstimate",
    "BayesFactorSummary",
    "mix",
    "odds_ratio_ci",
    "z_value",
    "subgroup_effects",
    "estimate_table",
    "fit_rlr",
    "bayes_factor_vs_rlr",
    "prior_sd_summary",
]


@dataclass
class MixturePosterior:
    theta_hat: CoefficientVector
    V: np.ndarray
    method: str  # "MBLR" or "RLR"
    fits: list[ConditionalPosterior]
    pi: np.ndarray
    grid: DiscretePosterior | None = None

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.V), 0.0, None))

    @property
    def index(self):
        return self.theta_hat.index


@dataclass(frozen=True)
class EffectEstimate:
    method: str
    term: str
    term_type: str
    issue: str
    coef: float
    sd: float
    or_point: float
    or_low: float
    or_high: float
    pinned: bool = False


def mix(grid) -> MixturePosterior:
    """Normal mixture collapse: weighted mean plus within- and between-point covariance."""
    pi = np.asarray(grid.pi, dtype=float)
    thetas = np.array([f.theta_hat.values for f in grid.fits])
    theta = pi @ thetas
    dev = thetas - theta
    V = sum(p * f.V for p, f in zip(pi, grid.fits)) + (dev * pi[:, None]).T @ dev
    V = 0.5 * (V + V.T)
    index = grid.fits[0].theta_hat.index
    return MixturePosterior(
        CoefficientVector(theta, index),
        V,
        "MBLR",
        list(grid.fits),
        pi,
        grid if isinstance(grid, DiscretePosterior) else None,
    )


def z_value(level: float = 0.90) -> float:
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    if level == 0.90:
        return 1.645
    return float(stats.norm.ppf(0.5 + level / 2))


def odds_ratio_ci(b: float, v: float, level: float = 0.90) -> tuple[float, float, float]:
    if v < 0:
        raise ValueError(f"variance must be non-negative, got {v}")
    half = z_value(level) * np.sqrt(v)
    return float(np.exp(b - half)), float(np.exp(b)), float(np.exp(b + half))


def _estimate(method, term, term_type, issue, coef, var, level, pinned=False):
    var = max(float(var), 0.0)
    lo, pt, hi = odds_ratio_ci(coef, var, level)
    return EffectEstimate(method, term, term_type, issue, float(coef), float(np.sqrt(var)), pt, lo, hi, pinned)


def subgroup_effects(post: MixturePosterior, level: float = 0.90) -> list[EffectEstimate]:
    """Treatment effect within each covariate category, per issue and for the prior means."""
    idx = post.index
    th, V = post.theta_hat.values, post.V
    labels = idx.labels
    out = []
    pairs = [("PRIOR_MEAN", idx.B0, idx.B)] + [(idx.issues[k], idx.beta0[k], idx.beta[:, k]) for k in range(idx.K)]
    for issue, b0, bg in pairs:
        for g in range(idx.G):
            j = bg[g]
            coef = th[b0] + th[j]
            var = V[b0, b0] + V[j, j] + 2 * V[b0, j]
            out.append(_estimate(post.method, f"Treatment|{labels[g]}", "SUBGROUP", issue, coef, var, level))
    return out


def estimate_table(post: MixturePosterior, level: float = 0.90) -> list[EffectEstimate]:
    """One row per parameter slot, followed by the subgroup sums."""
    idx = post.index
    th, V = post.theta_hat.values, post.V
    rows = []
    for s in range(idx.M):
        tt = idx.term_type(s)
        pinned = post.method == "RLR" and tt == "TRT*COV"
        rows.append(_estimate(post.method, idx.term(s), tt, idx.issue(s), th[s], V[s, s], level, pinned))
    return rows + subgroup_effects(post, level)


def fit_rlr(data: GroupedDataset, warm_start=None) -> MixturePosterior:
    """Regularised logistic regression: one fit at (5, 5, 0.001, 0.001)."""
    fit = maximize(RLR_PHI, data, warm_start)
    return MixturePosterior(fit.theta_hat, fit.V, "RLR", [fit], np.ones(1))


@dataclass(frozen=True)
class BayesFactorSummary:
    grid_log_bf: np.ndarray  # log L_s + 0.5 log det V*_s per grid point
    rlr_log_bf: float
    log_ratio_per_point: np.ndarray
    log_ratio: float  # log(sum_s pi_s BF_s) - log BF_rlr; positive favours MBLR
    pi: np.ndarray = field(repr=False)


def bayes_factor_vs_rlr(grid, rlr: MixturePosterior) -> BayesFactorSummary:
    rfit = rlr.fits[0]
    fps = {f.data_fingerprint for f in grid.fits} | {rfit.data_fingerprint}
    if len(fps) != 1:
        raise ValueError("grid and RLR fits were computed on different data")
    lbf = np.array([f.log_bf for f in grid.fits])
    pi = np.asarray(grid.pi, dtype=float)
    top = lbf.max()
    mixed = top + np.log(np.sum(pi * np.exp(lbf - top)))
    return BayesFactorSummary(lbf, rfit.log_bf, lbf - rfit.log_bf, float(mixed - rfit.log_bf), pi)


def prior_sd_summary(grid) -> dict:
    """Posterior mean and SD of each prior SD under the discrete weights, plus sum(pi^2)."""
    pi = np.asarray(grid.pi, dtype=float)
    phis = np.asarray(grid.phis, dtype=float)
    mean = pi @ phis
    sd = np.sqrt(np.clip(pi @ (phis - mean) ** 2, 0.0, None))
    return {"mean": mean, "sd": sd, "dispersion": float(np.sum(pi**2))}
