"""Simulation study comparing MBLR with RLR on data drawn from the model itself.

Each replication draws true coefficients from the hierarchical prior, draws
binomial counts on a fixed stratum layout, fits both methods and records the
estimate, its posterior SD and the truth for every parameter.  Summaries are
averaged over groups of estimators (method, term type, prior mean versus
per-issue coefficient, issue frequency).
"""

from __future__ import annotations

import itertools
import logging
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dataset import CovariateSpec, GroupedDataset, ParameterIndex
from .errors import MBLRError
from .grid import D_DEFAULT, DELTA0_DEFAULT, build_discrete_posterior
from .model import CoefficientVector, PriorSdPoint, predict_probabilities
from .posterior import MixturePosterior, fit_rlr, mix, prior_sd_summary, z_value

log = logging.getLogger(__name__)

__all__ = [
    "PSD_LEVELS",
    "TRIAL_ISSUES",
    "TRIAL_INTERCEPTS",
    "TRIAL_ESTIMATED_MEANS",
    "TRIAL_MARGINS",
    "DESK_INTERCEPTS",
    "DESK_ESTIMATED_MEANS",
    "SimulationConfig",
    "TruthDraw",
    "AccuracySummary",
    "CellResult",
    "SimulationReport",
    "layout_from_margins",
    "trial_layout",
    "desk_layout",
    "make_config",
    "profile_configs",
    "draw_truth",
    "simulate_counts",
    "accuracy_stats",
    "max_interaction_selection",
    "run_cell",
    "run_simulation",
    "RNG_ALGORITHM",
    "tracked",
    "tracked_estimators",
]

RNG_ALGORITHM = "numpy.random.PCG64 via SeedSequence(seed, spawn_key=(replication,))"

PSD_LEVELS = {
    "small": PriorSdPoint(0.4, 0.6, 0.2, 0.2),
    "large": PriorSdPoint(1.0, 1.2, 0.8, 0.8),
}

# Reference trial: ten issues ordered by frequency, four covariates (G = 16).
TRIAL_ISSUES = (
    "Hyperkalaemia", "Thirst", "Dry mouth", "Pollakiuria", "Polyuria",
    "Nocturia", "Polydipsia", "Micturition urgency", "Urine output increased", "Anuria",
)
TRIAL_INTERCEPTS = (-2.906, -3.333, -3.429, -3.645, -4.787, -5.646, -5.819, -6.618, -6.972, -7.722)
TRIAL_COVARIATES = (
    ("Gender", ("F", "M")),
    ("Study", ("A1", "A2", "A3", "A4", "B1", "B2", "B3", "B4")),
    ("RenalHistory", ("N", "Y")),
    ("Age", ("50 and under", "51-65", "66-75", "over 75")),
)
TRIAL_ESTIMATED_MEANS = {
    "A": (0.028, -0.028,
          0.094, 0.529, -0.325, 0.33, 0.293, -0.232, -0.273, -0.417,
          -0.187, 0.187,
          -0.251, 0.109, 0.239, -0.097),
    "B0": 1.484,
}
# subjects per category, (treatment, comparator)
TRIAL_MARGINS = {
    "Gender": ((908, 685), (2202, 1957)),
    "Study": ((246, 84), (120, 120), (239, 80), (191, 63), (102, 103), (17, 11), (123, 120), (2072, 2061)),
    "RenalHistory": ((2920, 2451), (190, 191)),
    "Age": ((382, 348), (1089, 902), (948, 820), (691, 572)),
}
TRIAL_ARMS = (3110, 2642)

# Desk-scale layout: two covariates (G = 6), four issues, the last two rare.
DESK_COVARIATES = (("Sex", ("F", "M")), ("Age", ("50 and under", "51-65", "66-75", "over 75")))
DESK_ISSUES = ("Issue1", "Issue2", "Issue3", "Issue4")
DESK_INTERCEPTS = (-1.5, -2.0, -3.5, -4.0)
DESK_ESTIMATED_MEANS = {"A": (0.03, -0.03, -0.25, 0.11, 0.24, -0.10), "B0": 0.75}
DESK_ARMS = (320, 280)


def _largest_remainder(weights, total: int) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    raw = total * w / w.sum()
    out = np.floor(raw).astype(np.int64)
    short = total - int(out.sum())
    order = np.lexsort((np.arange(len(raw)), -(raw - out)))
    out[order[:short]] += 1
    return out


def layout_from_margins(covariates, margins, arm_totals, issues) -> GroupedDataset:
    """Strata under within-arm independence of the covariates, matching the arm totals.

    ``margins[name][c]`` is a (treatment, comparator) count for category ``c``.
    Empty strata are dropped.
    """
    spec = CovariateSpec(tuple((n, tuple(c)) for n, c in covariates), tuple(issues))
    cells = list(itertools.product(*(range(len(c)) for _, c in covariates)))
    levels, treat, n = [], [], []
    for arm, total in zip((1, 0), arm_totals):
        col = 0 if arm == 1 else 1
        shares = [np.array([m[col] for m in margins[name]], float) for name, _ in covariates]
        shares = [s / s.sum() for s in shares]
        w = [np.prod([shares[j][c] for j, c in enumerate(cell)]) for cell in cells]
        counts = _largest_remainder(w, total)
        for cell, cnt in zip(cells, counts):
            if cnt > 0:
                levels.append(cell)
                treat.append(arm)
                n.append(cnt)
    m = len(n)
    return GroupedDataset(np.array(levels), np.array(treat), np.array(n), np.zeros((m, spec.K), int), spec)


def trial_layout(K: int = 10) -> GroupedDataset:
    """5752-subject layout rebuilt from the published covariate-by-arm margins."""
    return layout_from_margins(TRIAL_COVARIATES, TRIAL_MARGINS, TRIAL_ARMS, TRIAL_ISSUES[:K])


def desk_layout() -> GroupedDataset:
    """About 600 subjects, Sex by Age, with the trial's category shares."""
    margins = {"Sex": TRIAL_MARGINS["Gender"], "Age": TRIAL_MARGINS["Age"]}
    return layout_from_margins(DESK_COVARIATES, margins, DESK_ARMS, DESK_ISSUES)


@dataclass(frozen=True)
class SimulationConfig:
    """One simulation cell.

    ``rare`` lists issue positions treated as rare when reporting.
    """

    layout: GroupedDataset
    intercepts: tuple
    A: tuple
    B0: float
    phi: PriorSdPoint
    n_sim: int
    seed: int
    rare: tuple = ()
    responses: str = "frequent"
    means: str = "zero"
    psd: str = "small"
    d: float = D_DEFAULT
    delta0: float = DELTA0_DEFAULT
    level: float = 0.90
    threads: int = 1

    def __post_init__(self):
        if self.n_sim < 1:
            raise ValueError("n_sim must be at least 1")
        if len(self.intercepts) != self.layout.spec.K:
            raise ValueError("one intercept per issue is required")
        if len(self.A) != self.layout.spec.G:
            raise ValueError("one prior mean per covariate category is required")
        object.__setattr__(self, "phi", PriorSdPoint(*map(float, self.phi)))

    @property
    def label(self) -> str:
        return f"responses={self.responses},means={self.means},psd={self.psd}"

    def echo(self) -> dict:
        return {
            "responses": self.responses, "means": self.means, "psd": self.psd,
            "issues": list(self.layout.spec.issues), "rare": [self.layout.spec.issues[k] for k in self.rare],
            "covariates": {n: list(c) for n, c in self.layout.spec.covariates},
            "subjects": int(self.layout.n.sum()), "strata": int(self.layout.m),
            "intercepts": list(self.intercepts), "A": list(self.A), "B0": self.B0,
            "phi": list(self.phi), "n_sim": self.n_sim, "seed": self.seed,
            "d": self.d, "delta0": self.delta0, "level": self.level,
        }


def make_config(profile: str, responses: str = "frequent+rare", means: str = "large", psd: str = "small",
                *, n_sim: int | None = None, seed: int = 20240101, **kw) -> SimulationConfig:
    """Build a cell of the named profile ("desk", "trial" or "smoke") at the given factor levels."""
    if responses not in ("frequent", "frequent+rare") or means not in ("zero", "large") or psd not in PSD_LEVELS:
        raise ValueError(f"unknown factor level in ({responses}, {means}, {psd})")
    if profile in ("desk", "smoke"):
        layout, intercepts, est, default_n = desk_layout(), DESK_INTERCEPTS, DESK_ESTIMATED_MEANS, 200
        n_freq = 2
    elif profile == "trial":
        layout, intercepts, est, default_n = trial_layout(), TRIAL_INTERCEPTS, TRIAL_ESTIMATED_MEANS, 250
        n_freq = 5
    else:
        raise ValueError(f"unknown profile {profile!r}")
    if profile == "smoke":
        default_n = 2
    K = len(intercepts)
    if responses == "frequent":
        K = n_freq
        layout = layout_from_spec_subset(layout, K)
    scale = 2.0 if means == "large" else 0.0
    return SimulationConfig(
        layout=layout,
        intercepts=tuple(intercepts[:K]),
        A=tuple(scale * a for a in est["A"]),
        B0=scale * est["B0"],
        phi=PSD_LEVELS[psd],
        n_sim=default_n if n_sim is None else n_sim,
        seed=seed,
        rare=tuple(range(n_freq, K)),
        responses=responses,
        means=means,
        psd=psd,
        **kw,
    )


def layout_from_spec_subset(layout: GroupedDataset, K: int) -> GroupedDataset:
    spec = CovariateSpec(layout.spec.covariates, layout.spec.issues[:K])
    return GroupedDataset(layout.levels, layout.treat, layout.n, layout.N[:, :K], spec)


def profile_configs(profile: str, factorial: bool = False, **kw) -> list[SimulationConfig]:
    """A single cell, or the full 2 x 2 x 2 factor design in a fixed order."""
    if not factorial:
        return [make_config(profile, **kw)]
    base = {k: v for k, v in kw.items() if k not in ("responses", "means", "psd")}
    return [
        make_config(profile, r, m, p, **base)
        for r, m, p in itertools.product(("frequent", "frequent+rare"), ("zero", "large"), ("small", "large"))
    ]


# ---------------------------------------------------------------------------
# truth and data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TruthDraw:
    theta_true: CoefficientVector
    P: np.ndarray  # (m, K)


def _recentre(x: np.ndarray, blocks) -> np.ndarray:
    x = x.copy()
    for blk in blocks:
        x[blk] -= x[blk].mean(axis=0)
    return x


def draw_truth(config: SimulationConfig, rng: np.random.Generator) -> TruthDraw:
    """Draw coefficients from the prior and recentre every covariate block to sum to zero."""
    spec = config.layout.spec
    G, K = spec.G, spec.K
    s_A, s_0, s_B, tau = config.phi
    A = np.asarray(config.A, dtype=float)
    blocks = spec.blocks()
    alpha = A[:, None] + s_A * rng.standard_normal((G, K))
    beta0 = config.B0 + s_0 * rng.standard_normal(K)
    B = tau * rng.standard_normal(G)
    beta = B[:, None] + s_B * rng.standard_normal((G, K))
    theta = CoefficientVector.from_blocks(
        ParameterIndex(spec),
        A=_recentre(A, blocks),
        B0=config.B0,
        B=_recentre(B, blocks),
        alpha0=np.asarray(config.intercepts, dtype=float),
        alpha=_recentre(alpha, blocks),
        beta0=beta0,
        beta=_recentre(beta, blocks),
    )
    return TruthDraw(theta, predict_probabilities(theta, config.layout))


def simulate_counts(truth: TruthDraw, layout: GroupedDataset, rng: np.random.Generator) -> GroupedDataset:
    N = rng.binomial(layout.n[:, None], truth.P)
    return layout.with_counts(N)


# ---------------------------------------------------------------------------
# accuracy summaries
# ---------------------------------------------------------------------------

STAT_NAMES = ("BIAS", "RMSE", "Z2", "CI05", "CI95")


@dataclass(frozen=True)
class AccuracySummary:
    BIAS: float
    RMSE: float
    Z2: float
    CI05: float
    CI95: float
    count: int

    def as_tuple(self) -> tuple:
        return (self.BIAS, self.RMSE, self.Z2, self.CI05, self.CI95)


def _per_estimator(q, se, theta, level):
    """Accuracy statistics along axis 0 (replications); arrays broadcast over estimators."""
    q, se, theta = (np.asarray(a, dtype=float) for a in (q, se, theta))
    if not q.shape == se.shape == theta.shape:
        raise ValueError(f"shape mismatch: {q.shape}, {se.shape}, {theta.shape}")
    z = z_value(level)
    err = q - theta
    with np.errstate(divide="ignore", invalid="ignore"):
        z2 = np.mean(err**2 / se**2, axis=0)
    return np.stack([
        err.mean(axis=0),
        np.sqrt(np.mean(err**2, axis=0)),
        z2,
        np.mean(q + z * se < theta, axis=0),
        np.mean(q - z * se > theta, axis=0),
    ])


def accuracy_stats(q, se, theta, level: float = 0.90) -> AccuracySummary:
    """BIAS, RMSE, Z^2 and the two one-sided miss rates of one estimator over replications."""
    if not (len(q) == len(se) == len(theta)):
        raise ValueError("q, se and theta must have equal length")
    s = _per_estimator(q, se, theta, level)
    return AccuracySummary(*map(float, s), count=len(q))


def max_interaction_selection(fit: MixturePosterior, truth: TruthDraw):
    """Interaction with the largest signed estimate/SD ratio.

    Ties go to the lowest (g, k), g-major.  Returns ``((g, k), estimate, sd, truth)``.
    """
    idx = fit.index
    slots = idx.beta  # (G, K)
    est = fit.theta_hat.values[slots]
    sd = fit.sd[slots]
    ratio = np.where(sd > 0, est / np.where(sd > 0, sd, 1.0), -np.inf)
    g, k = np.unravel_index(int(np.argmax(ratio)), ratio.shape)
    s = slots[g, k]
    return (int(g), int(k)), float(est[g, k]), float(sd[g, k]), float(truth.theta_true.values[s])


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------


@dataclass
class CellResult:
    """Raw per-replication records for one configuration (failed replications removed)."""

    config: SimulationConfig
    q: dict  # method -> (n_ok, M + G K): coefficients then subgroup sums
    se: dict
    theta: np.ndarray  # (n_ok, M + G K)
    phi_mean: np.ndarray  # (n_ok, 4)
    phi_sd: np.ndarray  # (n_ok, 4)
    selection: np.ndarray  # (n_ok, 3): estimate, sd, truth
    replications: np.ndarray  # indices of successful replications
    failures: list = field(default_factory=list)
    dispersion_warnings: int = 0
    wall_time: float = 0.0


def _subgroup_slots(idx: ParameterIndex) -> tuple[np.ndarray, np.ndarray]:
    """Slot pairs (beta_0k, beta_gk) of the per-issue subgroup sums, issue-major."""
    b0 = np.repeat(idx.beta0, idx.G)
    bg = idx.beta.T.ravel()
    return b0, bg


def tracked(values: np.ndarray, V: np.ndarray | None, idx: ParameterIndex):
    """Every coefficient followed by the G*K subgroup sums; with ``V`` also their SDs."""
    b0, bg = _subgroup_slots(idx)
    est = np.concatenate([values, values[b0] + values[bg]])
    if V is None:
        return est
    var = np.concatenate([np.diag(V), V[b0, b0] + V[bg, bg] + 2 * V[b0, bg]])
    return est, np.sqrt(np.clip(var, 0.0, None))


def tracked_estimators(spec: CovariateSpec) -> int:
    """Estimators per replication over both methods: 2 (M + G K)."""
    return 2 * (ParameterIndex(spec).M + spec.G * spec.K)


def _rng(seed: int, r: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(r,))))


def _replicate(config: SimulationConfig, r: int):
    rng = _rng(config.seed, r)
    truth = draw_truth(config, rng)
    data = simulate_counts(truth, config.layout, rng)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        grid = build_discrete_posterior(data, config.d, config.delta0)
    mblr = mix(grid)
    rlr = fit_rlr(data)
    summ = prior_sd_summary(grid)
    sel = max_interaction_selection(mblr, truth)
    idx = mblr.index
    return {
        "truth": tracked(truth.theta_true.values, None, idx),
        "MBLR": tracked(mblr.theta_hat.values, mblr.V, idx),
        "RLR": tracked(rlr.theta_hat.values, rlr.V, idx),
        "phi": (summ["mean"], summ["sd"]),
        "selection": sel[1:],
        "warned": any(issubclass(w.category, RuntimeWarning) for w in caught),
    }


def _safe_replicate(config, r):
    try:
        return _replicate(config, r)
    except MBLRError as exc:
        log.warning("replication %d failed: %s", r, exc)
        return {"error": f"{exc.kind}: {exc}"}


def run_cell(config: SimulationConfig, progress=None) -> CellResult:
    """Run every replication of one cell; a failed fit drops that replication."""
    t0 = time.perf_counter()
    reps = range(config.n_sim)
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            outs = list(pool.map(lambda r: _safe_replicate(config, r), reps))
    else:
        outs = []
        for r in reps:
            outs.append(_safe_replicate(config, r))
            if progress is not None:
                progress(r + 1, config.n_sim)
    ok = [r for r, o in enumerate(outs) if "error" not in o]
    failures = [(r, outs[r]["error"]) for r in reps if "error" in outs[r]]
    M = tracked_estimators(config.layout.spec) // 2
    good = [outs[r] for r in ok]

    def stack(get, width):
        return np.array([get(o) for o in good]).reshape(len(good), width)

    return CellResult(
        config=config,
        q={m: stack(lambda o, m=m: o[m][0], M) for m in ("MBLR", "RLR")},
        se={m: stack(lambda o, m=m: o[m][1], M) for m in ("MBLR", "RLR")},
        theta=stack(lambda o: o["truth"], M),
        phi_mean=stack(lambda o: o["phi"][0], 4),
        phi_sd=stack(lambda o: o["phi"][1], 4),
        selection=stack(lambda o: o["selection"], 3),
        replications=np.array(ok, dtype=np.int64),
        failures=failures,
        dispersion_warnings=sum(o["warned"] for o in good),
        wall_time=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

TERM_TYPES = ("COV", "TREAT", "TRT*COV", "SUBGROUP")


def _subsets(cells: list[CellResult]):
    """(subset label, cells, issue filter) in report order.

    Issue filters are None (all issues), "frequent" or "rare"; filtered rows
    only report per-issue coefficients.
    """
    out = [("All simulations", cells, None)]
    factorial = len({(c.config.responses, c.config.means, c.config.psd) for c in cells}) > 1
    if factorial:
        for attr, name, levels in (
            ("responses", "Responses", ("frequent", "frequent+rare")),
            ("means", "Mean effects", ("zero", "large")),
            ("psd", "Prior SDs", ("small", "large")),
        ):
            for lev in levels:
                sub = [c for c in cells if getattr(c.config, attr) == lev]
                if sub:
                    out.append((f"{name}: {lev}", sub, None))
    if any(c.config.rare for c in cells):
        out.append(("Issues: frequent", cells, "frequent"))
        out.append(("Issues: rare", [c for c in cells if c.config.rare], "rare"))
    return out


def _estimator_mask(cell: CellResult, term_type: str, target: str, issues) -> np.ndarray:
    idx = ParameterIndex(cell.config.layout.spec)
    types = np.array([idx.term_type(s) for s in range(idx.M)] + ["SUBGROUP"] * (idx.G * idx.K))
    k = np.concatenate([idx.k, np.repeat(np.arange(idx.K), idx.G)])
    is_prior = k < 0
    mask = (types == term_type) & (is_prior if target == "PRIOR_MEAN" else ~is_prior)
    if issues is not None:
        rare = np.isin(k, cell.config.rare)
        mask &= rare if issues == "rare" else (~rare & ~is_prior)
    return mask


def accuracy_rows(cells: list[CellResult]) -> list[dict]:
    """Per-estimator statistics averaged over each (subset, method, term type, target) group."""
    rows = []
    for label, sub, issues in _subsets(cells):
        for method in ("RLR", "MBLR"):
            for tt in TERM_TYPES:
                if method == "RLR" and tt == "TRT*COV":
                    continue
                for target in ("PRIOR_MEAN", "RESPONSES"):
                    if issues is not None and target == "PRIOR_MEAN":
                        continue
                    stats, n_rep = [], 0
                    for c in sub:
                        if len(c.replications) == 0:
                            continue
                        mask = _estimator_mask(c, tt, target, issues)
                        if mask.any():
                            s = _per_estimator(c.q[method][:, mask], c.se[method][:, mask], c.theta[:, mask],
                                               c.config.level)
                            stats.append(s)
                            n_rep += len(c.replications)
                    if not stats:
                        continue
                    s = np.concatenate(stats, axis=1)
                    rows.append({
                        "subset": label, "method": method, "term_type": tt, "target": target,
                        "estimators": s.shape[1], "replications": n_rep,
                        **dict(zip(STAT_NAMES, s.mean(axis=1))),
                    })
    return rows


def phi_rows(cells: list[CellResult]) -> list[dict]:
    """Normalized prior-SD estimates: posterior means divided by the true values."""
    rows = []
    for label, sub, issues in _subsets(cells):
        if issues is not None:
            continue
        norm = [c.phi_mean / np.asarray(c.config.phi) for c in sub if len(c.replications)]
        if not norm:
            continue
        x = np.concatenate(norm)
        mean = x.mean(axis=0)
        sd = x.std(axis=0, ddof=1) if len(x) > 1 else np.zeros(4)
        row = {"subset": label, "replications": len(x)}
        for name, m, s in zip(PriorSdPoint._fields, mean, sd):
            row[name] = m
            row[f"SD_{name}"] = s
        rows.append(row)
    return rows


def selection_rows(cells: list[CellResult]) -> list[dict]:
    """Accuracy of the post-hoc selected largest interaction (MBLR)."""
    rows = []
    for label, sub, issues in _subsets(cells):
        if issues is not None:
            continue
        sel = [c.selection for c in sub if len(c.replications)]
        if not sel:
            continue
        x = np.concatenate(sel)
        est, sd, truth = x.T
        acc = accuracy_stats(est, sd, truth, sub[0].config.level)
        err = est - truth
        rows.append({
            "subset": label, "replications": len(x), "TRUE_INT": truth.mean(),
            "BIAS": acc.BIAS, "BIAS_SE": err.std(ddof=1) / np.sqrt(len(err)) if len(err) > 1 else float("nan"),
            "RMSE": acc.RMSE, "Z2": acc.Z2, "CI05": acc.CI05, "CI95": acc.CI95,
        })
    return rows


@dataclass
class SimulationReport:
    cells: list[CellResult]
    accuracy: list[dict]
    phi: list[dict]
    selection: list[dict]
    wall_time: float

    def find(self, subset="All simulations", method="MBLR", term_type="TREAT", target="RESPONSES") -> dict:
        for row in self.accuracy:
            if (row["subset"], row["method"], row["term_type"], row["target"]) == (subset, method, term_type, target):
                return row
        raise KeyError((subset, method, term_type, target))

    def metadata(self) -> dict:
        return {
            "rng": RNG_ALGORITHM,
            "cells": [
                {
                    "config": c.config.echo(),
                    "replications_ok": int(len(c.replications)),
                    "failures": [{"replication": r, "error": e} for r, e in c.failures],
                    "dispersion_warnings": int(c.dispersion_warnings),
                    "wall_time_s": round(c.wall_time, 3),
                }
                for c in self.cells
            ],
            "failure_count": sum(len(c.failures) for c in self.cells),
            "wall_time_s": round(self.wall_time, 3),
        }


def run_simulation(configs, progress=None) -> SimulationReport:
    """Run one or more cells and aggregate every report table."""
    if isinstance(configs, SimulationConfig):
        configs = [configs]
    t0 = time.perf_counter()
    cells = []
    for cfg in configs:
        log.info("simulating %s (n_sim=%d)", cfg.label, cfg.n_sim)
        cells.append(run_cell(cfg, progress))
    return SimulationReport(cells, accuracy_rows(cells), phi_rows(cells), selection_rows(cells),
                            time.perf_counter() - t0)
