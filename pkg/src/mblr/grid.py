"""Discrete approximation of the posterior over the prior standard deviations.

The four prior SDs live in ``(0, d)^4``; searching happens on the logistic
scale ``lambda`` where ``sigma = d / (1 + exp(-lambda))``.  A 33-point double
central composite design is laid around the posterior peak, a quadratic
response surface gives location and scale, and the grid weights are tilted
so the discrete distribution reproduces those moments exactly.
"""

from __future__ import annotations

import itertools
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .dataset import GroupedDataset
from .errors import ConvergenceError, SurfaceDegeneracyError
from .model import ConditionalPosterior, PriorSdPoint, maximize

log = logging.getLogger(__name__)

__all__ = [
    "lambda_to_phi",
    "phi_to_lambda",
    "log_jacobian",
    "log_g",
    "LogGEvaluator",
    "steepest_ascent",
    "composite_design",
    "ResponseSurfaceFit",
    "fit_quadratic_surface",
    "kl_reweight",
    "feasible_reweight",
    "DiscretePosterior",
    "build_discrete_posterior",
]

D_DEFAULT = 1.5
DELTA0_DEFAULT = 0.3
DISPERSION_WARN = 0.2
S_POINTS = 33


def lambda_to_phi(lam, d: float = D_DEFAULT) -> PriorSdPoint:
    lam = np.asarray(lam, dtype=float)
    return PriorSdPoint(*(d / (1.0 + np.exp(-lam))).tolist())


def phi_to_lambda(phi, d: float = D_DEFAULT) -> np.ndarray:
    s = np.asarray(phi, dtype=float)
    if d <= 0 or not ((s > 0) & (s < d)).all():
        raise ValueError(f"prior SDs must lie strictly inside (0, {d}); got {tuple(s)}")
    return np.log(s / (d - s))


def log_jacobian(lam, d: float = D_DEFAULT) -> float:
    """Log prior density of ``lambda`` induced by a uniform prior on ``(0, d)``."""
    lam = np.asarray(lam, dtype=float)
    # sigma (d - sigma) = d^2 e^{-lam} / (1 + e^{-lam})^2
    return float(np.sum(2 * np.log(d) - lam - 2 * np.logaddexp(0.0, -lam)))


def log_g(lam, data: GroupedDataset, d: float = D_DEFAULT, warm_start=None) -> tuple[float, ConditionalPosterior]:
    """Unnormalised log posterior density of ``lambda`` (Laplace approximation)."""
    fit = maximize(lambda_to_phi(lam, d), data, warm_start)
    return log_jacobian(lam, d) + fit.log_bf, fit


class LogGEvaluator:
    """Memoising ``log g`` evaluator.

    Calls warm-start the Newton fit from the best fit seen so far.
    """

    def __init__(self, data: GroupedDataset, d: float = D_DEFAULT):
        self.data, self.d = data, d
        self.cache: dict[tuple, tuple[float, ConditionalPosterior]] = {}
        self.calls = 0
        self.best: tuple[float, ConditionalPosterior] | None = None

    @staticmethod
    def key(lam) -> tuple:
        return tuple(np.round(np.asarray(lam, dtype=float), 14).tolist())

    def evaluate(self, lam, warm_start=None) -> tuple[float, ConditionalPosterior]:
        key = self.key(lam)
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        if warm_start is None and self.best is not None:
            warm_start = self.best[1].theta_hat
        out = log_g(key, self.data, self.d, warm_start)
        self.store(key, out)
        return out

    def store(self, key, out):
        self.calls += 1
        self.cache[key] = out
        if self.best is None or out[0] > self.best[0]:
            self.best = out

    def __call__(self, lam) -> float:
        return self.evaluate(lam)[0]


def steepest_ascent(
    target,
    d: float = D_DEFAULT,
    start=(0.0, 0.0, 0.0, 0.0),
    *,
    h: float = 0.05,
    f_tol: float = 1e-6,
    g_tol: float = 1e-4,
    budget: int = 200,
) -> np.ndarray:
    """Maximise ``log g`` by steepest ascent with forward-difference gradients.

    ``target`` is a :class:`GroupedDataset` or any callable mapping a
    length-4 ``lambda`` to ``log g``.  Each line search backtracks from a
    unit step (halving) to the first improvement, then takes one parabolic
    refinement.  The difference step starts at ``h`` and follows the
    accepted step length down, so the one-sided difference bias vanishes
    near the peak.

    Raises
    ------
    ConvergenceError
        More than ``budget`` evaluations; ``.last`` holds the best point.
    """
    fn = LogGEvaluator(target, d) if isinstance(target, GroupedDataset) else target
    calls = 0
    x = np.asarray(start, dtype=float).copy()

    def f(p):
        nonlocal calls
        if calls >= budget:
            raise ConvergenceError(
                f"steepest ascent exhausted its budget of {budget} log g evaluations", last=x.copy()
            )
        calls += 1
        return float(fn(p))

    h_min = 1e-5
    fx = f(x)
    step_len = None
    while True:
        grad = np.array([(f(x + h * e) - fx) / h for e in np.eye(len(x))])
        gn = float(np.linalg.norm(grad))
        if gn < g_tol:
            break
        u = grad / gn
        t = 1.0 if step_len is None else min(1.0, 2.0 * step_len)
        ft = -np.inf
        while t >= 1e-7:
            ft = f(x + t * u)
            if ft > fx:
                break
            t *= 0.5
        if not ft > fx:
            if h <= h_min:
                break
            h = max(h_min, 0.25 * h)
            continue
        curv = (ft - fx - gn * t) / t**2
        if curv < 0:
            s_opt = -gn / (2 * curv)
            if 0 < s_opt <= 4 * t and abs(s_opt - t) > 0.1 * t:
                fs = f(x + s_opt * u)
                if fs > ft:
                    t, ft = s_opt, fs
        gain = ft - fx
        x = x + t * u
        fx = ft
        step_len = t
        h = min(h, max(h_min, 0.5 * t))
        log.debug("ascent lambda=%s log g=%.10g gain=%.3g", np.round(x, 5), fx, gain)
        if gain < f_tol:
            break
    return x


def composite_design(center, scale) -> np.ndarray:
    """33-point double central composite design, shape ``(33, 4)``.

    Row order: centre, inner half-fraction factorial (even number of minus
    signs), outer half-fraction (odd), inner star points, outer star points.
    The outer sphere uses 1.5 times the inner scale; star points sit at twice
    the factorial offset along one axis.
    """
    c = np.asarray(center, dtype=float)
    s = np.asarray(scale, dtype=float)
    if c.shape != (4,) or s.shape != (4,):
        raise ValueError("centre and scale must have length 4")
    if not (s > 0).all():
        raise ValueError("scales must be positive")
    signs = np.array(list(itertools.product((-1.0, 1.0), repeat=4)))
    even = signs[np.prod(signs, axis=1) > 0]
    odd = signs[np.prod(signs, axis=1) < 0]
    star = np.array([sgn * e for e in np.eye(4) for sgn in (-1.0, 1.0)])
    pts = [c[None, :], c + even * s, c + odd * 1.5 * s, c + 2.0 * star * s, c + 3.0 * star * s]
    return np.vstack(pts)


@dataclass(frozen=True)
class ResponseSurfaceFit:
    """Quadratic ``c0 + c.lam + sum_{i<=j} C_ij lam_i lam_j`` fitted to ``log g``.

    ``C`` is stored symmetric with ``C[i, i] = c_ii`` and ``C[i, j] = C[j, i] = c_ij``.
    ``Hmat`` is the implied precision matrix of ``lambda``: diagonal ``-2 c_ii``,
    off-diagonal ``-c_ij`` (the same matrix
    read off a fit to ``-2 log g``).
    """

    c0: float
    c: np.ndarray
    C: np.ndarray
    lambda_fit: np.ndarray
    delta: np.ndarray
    Hmat: np.ndarray
    residual_rms: float


def _quad_columns(u):
    u = np.atleast_2d(u)
    cols = [np.ones(len(u))]
    cols += [u[:, i] for i in range(4)]
    cols += [u[:, i] * u[:, j] for i in range(4) for j in range(i, 4)]
    return np.column_stack(cols)


def fit_quadratic_surface(points, values) -> ResponseSurfaceFit:
    pts = np.asarray(points, dtype=float)
    y = np.asarray(values, dtype=float)
    origin = pts.mean(axis=0)
    X = _quad_columns(pts - origin)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise SurfaceDegeneracyError("design does not support a full quadratic fit")
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    cu0, cu = coef[0], coef[1:5]
    C = np.zeros((4, 4))
    q = iter(coef[5:])
    for i in range(4):
        for j in range(i, 4):
            C[i, j] = C[j, i] = next(q)
    # gradient of the quadratic part is Mgrad @ u, with Mgrad = diag(2 c_ii) + offdiag(c_ij)
    Mgrad = C + np.diag(np.diag(C))
    # back to raw lambda coordinates
    c = cu - Mgrad @ origin
    c0 = cu0 - cu @ origin + 0.5 * origin @ Mgrad @ origin
    Hmat = -Mgrad
    try:
        cf = linalg.cho_factor(Hmat)
    except linalg.LinAlgError:
        raise SurfaceDegeneracyError(
            "fitted response surface has no interior maximum; widen d or check the data"
        ) from None
    lam_fit = linalg.cho_solve(cf, c)
    Hinv = linalg.cho_solve(cf, np.eye(4))
    delta = np.sqrt(np.diag(Hinv))
    return ResponseSurfaceFit(float(c0), c, C, lam_fit, delta, Hmat, float(np.sqrt(np.mean(resid**2))))


def kl_reweight(points, log_g_values, lambda_fit, delta, *, tol: float = 1e-13, max_iter: int = 100) -> np.ndarray:
    """Weights closest in KL divergence to ``g`` that match the target moments.

    Solves for the Lagrange multipliers of ``sum pi = 1``,
    ``sum pi lam = lambda_fit`` and ``sum pi (lam - lambda_fit)^2 = delta^2``
    by Newton-Raphson; ``pi_s = w_s / (mu + nu.(lam_s) + kappa.(lam_s - fit)^2)``.
    """
    lam = np.atleast_2d(np.asarray(points, dtype=float))
    lv = np.asarray(log_g_values, dtype=float)
    fit = np.atleast_1d(np.asarray(lambda_fit, dtype=float))
    dl = np.atleast_1d(np.asarray(delta, dtype=float))
    w = np.exp(lv - lv.max())
    w /= w.sum()
    u = lam - fit
    A = np.hstack([np.ones((len(w), 1)), u, u**2])
    b = np.concatenate([[1.0], np.zeros(len(fit)), dl**2])

    def dual(eta):
        den = A @ eta
        if (den <= 0).any():
            return -np.inf
        return float(w @ np.log(den) - eta @ b)

    eta = np.zeros(A.shape[1])
    eta[0] = 1.0
    value = dual(eta)
    for it in range(max_iter):
        den = A @ eta
        pi = w / den
        F = A.T @ pi - b
        if np.max(np.abs(F)) <= tol:
            break
        Jm = (A * (pi**2 / w)[:, None]).T @ A
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", linalg.LinAlgWarning)
                step = linalg.solve(Jm, F, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            step = np.linalg.lstsq(Jm, F, rcond=None)[0]
        t = 1.0
        fn = np.max(np.abs(F))
        for _ in range(60):
            cand = eta + t * step
            v = dual(cand)
            # near the optimum the dual is flat to rounding; the residual still guides
            if v >= value or (np.isfinite(v) and np.max(np.abs(A.T @ (w / (A @ cand)) - b)) < fn):
                break
            t *= 0.5
        else:
            break
        if np.max(np.abs(cand - eta)) < 1e-16:
            eta = cand
            break
        eta, value = cand, v
    pi = w / (A @ eta)
    resid = np.max(np.abs(A.T @ pi - b))
    if not (pi > 0).all() or resid > 1e-8:
        raise ConvergenceError(f"KL reweighting failed; max constraint residual {resid:.3g}", last=pi)
    return pi


@dataclass
class DiscretePosterior:
    lambdas: np.ndarray  # (33, 4)
    phis: np.ndarray  # (33, 4)
    fits: list[ConditionalPosterior]
    log_g: np.ndarray  # (33,)
    pi: np.ndarray  # (33,)
    lambda_max: np.ndarray
    lambda_fit: np.ndarray
    delta: np.ndarray
    surface: ResponseSurfaceFit
    d: float = D_DEFAULT
    delta0: float = DELTA0_DEFAULT
    initial_surface: ResponseSurfaceFit | None = None
    evaluations: int = 0
    newton_iterations: int = 0
    data_fingerprint: str = field(default="")
    variance_scale: float = 1.0  # below 1 when the second-moment targets had to be shrunk

    @property
    def S(self) -> int:
        return len(self.pi)

    @property
    def dispersion(self) -> float:
        return float(np.sum(self.pi**2))


def feasible_reweight(points, log_g_values, lambda_fit, delta, *, step: float = 0.05, bisections: int = 12):
    """``kl_reweight``, shrinking the variance targets when the design cannot reach them.

    Returns ``(pi, c)`` where ``c`` multiplies ``delta``.  ``c = 1`` is the
    plain solution; otherwise ``c`` is close to the largest feasible scale
    (scanned downwards, then bisected).  ``c = 0`` means no scale worked and
    ``pi`` is proportional to ``g``.
    """
    delta = np.asarray(delta, dtype=float)

    def attempt(c):
        try:
            return kl_reweight(points, log_g_values, lambda_fit, c * delta)
        except ConvergenceError:
            return None

    pi = attempt(1.0)
    if pi is not None:
        return pi, 1.0
    # a shifted mean also bounds the variance from below, so the feasible scales form an interval
    for c in np.arange(1.0 - step, step / 2, -step):
        pi = attempt(c)
        if pi is not None:
            lo, hi = c, min(c + step, 1.0)
            for _ in range(bisections):
                mid = 0.5 * (lo + hi)
                cand = attempt(mid)
                if cand is None:
                    hi = mid
                else:
                    lo, pi = mid, cand
            return pi, float(lo)
    lv = np.asarray(log_g_values, dtype=float)
    w = np.exp(lv - lv.max())
    return w / w.sum(), 0.0


def _evaluate_points(ev: LogGEvaluator, pts, anchor: ConditionalPosterior, threads: int):
    """Evaluate ``log g`` at each row, every fit warm-started from ``anchor``.

    Results do not depend on evaluation order, so the thread pool is safe.
    """
    keys = [ev.key(p) for p in pts]
    todo = list(dict.fromkeys(k for k in keys if k not in ev.cache))
    start = anchor.theta_hat
    if threads > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda k: log_g(k, ev.data, ev.d, start), todo))
        for k, r in zip(todo, results):
            ev.store(k, r)
    else:
        for k in todo:
            ev.store(k, log_g(k, ev.data, ev.d, start))
    out = [ev.cache[k] for k in keys]
    return np.array([o[0] for o in out]), [o[1] for o in out]


def build_discrete_posterior(
    data: GroupedDataset,
    d: float = D_DEFAULT,
    delta0: float = DELTA0_DEFAULT,
    *,
    threads: int = 1,
    ascent_budget: int = 200,
) -> DiscretePosterior:
    """Steps 1-5: ascent, two composite designs with surface fits, KL tilt."""
    if d <= 0 or delta0 <= 0:
        raise ValueError("d and delta0 must be positive")

    ev = LogGEvaluator(data, d)
    lam_max = steepest_ascent(ev, d, budget=ascent_budget)
    _, center_fit = ev.evaluate(lam_max)
    log.info("peak search: lambda_max=%s after %d fits", np.round(lam_max, 4).tolist(), ev.calls)

    design1 = composite_design(lam_max, np.full(4, delta0))
    vals1, _ = _evaluate_points(ev, design1, center_fit, threads)
    surf1 = fit_quadratic_surface(design1, vals1)
    log.info("initial surface: delta=%s", np.round(surf1.delta, 4).tolist())

    design2 = composite_design(lam_max, surf1.delta)
    vals2, fits2 = _evaluate_points(ev, design2, center_fit, threads)
    surf2 = fit_quadratic_surface(design2, vals2)
    pi, scale = feasible_reweight(design2, vals2, surf2.lambda_fit, surf2.delta)
    if scale < 1:
        warnings.warn(
            f"moment targets unreachable on the design; variance targets scaled by {scale:.3f}",
            RuntimeWarning,
            stacklevel=2,
        )
    post = DiscretePosterior(
        lambdas=design2,
        phis=np.array([lambda_to_phi(p, d) for p in design2]),
        fits=fits2,
        log_g=vals2,
        pi=pi,
        lambda_max=lam_max,
        lambda_fit=surf2.lambda_fit,
        delta=surf2.delta,
        surface=surf2,
        d=d,
        delta0=delta0,
        initial_surface=surf1,
        evaluations=ev.calls,
        newton_iterations=sum(fit.iterations for _, fit in ev.cache.values()),
        data_fingerprint=center_fit.data_fingerprint,
        variance_scale=scale,
    )
    if post.dispersion > DISPERSION_WARN:
        warnings.warn(
            f"grid weight dispersion {post.dispersion:.3f} exceeds {DISPERSION_WARN}; "
            "the grid scale or location may be poorly chosen",
            RuntimeWarning,
            stacklevel=2,
        )
    return post
