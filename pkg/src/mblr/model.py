"""Conditional posterior mode for fixed prior standard deviations.

For a fixed ``phi = (sigma_A, sigma_0, sigma_B, tau)`` the log posterior is
maximized by Newton-Raphson in the reduced (constraint-free) coordinates
``theta*``, with ``theta = Z theta*``.  The constant of the log posterior is
fixed at zero: binomial coefficients and ``2*pi`` factors are dropped, the
log-variance terms are kept, so values are comparable across ``phi``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
from scipy import linalg
from scipy.special import expit, log_expit

from .dataset import DesignEncoding, GroupedDataset, ParameterIndex, build_design
from .errors import ConvergenceError, EstimabilityError

log = logging.getLogger(__name__)

__all__ = [
    "PriorSdPoint",
    "CoefficientVector",
    "ConditionalPosterior",
    "linear_predictor",
    "predict_probabilities",
    "log_posterior",
    "score_and_hessian",
    "prior_precision",
    "maximize",
    "initial_theta",
]

GRAD_TOL = 1e-8
REL_TOL = 1e-12
MAX_ITER = 200
MAX_HALVINGS = 30


class PriorSdPoint(NamedTuple):
    sigma_A: float
    sigma_0: float
    sigma_B: float
    tau: float

    def check(self) -> "PriorSdPoint":
        a = np.asarray(self, dtype=float)
        if not (np.isfinite(a).all() and (a > 0).all()):
            raise ValueError(f"prior standard deviations must be finite and positive, got {tuple(self)}")
        return self


RLR_PHI = PriorSdPoint(5.0, 5.0, 0.001, 0.001)


@dataclass(frozen=True)
class CoefficientVector:
    """Full parameter vector with named views onto its blocks."""

    values: np.ndarray
    index: ParameterIndex

    @property
    def A(self):
        return self.values[self.index.A]

    @property
    def B0(self) -> float:
        return float(self.values[self.index.B0])

    @property
    def B(self):
        return self.values[self.index.B]

    @property
    def alpha0(self):
        return self.values[self.index.alpha0]

    @property
    def alpha(self):
        return self.values[self.index.alpha]

    @property
    def beta0(self):
        return self.values[self.index.beta0]

    @property
    def beta(self):
        return self.values[self.index.beta]

    def __len__(self):
        return len(self.values)

    @classmethod
    def from_blocks(cls, index: ParameterIndex, *, A=None, B0=0.0, B=None, alpha0=None,
                    alpha=None, beta0=None, beta=None) -> "CoefficientVector":
        v = np.zeros(index.M)
        if A is not None:
            v[index.A] = A
        v[index.B0] = B0
        if B is not None:
            v[index.B] = B
        if alpha0 is not None:
            v[index.alpha0] = alpha0
        if alpha is not None:
            v[index.alpha] = alpha
        if beta0 is not None:
            v[index.beta0] = beta0
        if beta is not None:
            v[index.beta] = beta
        return cls(v, index)


@dataclass(frozen=True)
class ConditionalPosterior:
    phi: PriorSdPoint
    theta_hat: CoefficientVector
    logL: float
    V: np.ndarray
    Vstar: np.ndarray
    log_det_Vstar: float
    iterations: int
    converged: bool
    grad_norm: float
    data_fingerprint: str

    @property
    def log_bf(self) -> float:
        """Laplace log marginal likelihood, ``log L + 0.5 log det V*``."""
        return self.logL + 0.5 * self.log_det_Vstar


def _values(theta):
    return theta.values if isinstance(theta, CoefficientVector) else np.asarray(theta, dtype=float)


# ---------------------------------------------------------------------------
# structure shared by all fits on one dataset
# ---------------------------------------------------------------------------


class _Problem:
    """Per-dataset matrices, built once and cached on the dataset."""

    def __init__(self, data: GroupedDataset):
        spec = data.spec
        self.data = data
        self.design: DesignEncoding = build_design(spec, data)
        self.index = self.design.index
        G, J, K = spec.G, spec.J, spec.K
        self.G, self.J, self.K = G, J, K
        X = data.X
        T = data.treat.astype(float)[:, None]
        self.D = np.hstack([np.ones((data.m, 1)), X, T, T * X])  # (m, 2G+2)
        self.Dr = self.D @ self.design.issue_Z  # (m, p)
        self.p = self.Dr.shape[1]
        self.pg = self.design.global_Z.shape[1]
        self.n = data.n.astype(float)
        self.N = data.N.astype(float)
        self.Q_full = _penalty_structure(self.index)
        Z = self.design.Z
        self.Q_red = tuple(Z.T @ Q @ Z for Q in self.Q_full)
        self.counts = (G - J, (G - J) * K, K, (G - J) * K)  # tau, sigma_A, sigma_0, sigma_B
        self.fingerprint = data.fingerprint()

    def issue_blocks(self, theta_r):
        return theta_r[self.pg :].reshape(self.K, self.p).T  # (p, K)

    def precision(self, phi):
        w = _weights(phi)
        return sum(wi * Q for wi, Q in zip(w, self.Q_red))

    def logdet_const(self, phi):
        sA, s0, sB, tau = phi
        c = self.counts
        return -0.5 * (c[0] * np.log(tau**2) + c[1] * np.log(sA**2) + c[2] * np.log(s0**2) + c[3] * np.log(sB**2))

    def evaluate(self, theta_r, Qr, const, need_hess=True):
        """Log posterior, reduced score and reduced negative Hessian."""
        eta = self.Dr @ self.issue_blocks(theta_r)  # (m, K)
        N, n = self.N, self.n[:, None]
        ll = float(np.sum(N * log_expit(eta) + (n - N) * log_expit(-eta)))
        Qt = Qr @ theta_r
        value = ll - 0.5 * float(theta_r @ Qt) + const
        P = expit(eta)
        grad = -Qt
        grad[self.pg :] += (self.Dr.T @ (N - n * P)).T.ravel()
        if not need_hess:
            return value, grad, None
        W = n * P * (1.0 - P)
        H = Qr.copy()
        info = np.einsum("ia,ik,ib->kab", self.Dr, W, self.Dr)
        for k in range(self.K):
            s = self.pg + k * self.p
            H[s : s + self.p, s : s + self.p] += info[k]
        return value, grad, H

    def loglik_only(self, theta_r, Qr, const):
        eta = self.Dr @ self.issue_blocks(theta_r)
        N, n = self.N, self.n[:, None]
        ll = float(np.sum(N * log_expit(eta) + (n - N) * log_expit(-eta)))
        return ll - 0.5 * float(theta_r @ (Qr @ theta_r)) + const


def _weights(phi):
    sA, s0, sB, tau = phi
    return (1.0 / tau**2, 1.0 / sA**2, 1.0 / s0**2, 1.0 / sB**2)


def _penalty_structure(idx: ParameterIndex):
    """Unit-precision matrices for the tau, sigma_A, sigma_0 and sigma_B penalties."""
    M = idx.M

    def diff_gram(a, b):
        Q = np.zeros((M, M))
        a, b = np.ravel(a), np.ravel(b)
        np.add.at(Q, (a, a), 1.0)
        np.add.at(Q, (b, b), 1.0)
        np.add.at(Q, (a, b), -1.0)
        np.add.at(Q, (b, a), -1.0)
        return Q

    Q_tau = np.zeros((M, M))
    Q_tau[idx.B, idx.B] = 1.0
    Q_A = diff_gram(idx.alpha, np.repeat(idx.A[:, None], idx.K, axis=1))
    Q_0 = diff_gram(idx.beta0, np.full(idx.K, idx.B0))
    Q_B = diff_gram(idx.beta, np.repeat(idx.B[:, None], idx.K, axis=1))
    return Q_tau, Q_A, Q_0, Q_B


def _problem(data: GroupedDataset) -> _Problem:
    prob = data._cache.get("problem")
    if prob is None:
        prob = data._cache["problem"] = _Problem(data)
    return prob


# ---------------------------------------------------------------------------
# full-space evaluations
# ---------------------------------------------------------------------------


def linear_predictor(theta, data: GroupedDataset) -> np.ndarray:
    """(m, K) log-odds for every stratum and issue."""
    prob = _problem(data)
    v = _values(theta)
    blocks = v[2 * prob.G + 1 :].reshape(prob.K, 2 * prob.G + 2).T
    return prob.D @ blocks


def predict_probabilities(theta, data: GroupedDataset) -> np.ndarray:
    return expit(linear_predictor(theta, data))


def prior_precision(phi, data: GroupedDataset) -> np.ndarray:
    """Full-space prior precision matrix (the data-free part of H)."""
    return sum(w * Q for w, Q in zip(_weights(phi), _problem(data).Q_full))


def log_posterior(theta, phi, data: GroupedDataset) -> float:
    prob = _problem(data)
    v = _values(theta)
    eta = linear_predictor(v, data)
    N, n = prob.N, prob.n[:, None]
    ll = float(np.sum(N * log_expit(eta) + (n - N) * log_expit(-eta))) if data.m else 0.0
    Q = prior_precision(phi, data)
    return ll - 0.5 * float(v @ Q @ v) + prob.logdet_const(phi)


def score_and_hessian(theta, phi, data: GroupedDataset) -> tuple[np.ndarray, np.ndarray]:
    """Gradient and negative Hessian of :func:`log_posterior` in the full space."""
    prob = _problem(data)
    v = _values(theta)
    Q = prior_precision(phi, data)
    S = -Q @ v
    H = Q.copy()
    if data.m:
        P = predict_probabilities(v, data)
        W = prob.n[:, None] * P * (1 - P)
        R = prob.N - prob.n[:, None] * P
        w = 2 * prob.G + 2
        for k in range(prob.K):
            s = 2 * prob.G + 1 + k * w
            S[s : s + w] += prob.D.T @ R[:, k]
            H[s : s + w, s : s + w] += (prob.D * W[:, k : k + 1]).T @ prob.D
    return S, H


def initial_theta(data: GroupedDataset) -> CoefficientVector:
    """Cold start: empirical log-odds for each intercept, zero elsewhere."""
    idx = _problem(data).index
    n_tot, N_tot = data.totals()
    bad = [data.spec.issues[k] for k in range(data.spec.K) if not 0 < N_tot[k] < n_tot]
    if bad:
        raise EstimabilityError(
            f"issue(s) {', '.join(bad)} have zero or all subjects affected; the model cannot be fitted"
        )
    v = np.zeros(idx.M)
    v[idx.alpha0] = np.log(N_tot / (n_tot - N_tot))
    return CoefficientVector(v, idx)


# ---------------------------------------------------------------------------
# Newton-Raphson
# ---------------------------------------------------------------------------


def maximize(
    phi,
    data: GroupedDataset,
    warm_start: CoefficientVector | np.ndarray | None = None,
    *,
    grad_tol: float = GRAD_TOL,
    rel_tol: float = REL_TOL,
    max_iter: int = MAX_ITER,
    callback: Callable[[int, float, float], None] | None = None,
) -> ConditionalPosterior:
    """Posterior mode, covariance and log height at fixed ``phi``.

    Raises
    ------
    EstimabilityError
        An issue has no events (or only events), or ``Z'HZ`` is not
        positive definite.
    ConvergenceError
        ``max_iter`` Newton iterations without meeting either tolerance.
    """
    phi = PriorSdPoint(*map(float, phi)).check()
    prob = _problem(data)
    start = initial_theta(data) if warm_start is None else warm_start
    theta_r = prob.design.reduce(_values(start)).copy()

    Qr = prob.precision(phi)
    const = prob.logdet_const(phi)
    value, grad, H = prob.evaluate(theta_r, Qr, const)
    it = 0
    converged = False
    while True:
        gnorm = float(np.max(np.abs(grad))) if grad.size else 0.0
        if callback is not None:
            callback(it, value, gnorm)
        log.debug("newton it=%d logL=%.10g |grad|=%.3g", it, value, gnorm)
        if gnorm <= grad_tol:
            converged = True
            break
        if it >= max_iter:
            raise ConvergenceError(
                f"Newton-Raphson did not converge in {max_iter} iterations at phi={tuple(phi)}",
                last=CoefficientVector(prob.design.Z @ theta_r, prob.index),
            )
        cf = _cholesky(H, phi)
        step = linalg.cho_solve(cf, grad)
        t = 1.0
        for _ in range(MAX_HALVINGS + 1):
            trial = theta_r + t * step
            new = prob.loglik_only(trial, Qr, const)
            if np.isfinite(new) and new >= value:
                break
            t *= 0.5
        else:
            # no representable ascent left along the Newton direction
            converged = True
            break
        it += 1
        change = abs(new - value)
        theta_r = trial
        old, (value, grad, H) = value, prob.evaluate(theta_r, Qr, const)
        if change <= rel_tol * max(1.0, abs(old)):
            converged = True
            gnorm = float(np.max(np.abs(grad))) if grad.size else 0.0
            break

    cf = _cholesky(H, phi)
    Vstar = linalg.cho_solve(cf, np.eye(H.shape[0]))
    Vstar = 0.5 * (Vstar + Vstar.T)
    log_det_Vstar = -2.0 * float(np.sum(np.log(np.diag(cf[0]))))
    Z = prob.design.Z
    V = Z @ Vstar @ Z.T
    return ConditionalPosterior(
        phi=phi,
        theta_hat=CoefficientVector(Z @ theta_r, prob.index),
        logL=float(value),
        V=V,
        Vstar=Vstar,
        log_det_Vstar=log_det_Vstar,
        iterations=it,
        converged=converged,
        grad_norm=float(np.max(np.abs(grad))) if grad.size else 0.0,
        data_fingerprint=prob.fingerprint,
    )


def _cholesky(H, phi):
    try:
        return linalg.cho_factor(H, lower=False, check_finite=True)
    except (linalg.LinAlgError, ValueError):
        raise EstimabilityError(
            f"reduced Hessian is not positive definite at phi={tuple(phi)}; "
            "drop such predictors or add additional response variables"
        ) from None
