import dataclasses
import warnings
from types import SimpleNamespace

import numpy as np
import pytest

from mblr.dataset import build_design
from mblr.grid import build_discrete_posterior
from mblr.model import RLR_PHI, CoefficientVector, maximize
from mblr.posterior import (
    MixturePosterior,
    bayes_factor_vs_rlr,
    estimate_table,
    fit_rlr,
    mix,
    odds_ratio_ci,
    prior_sd_summary,
    subgroup_effects,
    z_value,
)
from mblr.simulate import draw_truth, make_config, simulate_counts

from conftest import full_layout, make_spec, random_dataset
from oracles import irls_logistic


def fake_grid(thetas, Vs, pi, index):
    fits = [SimpleNamespace(theta_hat=CoefficientVector(t, index), V=V) for t, V in zip(thetas, Vs)]
    return SimpleNamespace(fits=fits, pi=np.asarray(pi, float))


def random_spd(rng, M):
    A = rng.standard_normal((M, M))
    return A @ A.T / M


@pytest.fixture
def index():
    return build_design(make_spec((2,), 1)).index


def test_mix_single_point(rng, index):
    t = rng.standard_normal(index.M)
    V = random_spd(rng, index.M)
    post = mix(fake_grid([t], [V], [1.0], index))
    assert np.allclose(post.theta_hat.values, t)
    assert np.allclose(post.V, V)


def test_mix_pure_spread(rng, index):
    u = rng.standard_normal(index.M)
    Z = np.zeros((index.M, index.M))
    post = mix(fake_grid([u, -u], [Z, Z], [0.5, 0.5], index))
    assert np.allclose(post.theta_hat.values, 0)
    assert np.allclose(post.V, np.outer(u, u))


def test_mix_spread_oracle(rng, index):
    S, M = 5, index.M
    thetas = rng.standard_normal((S, M))
    Vs = [random_spd(rng, M) for _ in range(S)]
    pi = rng.dirichlet(np.ones(S))
    post = mix(fake_grid(thetas, Vs, pi, index))
    mean = np.zeros(M)
    for s in range(S):
        mean += pi[s] * thetas[s]
    spread = np.zeros((M, M))
    for s in range(S):
        d = thetas[s] - mean
        spread += pi[s] * np.outer(d, d)
    within = sum(p * V for p, V in zip(pi, Vs))
    assert np.allclose(post.theta_hat.values, mean, atol=1e-12)
    assert np.allclose(post.V - within, spread, atol=1e-12)


def test_mix_dominates_within(rng, index):
    S, M = 7, index.M
    thetas = rng.standard_normal((S, M))
    Vs = [random_spd(rng, M) for _ in range(S)]
    pi = rng.dirichlet(np.ones(S))
    post = mix(fake_grid(thetas, Vs, pi, index))
    assert np.allclose(post.V, post.V.T)
    for x in rng.standard_normal((100, M)):
        assert x @ post.V @ x >= sum(p * (x @ V @ x) for p, V in zip(pi, Vs)) - 1e-12


def test_z_values():
    assert z_value(0.90) == 1.645
    assert z_value(0.95) == pytest.approx(1.959964, abs=1e-6)
    for bad in (0, 1, 1.5):
        with pytest.raises(ValueError):
            z_value(bad)


@pytest.mark.parametrize(
    "b, v, expected",
    [(0.0, 0.0, (1, 1, 1)), (0.0, 1.0, (0.1930, 1, 5.181)), (np.log(2), 0.0, (2, 2, 2))],
)
def test_odds_ratio_ci_examples(b, v, expected):
    assert odds_ratio_ci(b, v) == pytest.approx(expected, abs=5e-4)


def test_odds_ratio_ci_negative_variance():
    with pytest.raises(ValueError):
        odds_ratio_ci(0.0, -1e-3)


def test_ci_nesting(rng):
    for b, v in zip(rng.normal(size=50), rng.uniform(1e-6, 4, size=50)):
        lo90, pt, hi90 = odds_ratio_ci(b, v, 0.90)
        lo95, _, hi95 = odds_ratio_ci(b, v, 0.95)
        assert lo95 < lo90 < pt < hi90 < hi95
        assert pt == pytest.approx(np.exp(b))


def _post_with(index, theta, V):
    return MixturePosterior(CoefficientVector(theta, index), V, "MBLR", [], np.ones(1))


def test_subgroup_independent_sum(index):
    V = np.eye(index.M) * 0.01
    post = _post_with(index, np.zeros(index.M), V)
    rows = [e for e in subgroup_effects(post) if e.issue == index.issues[0]]
    assert len(rows) == index.G
    assert all(e.sd == pytest.approx(np.sqrt(0.02)) for e in rows)


def test_subgroup_cancellation(index):
    theta = np.zeros(index.M)
    b0, bg = index.beta0[0], index.beta[0, 0]
    theta[b0], theta[bg] = 0.7, -0.7
    V = np.eye(index.M) * 0.05
    V[b0, bg] = V[bg, b0] = -0.05
    row = next(e for e in subgroup_effects(_post_with(index, theta, V)) if e.issue == index.issues[0])
    assert row.sd == 0 and row.coef == pytest.approx(0)
    assert row.or_low == row.or_point == row.or_high == pytest.approx(1)


def test_subgroup_monte_carlo_oracle():
    rng = np.random.default_rng(77)
    idx = build_design(make_spec((2, 3), 2)).index
    theta = rng.normal(size=idx.M)
    V = random_spd(rng, idx.M) * 0.1
    n = 10**6
    draws = rng.multivariate_normal(theta, V, size=n)
    post = _post_with(idx, theta, V)
    rows = subgroup_effects(post)
    pairs = [(idx.B0, idx.B)] + [(idx.beta0[k], idx.beta[:, k]) for k in range(idx.K)]
    i = 0
    for b0, bg in pairs:
        for g in range(idx.G):
            s = draws[:, b0] + draws[:, bg[g]]
            mc_mean, mc_sd = s.mean(), s.std()
            assert abs(rows[i].coef - mc_mean) < 3 * mc_sd / np.sqrt(n)
            # SE of a sample variance under normality is sd^2 sqrt(2/n)
            assert abs(rows[i].sd**2 - mc_sd**2) < 3 * mc_sd**2 * np.sqrt(2 / n)
            i += 1
    assert i == len(rows)


def test_rlr_interactions_pinned():
    for seed in range(5):
        data = random_dataset(np.random.default_rng(seed), sizes=(2, 3), K=3, n_range=(10, 60))
        post = fit_rlr(data)
        assert post.method == "RLR" and post.pi.tolist() == [1.0]
        assert np.abs(post.theta_hat.beta).max() < 1e-4
        assert np.abs(post.theta_hat.B).max() < 1e-4


def test_rlr_matches_main_effects_logistic():
    rng = np.random.default_rng(21)
    spec = make_spec((2, 2), 2)
    lay = full_layout(spec, n_per=400)
    eta = -1.0 + 0.4 * lay.treat[:, None] + (lay.X @ np.array([0.3, -0.3, -0.2, 0.2]))[:, None] * np.array([[1, 0.5]])
    data = lay.with_counts(rng.binomial(lay.n[:, None], 1 / (1 + np.exp(-eta))))
    assert data.N.min() >= 20
    post = fit_rlr(data)
    X = lay.X
    # effect coding for each two-level covariate
    D = np.column_stack([np.ones(lay.m), X[:, 0] - X[:, 1], X[:, 2] - X[:, 3], lay.treat])
    th = post.theta_hat
    for k in range(2):
        ref = irls_logistic(D, data.N[:, k], data.n)
        got = [th.alpha0[k], th.alpha[0, k], th.alpha[2, k], th.beta0[k]]
        assert np.allclose(got, ref, atol=1e-2)


def test_rlr_separated_finite():
    spec = make_spec((2,), 2)
    lay = full_layout(spec, n_per=30)
    N = np.zeros((lay.m, 2), int)
    N[:, 0] = 5
    N[lay.treat == 1, 1] = 3
    post = fit_rlr(lay.with_counts(N))
    assert np.isfinite(post.theta_hat.values).all() and np.isfinite(post.V).all()


def test_bayes_factor_self_comparison(small_data):
    rlr = fit_rlr(small_data)
    grid = SimpleNamespace(fits=[maximize(RLR_PHI, small_data)], pi=np.ones(1))
    bf = bayes_factor_vs_rlr(grid, rlr)
    assert bf.log_ratio == pytest.approx(0, abs=1e-9)


def test_bayes_factor_arithmetic(small_data):
    rlr = fit_rlr(small_data)
    base = rlr.fits[0]
    other = dataclasses.replace(base, logL=base.logL + 1)
    bf = bayes_factor_vs_rlr(SimpleNamespace(fits=[other], pi=np.ones(1)), rlr)
    assert bf.log_ratio == pytest.approx(1, abs=1e-12)
    mixed = bayes_factor_vs_rlr(SimpleNamespace(fits=[base, other], pi=np.array([0.5, 0.5])), rlr)
    assert mixed.log_ratio == pytest.approx(np.log(0.5 + 0.5 * np.e), abs=1e-12)
    assert mixed.log_ratio_per_point == pytest.approx([0, 1], abs=1e-12)


def test_bayes_factor_data_mismatch(small_data):
    other = small_data.with_counts(small_data.N[:, ::-1])
    grid = SimpleNamespace(fits=[maximize(RLR_PHI, other)], pi=np.ones(1))
    with pytest.raises(ValueError, match="different data"):
        bayes_factor_vs_rlr(grid, fit_rlr(small_data))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_bayes_factor_favours_mblr_under_similarity():
    cfg = dataclasses.replace(make_config("desk"), phi=(0.2, 0.05, 0.05, 0.05))
    rng = np.random.default_rng(3)
    wins = 0
    for _ in range(100):
        data = simulate_counts(draw_truth(cfg, rng), cfg.layout, rng)
        wins += bayes_factor_vs_rlr(build_discrete_posterior(data), fit_rlr(data)).log_ratio > 0
    assert wins >= 95


def test_prior_sd_summary_uniform_symmetric():
    phis = np.array([[0.5, 0.5, 0.5, 0.5], [0.7, 0.3, 0.9, 0.1], [0.3, 0.7, 0.1, 0.9]])
    out = prior_sd_summary(SimpleNamespace(phis=phis, pi=np.full(3, 1 / 3)))
    assert np.allclose(out["mean"], 0.5)
    assert out["dispersion"] == pytest.approx(1 / 3)


def test_prior_sd_summary_single_point():
    out = prior_sd_summary(SimpleNamespace(phis=np.array([[0.4, 0.3, 0.2, 0.1]]), pi=np.ones(1)))
    assert np.allclose(out["sd"], 0) and out["dispersion"] == 1


def test_prior_sd_summary_equal_weights(rng):
    out = prior_sd_summary(SimpleNamespace(phis=rng.uniform(0.1, 1.4, (33, 4)), pi=np.full(33, 1 / 33)))
    assert out["dispersion"] == pytest.approx(1 / 33)
    assert out["dispersion"] == pytest.approx(0.0303, abs=1e-4)


def test_estimate_labels_complete(small_data):
    post = fit_rlr(small_data)
    rows = estimate_table(post)
    idx = post.index
    slot_rows = rows[: idx.M]
    keys = [(e.term, e.issue) for e in slot_rows]
    assert len(set(keys)) == idx.M
    assert any(e.issue == "PRIOR_MEAN" and e.term_type == "TREAT" for e in slot_rows)
    sub = rows[idx.M :]
    assert len(sub) == idx.G * (idx.K + 1)
    assert all(e.term_type == "SUBGROUP" for e in sub)
    pinned = {e.term_type for e in slot_rows if e.pinned}
    assert pinned == {"TRT*COV"}
    for e in rows:
        assert e.or_point == pytest.approx(np.exp(e.coef))
        if e.sd > 0:
            assert e.or_low < e.or_point < e.or_high


def test_mblr_shrinks_toward_prior_mean():
    """With a shared true effect, MBLR issue effects sit nearer their common mean than RLR's do."""
    rng = np.random.default_rng(99)
    spec = make_spec((2,), 2)
    hits = trials = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for _ in range(20):
            lay = full_layout(spec, n_per=60)
            eta = -1.5 + 0.5 * lay.treat[:, None] + np.zeros((1, 2))
            data = lay.with_counts(rng.binomial(lay.n[:, None], 1 / (1 + np.exp(-eta))))
            mb = mix(build_discrete_posterior(data)).theta_hat
            rl = fit_rlr(data).theta_hat
            for k in range(2):
                trials += 1
                hits += abs(mb.beta0[k] - mb.B0) <= abs(rl.beta0[k] - rl.beta0.mean()) + 1e-12
    assert hits >= 0.9 * trials
