import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mblr.dataset import ParameterIndex, build_design
from mblr.model import CoefficientVector
from mblr.posterior import MixturePosterior
from mblr.simulate import (
    PSD_LEVELS,
    TruthDraw,
    _rng,
    accuracy_stats,
    draw_truth,
    make_config,
    max_interaction_selection,
    profile_configs,
    run_cell,
    run_simulation,
    simulate_counts,
    tracked,
    tracked_estimators,
)

from conftest import full_layout, make_spec


def test_zero_phi_truth():
    cfg = dataclasses.replace(make_config("desk"), phi=(0.0, 0.0, 0.0, 0.0))
    t = draw_truth(cfg, np.random.default_rng(0)).theta_true
    A = np.array(cfg.A)
    for blk in cfg.layout.spec.blocks():
        A[blk] -= A[blk].mean()
    assert np.allclose(t.A, A)
    assert np.allclose(t.alpha, A[:, None])
    assert np.allclose(t.beta0, cfg.B0)
    assert np.all(t.beta == 0) and np.all(t.B == 0)


@pytest.mark.parametrize("profile, psd", [("desk", "small"), ("desk", "large"), ("trial", "large")])
def test_truth_constraints(profile, psd):
    cfg = make_config(profile, psd=psd)
    idx = ParameterIndex(cfg.layout.spec)
    rng = np.random.default_rng(1)
    for _ in range(20):
        t = draw_truth(cfg, rng)
        for blk in idx.constraint_blocks(cfg.layout.spec):
            assert abs(t.theta_true.values[blk].sum()) < 1e-12
        assert ((t.P > 0) & (t.P < 1)).all()


def pooled_interaction_sd(cfg, draws, seed):
    """Within-block sample variance (c - 1 divisor) undoes the recentring, so it targets the generating SD."""
    rng = np.random.default_rng(seed)
    blocks = cfg.layout.spec.blocks()
    ss = dof = 0.0
    for _ in range(draws):
        beta = draw_truth(cfg, rng).theta_true.beta
        for blk in blocks:
            ss += np.sum(beta[blk] ** 2)
            dof += (len(blk) - 1) * beta.shape[1]
    return np.sqrt(ss / dof)


def test_large_psd_interaction_sd():
    phi = PSD_LEVELS["large"]
    target = np.hypot(phi.sigma_B, phi.tau)
    assert target == pytest.approx(1.131, abs=5e-4)
    sd = pooled_interaction_sd(make_config("desk", psd="large"), 2000, 2)
    assert sd == pytest.approx(target, rel=0.03)


def _truth_with(P, spec):
    return TruthDraw(CoefficientVector(np.zeros(ParameterIndex(spec).M), ParameterIndex(spec)), P)


def test_binomial_boundaries():
    spec = make_spec((2,), 2)
    lay = full_layout(spec, n_per=17)
    P = np.zeros((lay.m, 2))
    P[:, 1] = 1
    data = simulate_counts(_truth_with(P, spec), lay, np.random.default_rng(0))
    assert np.all(data.N[:, 0] == 0) and np.all(data.N[:, 1] == lay.n)


def test_binomial_law_of_large_numbers():
    spec = make_spec((2,), 2)
    lay = full_layout(spec, n_per=25)
    rng = np.random.default_rng(4)
    P = rng.uniform(0.05, 0.6, size=(lay.m, 2))
    truth = _truth_with(P, spec)
    draws = 10**4
    total = np.zeros_like(P)
    for _ in range(draws):
        total += simulate_counts(truth, lay, rng).N
    mean = total / draws
    se = np.sqrt(lay.n[:, None] * P * (1 - P) / draws)
    assert np.all(np.abs(mean - lay.n[:, None] * P) < 3 * se)


def test_counts_reproducible():
    cfg = make_config("desk")
    a = simulate_counts(draw_truth(cfg, _rng(9, 3)), cfg.layout, _rng(9, 3))
    rng = _rng(9, 3)
    b = simulate_counts(draw_truth(cfg, rng), cfg.layout, rng)
    c_rng = _rng(9, 3)
    c = simulate_counts(draw_truth(cfg, c_rng), cfg.layout, c_rng)
    assert np.array_equal(b.N, c.N)
    assert not np.array_equal(a.N, simulate_counts(draw_truth(cfg, _rng(9, 4)), cfg.layout, _rng(9, 4)).N)


def test_accuracy_perfect_estimator():
    th = np.array([0.3, -1.0, 2.0])
    s = accuracy_stats(th, np.ones(3), th)
    assert s.as_tuple() == (0, 0, 0, 0, 0) and s.count == 3


def test_accuracy_hand_arithmetic():
    s = accuracy_stats(np.ones(4) + 1, np.ones(4), np.ones(4))
    assert s.as_tuple() == pytest.approx((1, 1, 1, 0, 0))


def test_accuracy_miss_directions():
    # truth far above the interval counts towards CI05, far below towards CI95
    s = accuracy_stats([0, 0, 0, 0], [1, 1, 1, 1], [3, 0, -3, -3])
    assert (s.CI05, s.CI95) == (0.25, 0.5)


def test_accuracy_random_oracle(rng):
    n = 57
    q, se, th = rng.normal(size=n), rng.uniform(0.2, 2, size=n), rng.normal(size=n)
    bias = rmse = z2 = c05 = c95 = 0.0
    for i in range(n):
        e = q[i] - th[i]
        bias += e / n
        rmse += e * e / n
        z2 += (e / se[i]) ** 2 / n
        c05 += (q[i] + 1.645 * se[i] < th[i]) / n
        c95 += (q[i] - 1.645 * se[i] > th[i]) / n
    s = accuracy_stats(q, se, th)
    assert np.allclose(s.as_tuple(), (bias, np.sqrt(rmse), z2, c05, c95), rtol=0, atol=1e-12)


def test_accuracy_length_mismatch():
    with pytest.raises(ValueError):
        accuracy_stats([1, 2], [1, 1], [1])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(0.01, 3), st.floats(-5, 5)), min_size=1, max_size=40))
def test_accuracy_invariants(rows):
    q, se, th = map(np.array, zip(*rows))
    s = accuracy_stats(q, se, th)
    assert s.RMSE >= abs(s.BIAS) - 1e-12
    assert 0 <= s.CI05 <= 1 and 0 <= s.CI95 <= 1 and s.Z2 >= 0


def _interaction_fit(beta, sd=0.1):
    spec = make_spec((2, 3), beta.shape[1])
    idx = build_design(spec).index
    theta = np.zeros(idx.M)
    theta[idx.beta] = beta
    V = np.eye(idx.M) * sd**2
    return MixturePosterior(CoefficientVector(theta, idx), V, "MBLR", [], np.ones(1)), idx


def test_selection_planted():
    beta = np.zeros((5, 3))
    beta[3, 1] = 0.8
    fit, idx = _interaction_fit(beta)
    truth = TruthDraw(fit.theta_hat, None)
    (g, k), est, sd, tv = max_interaction_selection(fit, truth)
    assert (g, k) == (3, 1) and est == pytest.approx(0.8) and sd == pytest.approx(0.1) and tv == pytest.approx(0.8)


def test_selection_signed_and_tie_rule():
    fit, _ = _interaction_fit(np.full((5, 2), 0.3))
    assert max_interaction_selection(fit, TruthDraw(fit.theta_hat, None))[0] == (0, 0)
    beta = np.zeros((5, 2))
    beta[0, 0] = -2.0
    beta[4, 1] = 0.5
    fit, _ = _interaction_fit(beta)
    assert max_interaction_selection(fit, TruthDraw(fit.theta_hat, None))[0] == (4, 1)


def test_tracked_estimator_count():
    cfg = make_config("trial", responses="frequent+rare")
    assert cfg.layout.spec.K == 10
    assert ParameterIndex(cfg.layout.spec).M == 373
    assert tracked_estimators(cfg.layout.spec) == 1066
    assert tracked_estimators(make_config("trial", responses="frequent").layout.spec) == 566


def test_tracked_subgroup_sums(rng):
    idx = build_design(make_spec((2, 3), 2)).index
    v = rng.normal(size=idx.M)
    A = rng.normal(size=(idx.M, idx.M))
    est, sd = tracked(v, A @ A.T, idx)
    assert len(est) == idx.M + idx.G * idx.K
    assert est[idx.M + idx.G + 2] == pytest.approx(v[idx.beta0[1]] + v[idx.beta[2, 1]])
    u = np.zeros(idx.M)
    u[[idx.beta0[1], idx.beta[2, 1]]] = 1
    assert sd[idx.M + idx.G + 2] == pytest.approx(np.sqrt(u @ A @ A.T @ u))


@pytest.fixture(scope="module")
def smoke_report():
    return run_simulation(make_config("smoke", n_sim=3, seed=5))


def test_report_row_counts(smoke_report):
    by_subset = {}
    for row in smoke_report.accuracy:
        by_subset.setdefault(row["subset"], []).append(row)
    # All simulations: RLR (COV, TREAT, SUBGROUP) and MBLR (all four), prior-mean rows only where defined
    assert len(by_subset["All simulations"]) == 3 * 2 - 1 + 4 * 2 - 1
    assert {r["method"] for r in by_subset["All simulations"] if r["term_type"] == "TRT*COV"} == {"MBLR"}
    for sub in ("Issues: frequent", "Issues: rare"):
        assert len(by_subset[sub]) == 3 + 4
        assert all(r["target"] == "RESPONSES" for r in by_subset[sub])
    for row in smoke_report.accuracy:
        assert row["replications"] == 3
        assert row["RMSE"] >= abs(row["BIAS"]) - 1e-12


def test_report_estimator_counts(smoke_report):
    spec = smoke_report.cells[0].config.layout.spec
    G, K = spec.G, spec.K
    mb = {(r["subset"], r["term_type"], r["target"]): r["estimators"]
          for r in smoke_report.accuracy if r["method"] == "MBLR"}
    assert mb[("All simulations", "COV", "RESPONSES")] == G * K  # intercepts are not COV
    assert mb[("All simulations", "TRT*COV", "PRIOR_MEAN")] == G
    assert mb[("All simulations", "SUBGROUP", "RESPONSES")] == G * K
    assert mb[("Issues: rare", "TREAT", "RESPONSES")] == 2


def test_phi_rows_normalised(smoke_report):
    cell = smoke_report.cells[0]
    row = smoke_report.phi[0]
    expected = (cell.phi_mean / np.asarray(cell.config.phi)).mean(axis=0)
    assert [row[n] for n in ("sigma_A", "sigma_0", "sigma_B", "tau")] == pytest.approx(expected, rel=1e-14)


def test_metadata(smoke_report):
    meta = smoke_report.metadata()
    assert "PCG64" in meta["rng"]
    assert meta["cells"][0]["config"]["seed"] == 5
    assert meta["failure_count"] == 0


def test_factorial_subsets():
    cfgs = profile_configs("smoke", factorial=True, n_sim=1)
    assert len(cfgs) == 8
    assert len({c.label for c in cfgs}) == 8
    assert {c.layout.spec.K for c in cfgs} == {2, 4}


def test_parallel_matches_serial():
    cfg = make_config("smoke", n_sim=4, seed=11)
    a = run_cell(cfg)
    b = run_cell(dataclasses.replace(cfg, threads=3))
    for m in ("MBLR", "RLR"):
        assert np.array_equal(a.q[m], b.q[m]) and np.array_equal(a.se[m], b.se[m])
    assert np.array_equal(a.theta, b.theta)


def test_recovery_with_near_infinite_information():
    spec = make_spec((2,), 2)
    lay = full_layout(spec, n_per=200_000)
    cfg = dataclasses.replace(
        make_config("desk", n_sim=1),
        layout=lay, intercepts=(-1.0, -1.5), A=(0.2, -0.2), B0=0.5, phi=(1e-3,) * 4, rare=(),
    )
    cell = run_cell(cfg)
    assert len(cell.replications) == 1
    assert np.max(np.abs(cell.q["MBLR"][0] - cell.theta[0])) < 0.05


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_selected_interaction_unbiased():
    """With prior SDs well inside the hyperprior range the posterior is calibrated, so selection adds no bias."""
    row = run_simulation(make_config("desk", psd="large", n_sim=200, seed=314)).selection[0]
    assert row["replications"] == 200
    assert abs(row["BIAS"]) < 3 * row["BIAS_SE"]
