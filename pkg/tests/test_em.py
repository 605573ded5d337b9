import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize_scalar

from stratcox.cox import breslow, fit_complete_case, fit_complete_gamma
from stratcox.em import (Direction, EStepError, canonical_directions, e_step, fit,
                         m_step_beta, m_step_gamma, m_step_lambda, profile_objective,
                         score_at)
from stratcox.model import (Dataset, FitConfig, Params, log_densities,
                            observed_log_likelihood, stratum_probs)

from conftest import draw, sim_config, step


def _tiny(r, s, status, times=(1.0, 2.0, 3.0), K=2):
    n = len(times)
    return Dataset.from_arrays(time=times, status=status, x=np.zeros((n, 1)),
                               w=np.ones((n, 1)), r=r, s=s, k_strata=K, validate=False)


# E-step

def test_known_stratum_row_is_indicator():
    data = _tiny([1], [1], [1], times=(1.0,), K=3)
    theta = Params(np.zeros(1), np.zeros((2, 1)), [step([1.0], [0.3])] * 3)
    np.testing.assert_array_equal(e_step(theta, data), [[0.0, 1.0, 0.0]])


def test_censored_unknown_equal_baselines_gives_prior():
    data = Dataset.from_arrays([1.0], [0], [[0.4]], [[1.0, 0.5]], [0], [-1], k_strata=2,
                               validate=False)
    gamma = np.array([[0.2, -1.0]])
    theta = Params(np.zeros(1), gamma, [step([0.5], [0.7])] * 2)
    np.testing.assert_allclose(e_step(theta, data)[0], stratum_probs(gamma, [1.0, 0.5]),
                               atol=1e-15)


def test_unknown_event_hand_normalized():
    data = _tiny([0], [-1], [1], times=(1.0,))
    theta = Params(np.zeros(1), np.zeros((1, 1)),
                   (step([0.4, 1.0], [0.3, 0.2]), step([0.6, 1.0], [0.2, 0.1])))
    a = np.array([0.2 * math.exp(-0.5), 0.1 * math.exp(-0.3)])
    np.testing.assert_allclose(e_step(theta, data)[0], a / a.sum(), atol=1e-15)


def test_zero_density_row_raises_naming_subject():
    data = _tiny([1, 0], [0, -1], [1, 1], times=(1.0, 2.0))
    theta = Params(np.zeros(1), np.zeros((1, 1)), (step([1.0], [0.5]), step([1.0], [0.5])))
    with pytest.raises(EStepError, match="subject 2"):
        e_step(theta, data)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 5000), st.sampled_from([2, 3]))
def test_weight_matrix_invariants(seed, K):
    data = draw(sim_config(n=80, K=K, missing=0.4, seed=seed))
    res = fit(data, FitConfig(max_em_iters=5))
    q = e_step(res.theta_hat, data)
    assert np.all((q >= 0) & (q <= 1))
    np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-12)
    known = data.r == 1
    np.testing.assert_array_equal(q[known], np.eye(K)[data.s[known]])


# Lambda update

def test_lambda_update_nelson_aalen():
    data = Dataset.from_arrays(time=[1.0, 2.0, 3.0, 4.0], status=[1, 0, 1, 1],
                               x=np.array([[0.3], [1.0], [-2.0], [0.5]]), w=np.ones((4, 1)),
                               r=[1] * 4, s=[0] * 4, k_strata=1)
    (bl,) = m_step_lambda(np.ones((4, 1)), np.zeros(1), data)
    np.testing.assert_allclose(bl.jump_sizes, [1 / 4, 1 / 2, 1 / 1], rtol=1e-15)


def test_lambda_update_equals_breslow():
    data = draw(sim_config(n=150, K=3, missing=0.0, seed=12))
    beta = np.array([0.7, -0.3])
    q = np.eye(3)[data.s]
    for mine, ref in zip(m_step_lambda(q, beta, data), breslow(beta, data)):
        np.testing.assert_array_equal(mine.jump_times, ref.jump_times)
        np.testing.assert_allclose(mine.jump_sizes, ref.jump_sizes, rtol=1e-12, atol=0)


def test_lambda_update_three_subjects_by_hand():
    data = Dataset.from_arrays(time=[1.0, 2.0, 3.0], status=[1, 1, 0],
                               x=np.array([[0.0], [1.0], [0.5]]), w=np.ones((3, 1)),
                               r=[1, 0, 1], s=[0, -1, 1], k_strata=2, validate=False)
    q = np.array([[1.0, 0.0], [0.3, 0.7], [0.0, 1.0]])
    beta = np.array([0.4])
    e = np.exp(0.4 * np.array([0.0, 1.0, 0.5]))
    l1, l2 = m_step_lambda(q, beta, data)
    np.testing.assert_array_equal(l1.jump_times, [1.0, 2.0])
    np.testing.assert_allclose(l1.jump_sizes, [1 / (e[0] + 0.3 * e[1]), 0.3 / (0.3 * e[1])],
                               rtol=1e-15)
    np.testing.assert_array_equal(l2.jump_times, [2.0])
    np.testing.assert_allclose(l2.jump_sizes, [0.7 / (0.7 * e[1] + e[2])], rtol=1e-15)


def test_lambda_update_empty_risk_set():
    # exp(beta'x) underflows, so the weighted risk set at t=2 is empty
    data = Dataset.from_arrays(time=[1.0, 2.0], status=[1, 1], x=[[0.0], [-800.0]],
                               w=[[1.0], [1.0]], r=[1, 0], s=[0, -1], k_strata=2,
                               validate=False)
    q = np.array([[1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(ZeroDivisionError, match="stratum 2.*2.0"):
        m_step_lambda(q, np.ones(1), data)


# gamma update

def test_gamma_uniform_weights():
    w = np.ones((30, 1))
    data = Dataset.from_arrays(time=np.arange(1, 31.0), status=np.ones(30), x=np.zeros((30, 1)),
                               w=w, r=np.zeros(30), s=-np.ones(30), k_strata=3, validate=False)
    gamma, _ = m_step_gamma(np.full((30, 3), 1 / 3), data)
    np.testing.assert_allclose(gamma, 0.0, atol=1e-12)


def test_gamma_intercept_closed_form():
    n = 40
    rng = np.random.default_rng(0)
    u = rng.uniform(-1, 1, n)
    q1 = 0.7 + 0.25 * (u - u.mean())
    data = Dataset.from_arrays(time=np.arange(1, n + 1.0), status=np.ones(n), x=np.zeros((n, 1)),
                               w=np.ones((n, 1)), r=np.zeros(n), s=-np.ones(n), k_strata=2,
                               validate=False)
    gamma, _ = m_step_gamma(np.column_stack([q1, 1 - q1]), data)
    assert gamma[0, 0] == pytest.approx(math.log(0.7 / 0.3), abs=1e-10)
    assert gamma[0, 0] == pytest.approx(0.8473, abs=1e-4)


# beta update

def test_beta_update_full_data_equals_complete_case():
    data = draw(sim_config(n=150, K=2, missing=0.0, seed=21))
    beta, _ = m_step_beta(np.eye(2)[data.s], data)
    np.testing.assert_allclose(beta, fit_complete_case(data).beta_pl, atol=1e-8)


def test_beta_update_zero_covariate():
    data = draw(sim_config(n=60, K=2, missing=0.3, seed=2))
    zero = Dataset.from_arrays(data.time, data.status, np.zeros((data.n, 1)), data.w,
                               data.r, data.s, k_strata=2, tau=data.tau)
    q = e_step(fit(zero, FitConfig(max_em_iters=3)).theta_hat, zero)
    beta, res = m_step_beta(q, zero)
    assert beta[0] == 0.0 and res.grad_norm == 0.0


def _naive_profile(b, q, data):
    total = 0.0
    for k in range(data.k_strata):
        for i in np.flatnonzero(data.status == 1):
            if q[i, k] <= 0:
                continue
            den = sum(q[j, k] * math.exp(b * data.x[j, 0])
                      for j in range(data.n) if data.time[j] >= data.time[i])
            total += q[i, k] * (b * data.x[i, 0] - math.log(den))
    return total


def test_beta_update_fractional_weights_grid_polish():
    cfg = sim_config(n=20, K=2, missing=0.4, seed=31, beta=[0.8],
                     x=[{"dist": "uniform", "low": -1, "high": 1}], w=[{"dist": "constant"}],
                     gamma=[[0.3]])
    data = draw(cfg)
    rng = np.random.default_rng(4)
    q = np.eye(2)[np.maximum(data.s, 0)]
    unk = data.r == 0
    u = rng.uniform(0.1, 0.9, unk.sum())
    q[unk] = np.column_stack([u, 1 - u])
    grid = np.linspace(-4, 4, 161)
    b0 = grid[np.argmax([_naive_profile(b, q, data) for b in grid])]
    ref = minimize_scalar(lambda b: -_naive_profile(b, q, data), bracket=(b0 - 0.05, b0 + 0.05),
                          tol=1e-12).x
    beta, _ = m_step_beta(q, data)
    assert beta[0] == pytest.approx(ref, abs=1e-6)
    assert profile_objective(beta, q, data, False) * data.n == pytest.approx(
        _naive_profile(beta[0], q, data), abs=1e-10)


# fitting

def test_full_data_reduction():
    data = draw(sim_config(n=100, K=2, missing=0.0, seed=40))
    res = fit(data)
    cc, gam = fit_complete_case(data), fit_complete_gamma(data)
    th = res.theta_hat
    assert res.converged
    np.testing.assert_allclose(th.beta, cc.beta_pl, atol=1e-6)
    np.testing.assert_allclose(th.gamma, gam.gamma, atol=1e-6)
    for mine, ref in zip(th.baselines, breslow(cc.beta_pl, data)):
        np.testing.assert_allclose(mine(data.time), ref(data.time), atol=1e-6)


def test_single_stratum_is_ordinary_cox():
    data = draw(sim_config(n=120, K=1, missing=0.0, seed=41))
    res = fit(data)
    cc = fit_complete_case(data)
    assert res.converged and res.theta_hat.gamma.size == 0
    np.testing.assert_allclose(res.theta_hat.beta, cc.beta_pl, atol=1e-8)
    np.testing.assert_allclose(res.theta_hat.baselines[0](data.time), cc.breslow[0](data.time),
                               atol=1e-8)


@pytest.fixture(scope="module")
def fit200():
    data = draw(sim_config(n=200, K=2, missing=0.3, seed=3))
    return data, fit(data)


def test_fit_converges_monotone_with_small_scores(fit200):
    data, res = fit200
    assert res.converged
    assert np.all(np.diff(res.loglik_trace) >= -1e-10)
    assert len(res.loglik_trace) == res.em_iterations + 1
    assert set(res.score_residuals) == set(canonical_directions(data))
    assert max(abs(v) for v in res.score_residuals.values()) < 1e-6


def test_jumps_positive_exactly_where_weight_is_positive(fit200):
    data, res = fit200
    q = e_step(res.theta_hat, data)
    for k, bl in enumerate(res.theta_hat.baselines):
        ev = data.support_rows[k]
        np.testing.assert_array_equal(bl.jump_times, data.time[ev])
        np.testing.assert_array_equal(bl.jump_sizes > 0, q[ev, k] > 0)


def test_permutation_invariance(fit200):
    data, res = fit200
    perm = np.random.default_rng(0).permutation(data.n)
    other = fit(data.subset(perm))
    th, tp = res.theta_hat, other.theta_hat
    np.testing.assert_allclose(tp.beta, th.beta, atol=1e-10)
    np.testing.assert_allclose(tp.gamma, th.gamma, atol=1e-10)
    np.testing.assert_allclose(tp.cumulative(data.time), th.cumulative(data.time), atol=1e-10)


def test_nonconvergence_is_flagged(fit200):
    data, _ = fit200
    res = fit(data, FitConfig(max_em_iters=2))
    assert not res.converged and res.em_iterations == 2
    assert any("no convergence" in f for f in res.flags)


def test_monotone_likelihood_stalls_with_flag():
    # a small sample where the binary covariate effect runs off to infinity
    data = draw(sim_config(n=30, seed=3))
    res = fit(data)
    assert not res.converged
    assert any("stalled" in f for f in res.flags)
    assert res.em_iterations < 1000


def test_user_supplied_start(fit200):
    data, res = fit200
    again = fit(data, FitConfig(init="user_supplied", init_params=res.theta_hat))
    assert again.converged and again.em_iterations <= 3


# score operator

def test_zero_direction_gives_zero(fit200):
    data, res = fit200
    assert score_at(res.theta_hat, data, Direction.zeros(data.p, data.q, 2)) == 0.0


def test_score_direction_dimension_check(fit200):
    data, res = fit200
    with pytest.raises(ValueError):
        score_at(res.theta_hat, data, Direction.zeros(data.p + 1, data.q, 2))


def _perturbed(theta, data, d_beta=None, d_gamma=None, lam=None, eps=0.0):
    beta = theta.beta + (0 if d_beta is None else eps * d_beta)
    gamma = theta.gamma_flat + (0 if d_gamma is None else eps * d_gamma)
    bls = list(theta.baselines)
    if lam is not None:
        k, cut = lam
        b = bls[k]
        bls[k] = step(b.jump_times, b.jump_sizes * (1 + eps * (b.jump_times <= cut)))
    return Params(beta, gamma, bls)


def _expected_complete(theta, data, q):
    """Mean complete-data log-likelihood with fixed weights ``q``."""
    lf = log_densities(theta, data)
    with np.errstate(invalid="ignore"):
        return float(np.sum(np.where(q > 0, q * lf, 0.0))) / data.n


def test_score_matches_finite_difference_of_expected_complete_loglik(fit200):
    data, res = fit200
    rng = np.random.default_rng(5)
    theta = _perturbed(res.theta_hat, data, d_beta=rng.normal(size=2),
                       d_gamma=rng.normal(size=2), eps=0.05)
    q = e_step(theta, data)
    cut = float(np.median(data.event_times))
    eps = 1e-6
    cases = [(dict(d_beta=np.eye(2)[r]), Direction.beta_unit(2, 2, 2, r)) for r in range(2)]
    cases += [(dict(d_gamma=np.eye(2)[r]), Direction.gamma_unit(2, 2, 2, r)) for r in range(2)]
    cases += [(dict(lam=(k, cut)), Direction.lambda_indicator(2, 2, 2, k, cut)) for k in range(2)]
    for kw, direction in cases:
        up = _expected_complete(_perturbed(theta, data, eps=eps, **kw), data, q)
        dn = _expected_complete(_perturbed(theta, data, eps=-eps, **kw), data, q)
        fd = (up - dn) / (2 * eps)
        assert score_at(theta, data, direction, weights=q) == pytest.approx(fd, abs=1e-7)


def test_score_matches_finite_difference_of_observed_loglik(fit200):
    data, res = fit200
    theta = _perturbed(res.theta_hat, data, d_beta=np.array([0.1, -0.2]), eps=1.0)
    eps = 1e-6
    for r in range(2):
        d = np.eye(2)[r]
        up = observed_log_likelihood(_perturbed(theta, data, d_beta=d, eps=eps), data)
        dn = observed_log_likelihood(_perturbed(theta, data, d_beta=d, eps=-eps), data)
        fd = (up - dn) / (2 * eps) / data.n
        assert score_at(theta, data, Direction.beta_unit(2, 2, 2, r)) == pytest.approx(fd, abs=1e-7)
