from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ivtf.datagen import Dataset, generate_prompt, sample_task
from ivtf.estimators import ridge_two_sls, two_sls
from ivtf.gd2sls import (
    DivergenceError,
    GDState,
    LearningRates,
    choose_rates,
    contraction_factors,
    gd_step,
    iterate,
    max_learning_rates,
    ridge_gd_step,
    run_gd,
    tail_slope,
)
from ivtf.numerics import RngStream


def _prompt(seed: int, n: int = 50, p: int = 5, q: int = 10) -> Dataset:
    gen = RngStream(seed).generator()
    data, _ = generate_prompt(sample_task(p, q, gen), n, gen)
    return data


def _dataset(z, x, y) -> Dataset:
    z, x = np.asarray(z, float), np.asarray(x, float)
    return Dataset(z, x, np.asarray(y, float), np.zeros(z.shape[1]), np.zeros(x.shape[1]))


# Small instance whose first three iterates were computed in exact rationals.
GOLDEN = _dataset([[1, 0], [0, 1], [1, 1]], [[1], [2], [2]], [1, 3, 2])
GOLDEN_RATES = LearningRates(alpha=0.1, eta=0.2)
ENVELOPE_BURN_IN = 50
GOLDEN_TRAJECTORY = [  # (Theta_11, Theta_21, beta)
    (3 / 5, 4 / 5, 0.0),
    (4 / 5, 29 / 25, 29 / 50),
    (106 / 125, 167 / 125, 165941 / 156250),
]


# thresholds and contraction -----------------------------------------------------------


def test_max_learning_rates_identity_instruments():
    data = _dataset(np.eye(3), np.ones((3, 1)), np.ones(3))
    assert max_learning_rates(data)[1] == pytest.approx(2.0)


def test_max_learning_rates_scalar():
    data = _dataset([[2.0]], [[1.0]], [1.0])
    assert max_learning_rates(data)[1] == pytest.approx(0.5)


def test_max_learning_rates_definition():
    data = _prompt(0)
    z = data.z
    xh = z @ two_sls(data).theta_hat
    a_max, e_max = max_learning_rates(data)
    assert a_max == pytest.approx(2.0 / np.linalg.eigvalsh(xh.T @ xh)[-1], rel=1e-10)
    assert e_max == pytest.approx(2.0 / np.linalg.eigvalsh(z.T @ z)[-1], rel=1e-10)


def test_rate_modes():
    data = _prompt(1)
    a_max, e_max = max_learning_rates(data)
    safe, opt = choose_rates(data, "safe"), choose_rates(data, "optimal")
    assert (safe.alpha, safe.eta) == pytest.approx((0.75 * a_max, 0.75 * e_max))
    assert (opt.alpha, opt.eta) == pytest.approx((0.5 * a_max, 0.5 * e_max))
    assert safe.validate(data)
    assert not LearningRates(a_max, e_max).validate(data)
    with pytest.raises(ValueError):
        choose_rates(data, "fast")


def test_kappa_identity_gram_unit_step():
    data = _dataset(np.eye(2), np.eye(2), [1.0, 1.0])
    assert contraction_factors(data, LearningRates(0.5, 1.0)).kappa == pytest.approx(0.0, abs=1e-14)


def test_kappa_two_eigenvalues():
    data = _dataset(np.diag([1.0, 2.0]), np.ones((2, 1)), [1.0, 1.0])
    rep = contraction_factors(data, LearningRates(0.1, 0.4))
    assert rep.kappa == pytest.approx(0.6)


def test_contraction_matches_eigen_oracle():
    data = _prompt(2)
    rates = choose_rates(data, "safe")
    z = data.z
    xh = z @ two_sls(data).theta_hat
    gamma = np.max(np.abs(1 - rates.alpha * np.linalg.eigvalsh(xh.T @ xh)))
    kappa = np.max(np.abs(1 - rates.eta * np.linalg.eigvalsh(z.T @ z)))
    rep = contraction_factors(data, rates)
    assert rep.gamma == pytest.approx(gamma, abs=1e-9)
    assert rep.kappa == pytest.approx(kappa, abs=1e-9)
    assert rep.rate == max(rep.gamma, rep.kappa) < 1.0


@given(st.floats(0.01, 5.0))
@settings(max_examples=30, deadline=None)
def test_gamma_scale_invariance(scale):
    data = _prompt(3, n=20, p=2, q=3)
    rates = choose_rates(data, "safe")
    scaled = Dataset(data.z, scale * data.x, scale * data.y, data.z_query, data.x_query)
    base = contraction_factors(data, rates).gamma
    rescaled = contraction_factors(scaled, LearningRates(rates.alpha / scale**2, rates.eta)).gamma
    assert rescaled == pytest.approx(base, rel=1e-8)


# single steps --------------------------------------------------------------------------


def test_fixed_point_is_stationary():
    data = _prompt(4)
    ref = two_sls(data)
    state = GDState(ref.theta_hat, ref.beta_hat)
    nxt = gd_step(state, data, choose_rates(data))
    np.testing.assert_allclose(nxt.theta, ref.theta_hat, atol=1e-12)
    np.testing.assert_allclose(nxt.beta, ref.beta_hat, atol=1e-12)
    assert nxt.t == 1


def test_scalar_arithmetic_step():
    data = _dataset([[1.0]], [[1.0]], [1.0])
    nxt = gd_step(GDState.zeros(1, 1), data, LearningRates(0.1, 0.1))
    assert nxt.theta[0, 0] == pytest.approx(0.1)
    assert nxt.beta[0] == 0.0


def test_step_matches_straight_line_oracle():
    data = _prompt(5, n=12, p=3, q=4)
    rng = np.random.default_rng(0)
    state = GDState(rng.standard_normal((4, 3)), rng.standard_normal(3))
    rates = LearningRates(0.01, 0.02)
    z, x, y = data.z, data.x, data.y
    r_theta = np.einsum("il,lk->ik", z, state.theta) - x
    r_beta = np.einsum("il,lk,k->i", z, state.theta, state.beta) - y
    theta = state.theta - rates.eta * np.einsum("il,ik->lk", z, r_theta)
    beta = state.beta - rates.alpha * np.einsum("il,lk,i->k", z, state.theta, r_beta)
    nxt = gd_step(state, data, rates)
    np.testing.assert_allclose(nxt.theta, theta, atol=1e-12)
    np.testing.assert_allclose(nxt.beta, beta, atol=1e-12)


def test_golden_trajectory_uses_pre_update_theta():
    state = GDState.zeros(1, 2)
    for theta1, theta2, beta in GOLDEN_TRAJECTORY:
        state = gd_step(state, GOLDEN, GOLDEN_RATES)
        np.testing.assert_allclose(state.theta[:, 0], [theta1, theta2], atol=1e-14)
        assert state.beta[0] == pytest.approx(beta, abs=1e-14)
    # Feeding the updated Theta into the beta step would already move beta at t = 1.
    post = GDState.zeros(1, 2)
    theta_new = gd_step(post, GOLDEN, GOLDEN_RATES).theta
    xh = GOLDEN.z @ theta_new
    beta_post = -GOLDEN_RATES.alpha * xh.T @ (xh @ post.beta - GOLDEN.y)
    assert abs(beta_post[0] - GOLDEN_TRAJECTORY[0][2]) > 0.1


def test_ridge_step_reduces_to_plain_step():
    data = _prompt(6, n=10, p=2, q=3)
    rng = np.random.default_rng(1)
    state = GDState(rng.standard_normal((3, 2)), rng.standard_normal(2))
    rates = LearningRates(0.01, 0.02)
    a, b = ridge_gd_step(state, data, rates, 0.0, 0.0), gd_step(state, data, rates)
    np.testing.assert_array_equal(a.theta, b.theta)
    np.testing.assert_array_equal(a.beta, b.beta)


def test_ridge_step_shrinks_theta_on_empty_data():
    data = _dataset(np.zeros((3, 2)), np.zeros((3, 1)), np.zeros(3))
    state = GDState(np.ones((2, 1)), np.ones(1))
    nxt = ridge_gd_step(state, data, LearningRates(0.1, 0.5), 0.0, 1.0)
    np.testing.assert_allclose(nxt.theta, 0.5 * state.theta)


def test_ridge_fixed_point():
    data = _prompt(7, n=30, p=3, q=5)
    lam, tau = 0.5, 1.5
    traj = run_gd(data, choose_rates(data, "optimal"), 4000, lam=lam, tau=tau)
    ref = ridge_two_sls(data, lam, tau)
    np.testing.assert_allclose(traj.states[-1].beta, ref.beta_hat, atol=1e-7)
    assert traj.dist_beta[-1] <= 1e-7


# trajectories --------------------------------------------------------------------


def test_run_gd_lengths_and_start():
    data = _prompt(8, n=20, p=2, q=3)
    traj = run_gd(data, choose_rates(data), 25)
    assert len(traj.states) == len(traj.dist_beta) == len(traj.dist_theta) == 26
    assert traj.states[0].t == 0 and traj.states[-1].t == 25


def test_run_gd_from_fixed_point():
    data = _prompt(9)
    ref = two_sls(data)
    traj = run_gd(data, choose_rates(data), 50, init=GDState(ref.theta_hat, ref.beta_hat))
    assert max(traj.dist_beta) <= 1e-12 and max(traj.dist_theta) <= 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_inner_loop_contracts_every_step(seed):
    data = _prompt(seed)
    rates = choose_rates(data)
    kappa = contraction_factors(data, rates).kappa
    traj = run_gd(data, rates, 100)
    d = np.array(traj.dist_theta)
    assert np.all(d[1:] <= kappa * d[:-1] + 1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_safe_rates_tail_slope(seed):
    data = _prompt(seed + 10)
    rates = choose_rates(data)
    rate = contraction_factors(data, rates).rate
    traj = run_gd(data, rates, 1500)
    slope, start = tail_slope(traj.dist_beta)
    assert slope <= math.log(rate) + 0.05
    # The coupled iteration can decrease slower than Lambda for a few dozen
    # steps after the onset of monotone decrease, hence the extra burn-in.
    burn_in = start + ENVELOPE_BURN_IN
    d = np.array(traj.dist_beta)
    floor = 1e-11 * d.max()
    tail = [(a, b) for a, b in zip(d[burn_in:-1], d[burn_in + 1 :]) if b > floor]
    assert len(tail) >= 10
    assert all(b <= (rate + 0.02) * a for a, b in tail)


def test_eta_above_threshold_diverges():
    data = _prompt(11)
    a_max, e_max = max_learning_rates(data)
    with pytest.raises(DivergenceError) as err:
        run_gd(data, LearningRates(0.5 * a_max, 1.1 * e_max), 500)
    assert err.value.t < 500
    assert np.all(np.isfinite(err.value.last_state.theta))
    assert len(err.value.trajectory.dist_theta) == err.value.t


def test_iterate_matches_run_gd():
    data = _prompt(12, n=15, p=2, q=4)
    rates = choose_rates(data)
    thetas, betas = iterate(data, rates, 30, lam=0.3, tau=0.2)
    traj = run_gd(data, rates, 30, lam=0.3, tau=0.2)
    for t in (0, 1, 30):
        np.testing.assert_allclose(thetas[t], traj.states[t].theta, atol=1e-13)
        np.testing.assert_allclose(betas[t], traj.states[t].beta, atol=1e-13)


def test_iterate_divergence():
    data = _prompt(13)
    a_max, e_max = max_learning_rates(data)
    with pytest.raises(DivergenceError):
        iterate(data, LearningRates(a_max, 1.5 * e_max), 2000)


def test_step_counts_must_be_positive():
    data = _prompt(14, n=5, p=1, q=1)
    with pytest.raises(ValueError):
        run_gd(data, LearningRates(0.1, 0.1), 0)
    with pytest.raises(ValueError):
        iterate(data, LearningRates(0.1, 0.1), 0)


def test_under_identified_prediction_still_converges():
    from ivtf.datagen import UnderIdentified

    gen = RngStream(15).generator()
    data, _ = generate_prompt(sample_task(5, 10, gen), 50, gen, variant=UnderIdentified(3))
    rates = choose_rates(data)
    assert contraction_factors(data, rates).kappa == pytest.approx(1.0)
    traj = run_gd(data, rates, 3000)
    pred = traj.states[-1].beta @ data.x_query
    assert pred == pytest.approx(two_sls(data).predict(data.x_query), abs=1e-6)


def test_tail_slope_of_exact_geometric_sequence():
    d = 0.8 ** np.arange(60)
    slope, start = tail_slope(d)
    assert slope == pytest.approx(math.log(0.8), abs=1e-10)
    assert start == 0
