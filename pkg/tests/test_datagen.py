from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ivtf.datagen import (
    ClipBounds,
    Dataset,
    EndogeneityStrength,
    IvStrength,
    Multicollinearity,
    NonlinearMlp,
    QuadraticIv,
    Standard,
    TaskParams,
    UnderIdentified,
    clip,
    empirical_iv_strength,
    generate_prompt,
    sample_task,
)
from ivtf.estimators import ols
from ivtf.numerics import RngStream


def _noiseless(task: TaskParams) -> TaskParams:
    p = task.p
    return replace(task, cov_u=np.zeros((p, p)), cov_omega=np.zeros((p, p)), sigma_eps=0.0)


# sample_task ---------------------------------------------------------------------


def test_sample_task_shapes_and_defaults():
    task = sample_task(5, 10, RngStream(0))
    assert task.theta.shape == (10, 5)
    np.testing.assert_array_equal(task.cov_z, np.eye(10))
    assert task.sigma_eps == 1.0
    assert (task.p, task.q) == (5, 10)


def test_sample_task_deterministic():
    a, b = sample_task(3, 4, RngStream(9, 1)), sample_task(3, 4, RngStream(9, 1))
    for name in ("theta", "beta", "big_phi", "small_phi"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_sample_task_beta_entries_centered():
    gen = RngStream(2).generator()
    betas = np.concatenate([sample_task(10, 1, gen).beta for _ in range(1000)])
    assert abs(betas.mean()) <= 0.05


def test_task_params_validation():
    task = sample_task(2, 3, 0)
    with pytest.raises(ValueError):
        replace(task, beta=np.zeros(3))
    with pytest.raises(ValueError):
        replace(task, cov_u=np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        replace(task, sigma_eps=-1.0)
    with pytest.raises(ValueError):
        sample_task(0, 3, 0)


# generate_prompt -------------------------------------------------------------------


def test_query_is_exogenous_without_noise():
    task = sample_task(3, 4, RngStream(1))
    task = replace(task, cov_omega=np.zeros((3, 3)), sigma_eps=0.0)
    data, _ = generate_prompt(task, 20, RngStream(2))
    assert data.y_query == pytest.approx(float(task.beta @ data.x_query), abs=1e-12)
    # Training rows still carry the confounder.
    assert np.max(np.abs(data.y - data.x @ task.beta)) > 1e-3


def test_all_noise_zero_gives_exact_linear_model():
    task = _noiseless(sample_task(2, 3, RngStream(3)))
    data, _ = generate_prompt(task, 15, RngStream(4))
    np.testing.assert_allclose(data.x, data.z @ task.theta, atol=1e-12)
    np.testing.assert_allclose(data.y, data.x @ task.beta, atol=1e-12)


def test_endogenous_error_covariance():
    p = 3
    task = replace(sample_task(p, 2, RngStream(5)), big_phi=np.eye(p), small_phi=np.ones(p))
    data, trace = generate_prompt(task, 100_000, RngStream(6))
    eps2 = trace.u @ task.big_phi + trace.omega[:-1]
    eps1 = trace.u @ task.small_phi + trace.eps[:-1]
    cov = (eps2 - eps2.mean(0)).T @ (eps1 - eps1.mean()) / (len(eps1) - 1)
    np.testing.assert_allclose(cov, np.ones(p), atol=0.05)


def test_trace_shapes():
    data, trace = generate_prompt(sample_task(2, 3, 0), 7, 1)
    assert trace.u.shape == (7, 2)
    assert trace.omega.shape == (8, 2)
    assert trace.eps.shape == (8,)
    assert (data.n, data.p, data.q) == (7, 2, 3)


def test_query_never_reads_confounder():
    task = sample_task(3, 4, RngStream(7))
    a, _ = generate_prompt(task, 12, RngStream(8))
    b, _ = generate_prompt(task, 12, RngStream(8), zero_u=True)
    np.testing.assert_array_equal(a.z_query, b.z_query)
    np.testing.assert_array_equal(a.x_query, b.x_query)
    assert a.y_query == b.y_query
    assert not np.array_equal(a.x, b.x)


def test_generation_deterministic():
    task = sample_task(2, 2, 0)
    a, _ = generate_prompt(task, 9, RngStream(1), variant=NonlinearMlp())
    b, _ = generate_prompt(task, 9, RngStream(1), variant=NonlinearMlp())
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.y, b.y)


def test_clipping_applies_to_rows():
    task = sample_task(2, 3, 0)
    bounds = ClipBounds(b_z=0.5, b_x=0.7, b_y=0.2)
    data, _ = generate_prompt(task, 30, RngStream(1), bounds)
    assert np.all(np.linalg.norm(data.z, axis=1) <= 0.5 + 1e-12)
    assert np.all(np.linalg.norm(data.x, axis=1) <= 0.7 + 1e-12)
    assert np.all(np.abs(data.y) <= 0.2 + 1e-12)
    assert abs(data.y_query) <= 0.2 + 1e-12


def test_generate_prompt_rejects_empty():
    with pytest.raises(ValueError):
        generate_prompt(sample_task(1, 1, 0), 0, 0)


# variants ---------------------------------------------------------------------------


def test_iv_strength_one_is_standard_bitwise():
    task = sample_task(3, 5, 0)
    a, _ = generate_prompt(task, 10, RngStream(1), variant=Standard())
    b, _ = generate_prompt(task, 10, RngStream(1), variant=IvStrength(1.0))
    for f in ("z", "x", "y", "z_query", "x_query"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
    assert a.y_query == b.y_query


def test_iv_strength_scales_signal():
    task = _noiseless(sample_task(2, 3, 0))
    a, _ = generate_prompt(task, 10, RngStream(1), variant=IvStrength(0.5))
    np.testing.assert_allclose(a.x, 0.5 * a.z @ task.theta, atol=1e-12)


def test_under_identified_zeroes_instruments():
    data, _ = generate_prompt(sample_task(5, 10, 0), 20, RngStream(1), variant=UnderIdentified(3))
    assert np.all(data.z[:, 3:] == 0.0)
    assert np.all(data.z_query[3:] == 0.0)
    assert np.all(data.z[:, :3] != 0.0)
    assert data.q == 10
    with pytest.raises(ValueError):
        generate_prompt(sample_task(2, 3, 0), 5, 0, variant=UnderIdentified(3))


def test_quadratic_uses_elementwise_square():
    task = _noiseless(sample_task(2, 3, 0))
    data, _ = generate_prompt(task, 8, RngStream(1), variant=QuadraticIv())
    np.testing.assert_allclose(data.x, (data.z**2) @ task.theta, atol=1e-12)


def test_nonlinear_mlp_is_not_linear_in_z():
    task = _noiseless(sample_task(2, 3, 0))
    data, _ = generate_prompt(task, 200, RngStream(1), variant=NonlinearMlp(hidden=8))
    resid = data.x - data.z @ np.linalg.lstsq(data.z, data.x, rcond=None)[0]
    assert np.max(np.abs(resid)) > 0.1


def test_multicollinearity_duplicates_columns():
    task = sample_task(5, 10, 0)
    data, _ = generate_prompt(task, 50, RngStream(1), variant=Multicollinearity())
    assert np.max(np.abs(data.x[:, 4] - 2.0 * data.x[:, 3])) < 1e-2
    assert np.max(np.abs(data.z[:, 9] - 2.0 * data.z[:, 8])) < 1e-2
    np.testing.assert_allclose(data.y, data.x @ task.beta, atol=10.0)


def test_heavy_multicollinearity_layout():
    task = sample_task(5, 10, 0)
    data, _ = generate_prompt(task, 50, RngStream(1), variant=Multicollinearity.heavy())
    for j in (3, 4):
        assert np.max(np.abs(data.x[:, j] - 2.0 * data.x[:, j - 2])) < 1e-2
    for j in range(5, 10):
        assert np.max(np.abs(data.z[:, j] - 2.0 * data.z[:, j - 5])) < 1e-2


def test_endogeneity_zero_removes_ols_bias():
    gen = RngStream(3).generator()
    task = sample_task(2, 3, gen)
    data, _ = generate_prompt(task, 20_000, gen, variant=EndogeneityStrength(0.0))
    np.testing.assert_allclose(ols(data).beta_hat, task.beta, atol=0.05)
    biased, _ = generate_prompt(task, 20_000, gen, variant=EndogeneityStrength(1.0))
    assert np.linalg.norm(ols(biased).beta_hat - task.beta) > 0.05


@pytest.mark.parametrize(
    "make",
    [
        lambda: IvStrength(0.0),
        lambda: IvStrength(2.5),
        lambda: EndogeneityStrength(-0.1),
        lambda: UnderIdentified(0),
        lambda: Multicollinearity(jitter=-1.0),
        lambda: NonlinearMlp(0),
    ],
)
def test_variant_parameter_ranges(make):
    with pytest.raises(ValueError):
        make()


# clip ------------------------------------------------------------------------------


def test_clip_examples():
    np.testing.assert_allclose(clip([3.0, 4.0], 1.0), [0.6, 0.8])
    np.testing.assert_array_equal(clip([0.1, 0.2], 1.0), [0.1, 0.2])
    np.testing.assert_array_equal(clip([30.0, 40.0], math.inf), [30.0, 40.0])


@given(
    st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=6),
    st.floats(1e-3, 1e3),
)
@settings(max_examples=100, deadline=None)
def test_clip_idempotent_and_bounded(v, bound):
    once = clip(v, bound)
    assert np.linalg.norm(once) <= bound * (1 + 1e-12)
    np.testing.assert_allclose(clip(once, bound), once, rtol=1e-12, atol=0)


def test_clip_bounds_validation():
    with pytest.raises(ValueError):
        ClipBounds(b_z=0.0)


# Dataset -----------------------------------------------------------------------------


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1)), np.zeros((3, 1)), np.zeros(2), np.zeros(1), np.zeros(1))
    with pytest.raises(ValueError):
        Dataset(np.full((2, 1), np.nan), np.zeros((2, 1)), np.zeros(2), np.zeros(1), np.zeros(1))


def test_empirical_iv_strength_orders_factors():
    task = sample_task(5, 10, 0)
    weak, _ = generate_prompt(task, 400, RngStream(1), variant=IvStrength(0.1))
    strong, _ = generate_prompt(task, 400, RngStream(1), variant=IvStrength(2.0))
    rw, rs = empirical_iv_strength(weak), empirical_iv_strength(strong)
    assert 0.0 <= rw < rs <= 1.0
