"""Closed-form baselines (OLS, 2SLS, ridge 2SLS) and finite-sample
diagnostics for the 2SLS error bound."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datagen import ClipBounds, Dataset, TaskParams, clip
from .numerics import least_squares, pseudo_inverse, sym_eigen

RIDGE_CONVENTIONS = ("gd", "objective")


@dataclass(frozen=True)
class EstimatorOutput:
    beta_hat: np.ndarray
    theta_hat: np.ndarray | None
    method: str

    def predict(self, x) -> float:
        return float(np.asarray(x, dtype=float) @ self.beta_hat)


def ols(data: Dataset) -> EstimatorOutput:
    """Least squares of Y on X (minimum norm if X is rank deficient)."""
    return EstimatorOutput(least_squares(data.x, data.y), None, "ols")


def first_stage(data: Dataset) -> np.ndarray:
    """Theta_hat = (Z'Z)^+ Z'X."""
    return least_squares(data.z, data.x)


def two_sls(data: Dataset) -> EstimatorOutput:
    """Two-stage least squares, pseudoinverse in both stages."""
    theta_hat = first_stage(data)
    x_hat = data.z @ theta_hat
    beta_hat = pseudo_inverse(x_hat.T @ x_hat) @ (x_hat.T @ data.y)
    return EstimatorOutput(beta_hat, theta_hat, "2sls")


def ridge_two_sls(data: Dataset, lam: float, tau: float, convention: str = "gd") -> EstimatorOutput:
    """Ridge-penalised 2SLS.

    ``convention="gd"`` returns the fixed point of the ridge GD updates,
    Theta = (Z'Z + tau I)^-1 Z'X and beta = (G + lam I)^-1 Theta'Z'Y with
    G = Theta'Z'Z Theta. ``convention="objective"`` returns the stationary
    point of the penalised mean-squared objectives, where the data terms carry
    a 1/n factor and the penalties a 1/2 factor, i.e. the same formulas with
    tau and lam replaced by n*tau/2 and n*lam/2.
    """
    if lam < 0 or tau < 0:
        raise ValueError("regularisation parameters must be nonnegative")
    if convention not in RIDGE_CONVENTIONS:
        raise ValueError(f"unknown ridge convention {convention!r}")
    z, x, y = data.z, data.x, data.y
    if convention == "objective":
        tau, lam = 0.5 * data.n * tau, 0.5 * data.n * lam
    theta_hat = pseudo_inverse(z.T @ z + tau * np.eye(data.q)) @ (z.T @ x)
    x_hat = z @ theta_hat
    beta_hat = pseudo_inverse(x_hat.T @ x_hat + lam * np.eye(data.p)) @ (x_hat.T @ y)
    return EstimatorOutput(beta_hat, theta_hat, "ridge-2sls")


def ridge_ols(data: Dataset, lam: float) -> EstimatorOutput:
    x = data.x
    beta_hat = pseudo_inverse(x.T @ x + lam * np.eye(data.p)) @ (x.T @ data.y)
    return EstimatorOutput(beta_hat, None, "ridge-ols")


def clipped_beta(out: EstimatorOutput, b_beta: float) -> np.ndarray:
    return clip(out.beta_hat, b_beta)


# Assumption checks -----------------------------------------------------------


@dataclass(frozen=True)
class AssumptionReport:
    identified: bool  # q >= p
    rank_z: int
    rank_x: int
    full_rank: bool
    first_stage_sigma_min: float  # sigma_min(Z Theta_hat); zero means irrelevant instruments
    relevant: bool
    max_norm_z: float
    max_norm_x: float

    @property
    def ok(self) -> bool:
        return self.identified and self.full_rank and self.relevant


def _rank(gram: np.ndarray, rel_tol: float = 1e-10) -> int:
    values = sym_eigen(gram).values
    if values.size == 0 or values[0] <= 0:
        return 0
    return int(np.sum(values > rel_tol * values[0]))


def check_assumptions(data: Dataset, rel_tol: float = 1e-10) -> AssumptionReport:
    """Sample-level checks of identification, rank and instrument relevance."""
    rank_z = _rank(data.z.T @ data.z, rel_tol)
    rank_x = _rank(data.x.T @ data.x, rel_tol)
    x_hat = data.z @ first_stage(data)
    g = sym_eigen(x_hat.T @ x_hat).values
    smin = math.sqrt(max(g[-1], 0.0))
    return AssumptionReport(
        identified=data.q >= data.p,
        rank_z=rank_z,
        rank_x=rank_x,
        full_rank=rank_z == data.q and rank_x == data.p,
        first_stage_sigma_min=smin,
        relevant=smin > rel_tol * math.sqrt(max(g[0], 0.0)) if g[0] > 0 else False,
        max_norm_z=float(np.max(np.linalg.norm(data.z, axis=1))),
        max_norm_x=float(np.max(np.linalg.norm(data.x, axis=1))),
    )


# Error-bound diagnostics ---------------------------------------------------


class SampleSizeError(ValueError):
    """The sample size is below the threshold at which the bound applies."""

    def __init__(self, n: int, n_min: float):
        super().__init__(f"n={n} is below the bound's sample-size threshold n_min={n_min:.6g}")
        self.n = n
        self.n_min = n_min


@dataclass(frozen=True)
class BoundReport:
    k: float
    k0: float
    c_n: float
    n_min: float
    mse_bound: float
    c_const: float
    b_beta: float
    b_theta: float
    b_z: float
    b_eps2: float
    sigma1: float
    lambda_min_z: float
    sigma_min_theta: float
    n: int


def _bound_constants(task: TaskParams, b_z: float, b_eps2: float):
    lam_min = float(sym_eigen(task.cov_z).values[-1])
    smin_theta = math.sqrt(max(float(sym_eigen(task.theta.T @ task.theta).values[-1]), 0.0))
    k = lam_min / (6.0 * b_z**2)
    k0 = lam_min * smin_theta**2 / (2.0 * b_eps2**2)
    return lam_min, smin_theta, k, k0


def sample_size_threshold(p: int, q: int, k: float, k0: float, b_z: float, c_const: float) -> float:
    """Largest of the three sample-size conditions under which the bound holds."""
    a = 4.0 * c_const**2 * b_z**4
    first = a * (q + math.log(a * k / q) - 1.5) if a * k > 0 else -math.inf
    second = q * math.exp(1.5) / k
    third = p**2 * (q + 1) ** 2 * k / (q * k0**2) if k0 > 0 else math.inf
    return max(first, second, third)


def c_of_n(
    n: float,
    p: int,
    q: int,
    k: float,
    b_theta: float,
    b_z: float,
    b_eps2: float,
    lambda_min_z: float,
    sigma_min_theta: float,
    c_const: float = 1.0,
) -> float:
    """The sample-size dependent constant C(n); ``nan`` where it is undefined."""
    log_term = math.log(k * n / q)
    if log_term < 0.5:
        return math.nan
    dev = math.sqrt(2.0 * p * (q + 1) * b_eps2**2 * log_term / (lambda_min_z * n))
    shrink = 1.0 - c_const * b_z**2 * (math.sqrt(q) + math.sqrt(log_term - 0.5)) / math.sqrt(n)
    gap = sigma_min_theta - dev
    if shrink <= 0 or gap <= 0:
        return math.nan
    return (b_theta + dev) * b_z / (lambda_min_z * shrink**2 * gap**2)


def c_limit(b_theta: float, b_z: float, lambda_min_z: float, sigma_min_theta: float) -> float:
    return b_theta * b_z / (lambda_min_z * sigma_min_theta**2)


def mse_bound(
    task: TaskParams,
    bounds: ClipBounds,
    b_eps2: float,
    n: int,
    *,
    b_theta: float | None = None,
    sigma1: float | None = None,
    c_const: float = 1.0,
) -> BoundReport:
    """Evaluate the finite-sample 2SLS error envelope for a task.

    The envelope ``(q/n) (B_beta^2/K + C(n)^2 sigma1^2)`` is returned with the
    hidden absolute multiplier set to one, so it is a diagnostic scale rather
    than a certified bound. ``b_theta`` defaults to the spectral norm of
    Theta and ``sigma1`` to the standard deviation of the structural error.
    """
    b_z, b_beta = bounds.b_z, bounds.b_beta
    if math.isinf(b_z) or math.isinf(b_eps2):
        raise ValueError("the bound needs finite B_z and B_eps2")
    if b_theta is None:
        b_theta = math.sqrt(float(sym_eigen(task.theta.T @ task.theta).values[0]))
    if sigma1 is None:
        sigma1 = math.sqrt(task.eps1_variance())
    lam_min, smin_theta, k, k0 = _bound_constants(task, b_z, b_eps2)
    p, q = task.p, task.q
    n_min = sample_size_threshold(p, q, k, k0, b_z, c_const)
    if n < n_min:
        raise SampleSizeError(n, n_min)
    c_n = c_of_n(n, p, q, k, b_theta, b_z, b_eps2, lam_min, smin_theta, c_const)
    if math.isnan(c_n):
        raise SampleSizeError(n, n_min)
    envelope = (q / n) * (b_beta**2 / k + c_n**2 * sigma1**2)
    return BoundReport(
        k=k,
        k0=k0,
        c_n=c_n,
        n_min=n_min,
        mse_bound=envelope,
        c_const=c_const,
        b_beta=b_beta,
        b_theta=b_theta,
        b_z=b_z,
        b_eps2=b_eps2,
        sigma1=sigma1,
        lambda_min_z=lam_min,
        sigma_min_theta=smin_theta,
        n=n,
    )
