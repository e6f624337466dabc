"""Bi-level gradient descent for 2SLS.

The inner iterate Theta runs gradient descent on the first-stage least
squares problem; the outer iterate beta takes a gradient step on the second
stage using the *current* (pre-update) Theta:

    Theta <- Theta - eta * Z'(Z Theta - X)
    beta  <- beta  - alpha * Theta' Z'(Z Theta beta - Y)

Both are linear contractions when the step sizes stay below twice the inverse
of the largest eigenvalue of the corresponding Gram matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .datagen import Dataset
from .estimators import first_stage, ridge_two_sls, two_sls
from .numerics import sym_eigen

DIVERGENCE_LIMIT = 1e30
SAFE_FRACTION = 0.75


@dataclass(frozen=True)
class LearningRates:
    alpha: float
    eta: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.eta > 0):
            raise ValueError("learning rates must be positive")

    def validate(self, data: Dataset) -> bool:
        """True when both rates sit strictly below their convergence thresholds."""
        a_max, e_max = max_learning_rates(data)
        return self.alpha < a_max and self.eta < e_max


@dataclass(frozen=True)
class GDState:
    theta: np.ndarray
    beta: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, p: int, q: int) -> "GDState":
        return cls(np.zeros((q, p)), np.zeros(p), 0)


@dataclass(frozen=True)
class ContractionReport:
    gamma: float
    kappa: float

    @property
    def rate(self) -> float:
        return max(self.gamma, self.kappa)


@dataclass
class Trajectory:
    states: list[GDState] = field(default_factory=list)
    dist_beta: list[float] = field(default_factory=list)
    dist_theta: list[float] = field(default_factory=list)


class DivergenceError(RuntimeError):
    """An iterate left the finite range; carries the last finite state."""

    def __init__(self, t: int, last_state: GDState, trajectory: Trajectory | None = None):
        super().__init__(f"gradient iteration diverged at step {t}")
        self.t = t
        self.last_state = last_state
        self.trajectory = trajectory


def _gram_top(gram: np.ndarray) -> float:
    return float(sym_eigen(gram).values[0])


def max_learning_rates(data: Dataset) -> tuple[float, float]:
    """(2 / sigma_max^2(Z Theta_hat), 2 / sigma_max^2(Z))."""
    z = data.z
    x_hat = z @ first_stage(data)
    top_outer = _gram_top(x_hat.T @ x_hat)
    top_inner = _gram_top(z.T @ z)
    alpha_max = 2.0 / top_outer if top_outer > 0 else math.inf
    eta_max = 2.0 / top_inner if top_inner > 0 else math.inf
    return alpha_max, eta_max


def choose_rates(data: Dataset, mode: str = "safe") -> LearningRates:
    """``safe``: 0.75 of the thresholds. ``optimal``: 1/sigma_max^2, half the thresholds."""
    a_max, e_max = max_learning_rates(data)
    if mode == "safe":
        return LearningRates(SAFE_FRACTION * a_max, SAFE_FRACTION * e_max)
    if mode == "optimal":
        return LearningRates(0.5 * a_max, 0.5 * e_max)
    raise ValueError(f"unknown rate mode {mode!r}")


def _spectral_radius_shift(gram: np.ndarray, step: float, shift: float = 0.0) -> float:
    # rho(I - step (G + shift I)) for symmetric G.
    values = sym_eigen(gram).values + shift
    return float(np.max(np.abs(1.0 - step * values)))


def contraction_factors(
    data: Dataset, rates: LearningRates, lam: float = 0.0, tau: float = 0.0
) -> ContractionReport:
    """gamma = rho(I - alpha (G + lam I)), kappa = rho(I - eta (Z'Z + tau I)).

    G is the second-stage Gram matrix built from the (ridge) first-stage fit.
    """
    z = data.z
    theta_hat = first_stage(data) if tau == 0 else ridge_two_sls(data, 0.0, tau).theta_hat
    x_hat = z @ theta_hat
    gamma = _spectral_radius_shift(x_hat.T @ x_hat, rates.alpha, lam)
    kappa = _spectral_radius_shift(z.T @ z, rates.eta, tau)
    return ContractionReport(gamma, kappa)


def gd_step(state: GDState, data: Dataset, rates: LearningRates) -> GDState:
    z, x, y = data.z, data.x, data.y
    theta, beta = state.theta, state.beta
    x_hat = z @ theta
    new_theta = theta - rates.eta * (z.T @ (x_hat - x))
    new_beta = beta - rates.alpha * (x_hat.T @ (x_hat @ beta - y))
    return GDState(new_theta, new_beta, state.t + 1)


def ridge_gd_step(state: GDState, data: Dataset, rates: LearningRates, lam: float, tau: float) -> GDState:
    z, x, y = data.z, data.x, data.y
    theta, beta = state.theta, state.beta
    x_hat = z @ theta
    new_theta = theta - rates.eta * (z.T @ (x_hat - x) + tau * theta)
    new_beta = beta - rates.alpha * (x_hat.T @ (x_hat @ beta - y) + lam * beta)
    return GDState(new_theta, new_beta, state.t + 1)


def _finite(state: GDState) -> bool:
    return bool(
        np.all(np.isfinite(state.theta))
        and np.all(np.isfinite(state.beta))
        and np.max(np.abs(state.theta), initial=0.0) <= DIVERGENCE_LIMIT
        and np.max(np.abs(state.beta), initial=0.0) <= DIVERGENCE_LIMIT
    )


def iterate(
    data: Dataset,
    rates: LearningRates,
    steps: int,
    init: GDState | None = None,
    lam: float = 0.0,
    tau: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Raw iterates as arrays: thetas (steps+1, q, p) and betas (steps+1, p).

    Same updates as :func:`ridge_gd_step` (which reduces to :func:`gd_step` at
    lam = tau = 0), without building state objects. Raises
    :class:`DivergenceError` on the first non-finite or oversized iterate.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    state = init if init is not None else GDState.zeros(data.p, data.q)
    z, x, y = data.z, data.x, data.y
    zt = z.T
    thetas = np.empty((steps + 1, data.q, data.p))
    betas = np.empty((steps + 1, data.p))
    theta, beta = np.asarray(state.theta, dtype=float), np.asarray(state.beta, dtype=float)
    thetas[0], betas[0] = theta, beta
    for t in range(1, steps + 1):
        x_hat = z @ theta
        grad_theta = zt @ (x_hat - x)
        grad_beta = x_hat.T @ (x_hat @ beta - y)
        if tau:
            grad_theta = grad_theta + tau * theta
        if lam:
            grad_beta = grad_beta + lam * beta
        theta = theta - rates.eta * grad_theta
        beta = beta - rates.alpha * grad_beta
        bound = max(np.max(np.abs(theta), initial=0.0), np.max(np.abs(beta), initial=0.0))
        if not bound <= DIVERGENCE_LIMIT:
            last = GDState(thetas[t - 1], betas[t - 1], state.t + t - 1)
            raise DivergenceError(state.t + t, last)
        thetas[t], betas[t] = theta, beta
    return thetas, betas


def run_gd(
    data: Dataset,
    rates: LearningRates,
    steps: int,
    init: GDState | None = None,
    lam: float = 0.0,
    tau: float = 0.0,
) -> Trajectory:
    """Iterate ``steps`` updates and record distances to the closed form.

    The reference is 2SLS, or ridge 2SLS in the GD convention when ``lam`` or
    ``tau`` is nonzero. Raises :class:`DivergenceError` as soon as an iterate
    stops being finite or exceeds 1e30 in absolute value.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    ridge = lam != 0.0 or tau != 0.0
    ref = ridge_two_sls(data, lam, tau) if ridge else two_sls(data)
    state = init if init is not None else GDState.zeros(data.p, data.q)
    traj = Trajectory()

    def record(s: GDState) -> None:
        traj.states.append(s)
        traj.dist_beta.append(float(np.linalg.norm(s.beta - ref.beta_hat)))
        traj.dist_theta.append(float(np.linalg.norm(s.theta - ref.theta_hat)))

    record(state)
    for _ in range(steps):
        nxt = ridge_gd_step(state, data, rates, lam, tau) if ridge else gd_step(state, data, rates)
        if not _finite(nxt):
            raise DivergenceError(nxt.t, state, traj)
        state = nxt
        record(state)
    return traj


def tail_slope(dist, floor: float = 1e-11, min_points: int = 10) -> tuple[float, int]:
    """Least-squares slope of log-distance over the monotone tail.

    The tail starts at the last index after which the sequence never
    increases again, and stops once the distance reaches ``floor`` times its
    initial scale (round-off level). Returns ``(slope, start_index)``.
    """
    d = np.asarray(dist, dtype=float)
    scale = max(float(np.max(d)), 1e-300)
    usable = np.nonzero(d > floor * scale)[0]
    if usable.size == 0:
        return -math.inf, 0
    d = d[: usable[-1] + 1]
    start = 0
    for i in range(len(d) - 1):
        if d[i + 1] > d[i]:
            start = i + 1
    if len(d) - start < min_points:
        start = max(0, len(d) - min_points)
    t = np.arange(start, len(d), dtype=float)
    logs = np.log(d[start:])
    slope = float(np.polyfit(t, logs, 1)[0])
    return slope, start
