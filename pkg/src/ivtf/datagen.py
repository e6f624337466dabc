"""Synthetic IV prompts: task sampling, the in-context data generating
process with an exogenous query sample, clipping and test-time variants.

Draw order inside :func:`generate_prompt` is fixed so that variants which do
not need extra randomness consume exactly the same draws as the standard
scenario:

    Z (n+1, q), U (n, p), Omega (n+1, p), eps (n+1,), then variant extras.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Union

import numpy as np

from .numerics import as_generator, pseudo_inverse, sample_gaussian, sqrt_psd, sym_eigen

INF = math.inf


@dataclass(frozen=True)
class TaskParams:
    """Parameters of one IV task.

    theta (q, p) maps instruments to regressors, beta (p,) is the causal
    effect, big_phi (p, p) and small_phi (p,) load the confounder u onto x
    and y respectively.
    """

    theta: np.ndarray
    beta: np.ndarray
    big_phi: np.ndarray
    small_phi: np.ndarray
    cov_z: np.ndarray
    cov_u: np.ndarray
    cov_omega: np.ndarray
    sigma_eps: float = 1.0

    def __post_init__(self):
        q, p = self.theta.shape
        expected = {
            "beta": (p,),
            "big_phi": (p, p),
            "small_phi": (p,),
            "cov_z": (q, q),
            "cov_u": (p, p),
            "cov_omega": (p, p),
        }
        for name, shape in expected.items():
            if np.shape(getattr(self, name)) != shape:
                raise ValueError(f"{name} has shape {np.shape(getattr(self, name))}, expected {shape}")
        for name in ("cov_z", "cov_u", "cov_omega"):
            cov = getattr(self, name)
            if not np.allclose(cov, cov.T, atol=1e-12):
                raise ValueError(f"{name} is not symmetric")
        if self.sigma_eps < 0:
            raise ValueError("sigma_eps must be nonnegative")

    @property
    def p(self) -> int:
        return self.theta.shape[1]

    @property
    def q(self) -> int:
        return self.theta.shape[0]

    def eps1_variance(self) -> float:
        """Variance of the structural error phi'u + eps."""
        return float(self.small_phi @ self.cov_u @ self.small_phi + self.sigma_eps**2)


@dataclass(frozen=True)
class ClipBounds:
    """Norm bounds for z, x, y and beta; ``math.inf`` disables a bound."""

    b_z: float = INF
    b_x: float = INF
    b_y: float = INF
    b_beta: float = INF

    def __post_init__(self):
        for name in ("b_z", "b_x", "b_y", "b_beta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive or infinite")


@dataclass(frozen=True)
class Dataset:
    """n training samples plus one query sample."""

    z: np.ndarray
    x: np.ndarray
    y: np.ndarray
    z_query: np.ndarray
    x_query: np.ndarray
    y_query: float = 0.0

    def __post_init__(self):
        n = self.z.shape[0]
        if n < 1:
            raise ValueError("a dataset needs at least one training sample")
        if self.z.ndim != 2 or self.x.ndim != 2 or self.x.shape[0] != n or self.y.shape != (n,):
            raise ValueError(f"inconsistent shapes Z{self.z.shape} X{self.x.shape} Y{self.y.shape}")
        if self.z_query.shape != (self.q,) or self.x_query.shape != (self.p,):
            raise ValueError("query shapes do not match the training samples")
        for arr in (self.z, self.x, self.y, self.z_query, self.x_query):
            if np.any(np.isnan(arr)):
                raise ValueError("dataset contains NaN")

    @property
    def n(self) -> int:
        return self.z.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def q(self) -> int:
        return self.z.shape[1]

    def with_x_query(self, x_query) -> "Dataset":
        return replace(self, x_query=np.asarray(x_query, dtype=float))


@dataclass(frozen=True)
class GenerationTrace:
    """Raw noise draws behind a prompt (after variant scaling)."""

    u: np.ndarray
    omega: np.ndarray
    eps: np.ndarray


# Scenario variants ---------------------------------------------------------


@dataclass(frozen=True)
class Standard:
    label = "standard"


@dataclass(frozen=True)
class IvStrength:
    """Scale Theta by r."""

    r: float
    label = "iv-strength"

    def __post_init__(self):
        if not 0.0 < self.r <= 2.0:
            raise ValueError("IV strength factor must lie in (0, 2]")


@dataclass(frozen=True)
class QuadraticIv:
    """x = Theta'(z * z) + error, elementwise square."""

    label = "quadratic"


@dataclass(frozen=True)
class UnderIdentified:
    """Keep only the first q_eff instruments; the rest are zeroed."""

    q_eff: int = 3
    label = "underid"

    def __post_init__(self):
        if self.q_eff < 1:
            raise ValueError("q_eff must be at least 1")


@dataclass(frozen=True)
class Multicollinearity:
    """Replace the last dup_x columns of X and dup_z columns of Z by noisy
    doubles of earlier columns (column j copies column j - dup)."""

    dup_x: int = 1
    dup_z: int = 1
    jitter: float = 1e-6
    label = "multicollinearity"

    def __post_init__(self):
        if self.dup_x < 0 or self.dup_z < 0 or self.jitter < 0:
            raise ValueError("duplicate counts and jitter must be nonnegative")

    @classmethod
    def heavy(cls, jitter: float = 1e-6) -> "Multicollinearity":
        return cls(dup_x=2, dup_z=5, jitter=jitter)


@dataclass(frozen=True)
class NonlinearMlp:
    """x = W2' relu(W1' z) + error with Gaussian weights and no biases."""

    hidden: int = 16
    label = "nonlinear"

    def __post_init__(self):
        if self.hidden < 1:
            raise ValueError("hidden width must be positive")


@dataclass(frozen=True)
class EndogeneityStrength:
    """Scale the confounder u by r."""

    r: float
    label = "endogeneity"

    def __post_init__(self):
        if not 0.0 <= self.r <= 2.0:
            raise ValueError("endogeneity factor must lie in [0, 2]")


ScenarioVariant = Union[
    Standard, IvStrength, QuadraticIv, UnderIdentified, Multicollinearity, NonlinearMlp, EndogeneityStrength
]


def sample_task(p: int, q: int, rng, sigma_eps: float = 1.0) -> TaskParams:
    """Standard-Gaussian Theta, beta, Phi, phi with identity covariances."""
    if p < 1 or q < 1:
        raise ValueError("p and q must be positive")
    gen = as_generator(rng)
    theta = gen.standard_normal((q, p))
    beta = gen.standard_normal(p)
    big_phi = gen.standard_normal((p, p))
    small_phi = gen.standard_normal(p)
    return TaskParams(
        theta=theta,
        beta=beta,
        big_phi=big_phi,
        small_phi=small_phi,
        cov_z=np.eye(q),
        cov_u=np.eye(p),
        cov_omega=np.eye(p),
        sigma_eps=sigma_eps,
    )


def clip(v, bound: float) -> np.ndarray:
    """Rescale ``v`` onto the ball of radius ``bound`` if it lies outside."""
    v = np.asarray(v, dtype=float)
    if math.isinf(bound):
        return v.copy()
    norm = float(np.linalg.norm(v))
    if norm <= bound:
        return v.copy()
    return v * (bound / norm)


def _clip_rows(a: np.ndarray, bound: float) -> np.ndarray:
    if math.isinf(bound):
        return a
    norms = np.linalg.norm(a, axis=-1, keepdims=True) if a.ndim > 1 else np.abs(a)
    scale = np.where(norms > bound, bound / np.where(norms > 0, norms, 1.0), 1.0)
    return a * scale


def _relu(a):
    return np.maximum(a, 0.0)


def generate_prompt(
    task: TaskParams,
    n: int,
    rng,
    bounds: ClipBounds = ClipBounds(),
    variant: ScenarioVariant = Standard(),
    *,
    zero_u: bool = False,
) -> tuple[Dataset, GenerationTrace]:
    """Draw n endogenous training samples and one exogenous query sample.

    ``zero_u`` replaces the confounder draws by zeros after they have been
    consumed; it exists to check that the query never reads them.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    gen = as_generator(rng)
    p, q = task.p, task.q

    z_all = sample_gaussian(task.cov_z, gen, size=n + 1)
    u = sample_gaussian(task.cov_u, gen, size=n)
    omega = sample_gaussian(task.cov_omega, gen, size=n + 1)
    eps = task.sigma_eps * gen.standard_normal(n + 1)
    if zero_u:
        u = np.zeros_like(u)

    theta = task.theta
    if isinstance(variant, IvStrength):
        theta = variant.r * theta
    elif isinstance(variant, EndogeneityStrength):
        u = variant.r * u
    elif isinstance(variant, UnderIdentified):
        if variant.q_eff >= q:
            raise ValueError(f"q_eff={variant.q_eff} must be smaller than q={q}")
        z_all[:, variant.q_eff:] = 0.0

    # Confounding part of x (training rows only; the query has none).
    conf_x = np.vstack([u @ task.big_phi, np.zeros((1, p))])
    conf_y = np.append(u @ task.small_phi, 0.0)

    if isinstance(variant, QuadraticIv):
        signal = (z_all * z_all) @ theta
    elif isinstance(variant, NonlinearMlp):
        w1 = gen.standard_normal((q, variant.hidden))
        w2 = gen.standard_normal((variant.hidden, p))
        signal = _relu(z_all @ w1) @ w2
    elif isinstance(variant, Multicollinearity):
        z_all, signal = _collinear_design(task, variant, z_all, gen)
    else:
        signal = z_all @ theta

    x_all = signal + conf_x + omega
    if isinstance(variant, Multicollinearity):
        x_all = _duplicate_columns(x_all, variant.dup_x, variant.jitter, gen)
    y_all = x_all @ task.beta + conf_y + eps

    z_all = _clip_rows(z_all, bounds.b_z)
    x_all = _clip_rows(x_all, bounds.b_x)
    y_all = _clip_rows(y_all, bounds.b_y)

    data = Dataset(
        z=z_all[:n],
        x=x_all[:n],
        y=y_all[:n],
        z_query=z_all[n],
        x_query=x_all[n],
        y_query=float(y_all[n]),
    )
    return data, GenerationTrace(u=u, omega=omega, eps=eps)


def _duplicate_columns(a: np.ndarray, dup: int, jitter: float, gen: np.random.Generator) -> np.ndarray:
    if dup == 0:
        return a
    cols = a.shape[1]
    base = cols - dup
    if dup > base:
        raise ValueError(f"cannot duplicate {dup} of {cols} columns")
    out = a.copy()
    noise = math.sqrt(jitter) * gen.standard_normal((a.shape[0], dup))
    for k, j in enumerate(range(base, cols)):
        out[:, j] = 2.0 * out[:, j - dup] + noise[:, k]
    return out


def _collinear_design(task: TaskParams, variant: Multicollinearity, z_all, gen):
    """Duplicate Z columns, then build the base X signal from the base
    instruments onto the base regressors; X duplicates are added later."""
    p, q = task.p, task.q
    z_all = _duplicate_columns(z_all, variant.dup_z, variant.jitter, gen)
    base_p, base_q = p - variant.dup_x, q - variant.dup_z
    signal = np.zeros((z_all.shape[0], p))
    signal[:, :base_p] = z_all[:, :base_q] @ task.theta[:base_q, :base_p]
    return z_all, signal


def empirical_iv_strength(data: Dataset) -> float:
    """Mean canonical correlation between the instruments and the regressors."""
    z, x = data.z - data.z.mean(0), data.x - data.x.mean(0)
    pz = pseudo_inverse(z.T @ z)
    px = pseudo_inverse(x.T @ x)
    # Eigenvalues of Px^{1/2} X'Z Pz Z'X Px^{1/2} are the squared canonical correlations.
    m = x.T @ z @ pz @ z.T @ x
    root = sqrt_psd(px)
    sym = root @ m @ root
    sym = 0.5 * (sym + sym.T)
    rho2 = np.clip(sym_eigen(sym).values, 0.0, 1.0)
    k = min(data.p, data.q)
    return float(np.mean(np.sqrt(rho2[:k])))


__all__ = [
    "INF",
    "TaskParams",
    "ClipBounds",
    "Dataset",
    "GenerationTrace",
    "Standard",
    "IvStrength",
    "QuadraticIv",
    "UnderIdentified",
    "Multicollinearity",
    "NonlinearMlp",
    "EndogeneityStrength",
    "ScenarioVariant",
    "sample_task",
    "clip",
    "generate_prompt",
    "empirical_iv_strength",
]
