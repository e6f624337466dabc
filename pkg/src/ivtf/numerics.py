"""Dense small-matrix kernels: symmetric eigensolver, least squares,
pseudoinverse and Gaussian sampling.

Everything here works on plain ``numpy.ndarray`` values in double precision.
The matrices in this package are tiny (at most a few dozen rows in the
Gram matrices), so the eigensolver is a straightforward cyclic Jacobi.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_REL_TOL = 1e-10
JACOBI_TOL = 1e-12
MAX_SWEEPS = 100


class NumericsError(ValueError):
    """Raised for malformed matrix arguments (shape, symmetry, definiteness)."""


@dataclass(frozen=True)
class SymEigen:
    """Eigenpairs of a symmetric matrix.

    ``values`` are sorted in descending order and ``vectors[:, i]`` is the
    unit eigenvector belonging to ``values[i]``.
    """

    values: np.ndarray
    vectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.vectors * self.values) @ self.vectors.T


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream keyed by ``(seed, stream_id)``.

    Streams are derived through :class:`numpy.random.SeedSequence`, so two
    streams with different ids are statistically independent and the draws of
    one stream never depend on how many other streams were consumed before it.
    Gaussian variates come from numpy's PCG64 ``standard_normal`` (ziggurat).
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, self.stream_id])))


def as_generator(rng) -> np.random.Generator:
    """Accept a Generator, an RngStream or an int seed."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng)).generator()
    raise TypeError(f"cannot build a random generator from {type(rng).__name__}")


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Convert to a finite 2-D float array."""
    m = np.asarray(a, dtype=float)
    if m.ndim != 2:
        raise NumericsError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericsError(f"{name} has non-finite entries")
    return m


def _check_symmetric(a: np.ndarray, tol: float = 1e-10) -> None:
    if a.shape[0] != a.shape[1]:
        raise NumericsError(f"expected a square matrix, got shape {a.shape}")
    scale = np.max(np.abs(a)) if a.size else 0.0
    if np.max(np.abs(a - a.T), initial=0.0) > tol * max(scale, 1.0):
        raise NumericsError("matrix is not symmetric")


def _round_robin(d: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pair schedules covering every (p, q) once per sweep, pairs disjoint per step."""
    m = d + (d % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a < d and b < d:
                ps.append(min(a, b))
                qs.append(max(a, b))
        rounds.append((np.array(ps), np.array(qs)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def sym_eigen(a, tol: float = JACOBI_TOL) -> SymEigen:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every off-diagonal pair once in round-robin order, so
    the rotations of one step act on disjoint index pairs and are applied
    together as a single orthogonal similarity. Sweeps stop once the
    off-diagonal Frobenius norm is below ``tol * ||A||_F``.
    """
    a = as_matrix(a, "A")
    _check_symmetric(a)
    d = a.shape[0]
    a = 0.5 * (a + a.T)
    v = np.eye(d)
    fro = np.linalg.norm(a)
    if d <= 1 or fro == 0.0:
        return _sorted(np.diag(a).copy(), v)
    target = tol * fro
    iu = np.triu_indices(d, 1)
    rounds = _round_robin(d)

    for _ in range(MAX_SWEEPS):
        if np.sqrt(2.0 * np.sum(a[iu] ** 2)) <= target:
            break
        for ps, qs in rounds:
            apq = a[ps, qs]
            active = apq != 0.0
            if not np.any(active):
                continue
            p, q, apq = ps[active], qs[active], apq[active]
            # Rutishauser's stable form of the 2x2 symmetric Schur rotation.
            theta = (a[q, q] - a[p, p]) / (2.0 * apq)
            t = np.where(theta >= 0.0, 1.0, -1.0) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            j = np.eye(d)
            j[p, p] = c
            j[q, q] = c
            j[p, q] = s
            j[q, p] = -s
            a = j.T @ a @ j
            v = v @ j
    else:
        raise NumericsError("Jacobi iteration did not converge")
    return _sorted(np.diag(a).copy(), v)


def _sorted(values: np.ndarray, vectors: np.ndarray) -> SymEigen:
    order = np.argsort(-values, kind="stable")
    return SymEigen(values=values[order], vectors=vectors[:, order])


def pseudo_inverse(a, rel_tol: float = DEFAULT_REL_TOL) -> np.ndarray:
    """Pseudoinverse of a symmetric PSD matrix.

    Eigenvalues below ``rel_tol * lambda_max`` are treated as zero.
    """
    eig = sym_eigen(a)
    lam_max = eig.values[0] if eig.values.size else 0.0
    if lam_max <= 0.0:
        if eig.values.size and eig.values[-1] < -rel_tol * max(abs(eig.values[-1]), 1.0):
            raise NumericsError("matrix is not positive semidefinite")
        return np.zeros_like(eig.vectors)
    cutoff = rel_tol * lam_max
    if eig.values[-1] < -cutoff:
        raise NumericsError(f"matrix is not positive semidefinite (eigenvalue {eig.values[-1]:.3g})")
    keep = eig.values > cutoff
    inv = np.zeros_like(eig.values)
    inv[keep] = 1.0 / eig.values[keep]
    return (eig.vectors * inv) @ eig.vectors.T


def least_squares(a, b, rel_tol: float = DEFAULT_REL_TOL) -> np.ndarray:
    """Minimum-norm minimiser of ``||A X - B||_F``.

    Solved through the normal equations with the pseudoinverse of ``A^T A``,
    so rank-deficient designs fall back to the minimum-norm solution.
    Accepts a vector ``b`` and returns a vector in that case.
    """
    a = as_matrix(a, "A")
    b_arr = np.asarray(b, dtype=float)
    vector = b_arr.ndim == 1
    b2 = as_matrix(b_arr[:, None] if vector else b_arr, "B")
    if a.shape[0] != b2.shape[0]:
        raise NumericsError(f"row mismatch: A has {a.shape[0]} rows, B has {b2.shape[0]}")
    sol = pseudo_inverse(a.T @ a, rel_tol) @ (a.T @ b2)
    return sol[:, 0] if vector else sol


def sqrt_psd(cov, rel_tol: float = DEFAULT_REL_TOL) -> np.ndarray:
    """Symmetric square root of a PSD matrix."""
    eig = sym_eigen(cov)
    lam_max = max(eig.values[0], 0.0) if eig.values.size else 0.0
    if eig.values.size and eig.values[-1] < -rel_tol * max(lam_max, 1e-300):
        raise NumericsError("covariance is not positive semidefinite")
    root = np.sqrt(np.clip(eig.values, 0.0, None))
    return (eig.vectors * root) @ eig.vectors.T


def sample_gaussian(cov, rng, size: int | None = None) -> np.ndarray:
    """Draw from N(0, cov) as ``S @ g`` with ``S`` the symmetric square root.

    Returns a vector of length d, or a ``(size, d)`` array of rows.
    """
    root = sqrt_psd(cov)
    gen = as_generator(rng)
    d = root.shape[0]
    if size is None:
        return root @ gen.standard_normal(d)
    return gen.standard_normal((size, d)) @ root


def spectral_extremes(gram) -> tuple[float, float]:
    """Largest and smallest eigenvalue of a symmetric PSD Gram matrix."""
    eig = sym_eigen(gram)
    return float(eig.values[0]), float(eig.values[-1])
