"""Dense linear algebra for discrete-time LQR synthesis.

Everything here operates on plain 2-D float64 numpy arrays and is a pure
function of its inputs. The solvers are deliberately simple iterative
schemes that are robust at the small state dimensions (n <= 12) this
package works with:

* least squares via QR (ridge = 0) or Cholesky on the normal equations,
* the discrete algebraic Riccati equation via fixed-point iteration,
* the discrete Lyapunov equation via the doubling series,
* Schur stability via Lyapunov solve + Cholesky, avoiding any general
  eigendecomposition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class LinalgError(Exception):
    """Base class for numerical failures in this module."""


class SingularSystemError(LinalgError):
    """A linear system could not be solved; `dim` names the deficient
    row/column/pivot index."""

    def __init__(self, dim: int, message: str):
        super().__init__(message)
        self.dim = dim


class NotPositiveDefiniteError(LinalgError):
    """Cholesky hit a non-positive pivot; `pivot` is its index."""

    def __init__(self, pivot: int, message: str):
        super().__init__(message)
        self.pivot = pivot


class RiccatiConvergenceError(LinalgError):
    """Riccati fixed-point iteration exhausted max_iter. Carries the last
    defect norm; usually signals an unstabilizable (A, B) pair."""

    def __init__(self, residual: float, iterations: int):
        super().__init__(
            f"Riccati iteration did not reach tolerance after {iterations} "
            f"iterations (last residual {residual:.3e})"
        )
        self.residual = residual
        self.iterations = iterations


class LyapunovDivergenceError(LinalgError):
    """The Lyapunov series diverged or failed to converge, signaling a
    spectral radius >= 1."""


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array and reject non-finite entries."""
    m = np.asarray(a, dtype=float)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise ValueError(f"{name} contains non-finite entries")
    return m


def symmetrize(p: np.ndarray) -> np.ndarray:
    """0.5 * (P + P^T); bitwise symmetric output."""
    return 0.5 * (p + p.T)


def _check_square_symmetric(p: np.ndarray, name: str) -> None:
    if p.shape[0] != p.shape[1]:
        raise ValueError(f"{name} must be square, got shape {p.shape}")
    scale = 1.0 + np.abs(p).max() if p.size else 1.0
    if np.abs(p - p.T).max() > 1e-10 * scale:
        raise ValueError(f"{name} must be symmetric")


def cholesky(p) -> np.ndarray:
    """Lower-triangular L with L @ L.T = P.

    Raises NotPositiveDefiniteError (carrying the pivot index) as soon as
    a pivot fails to be strictly positive.
    """
    p = as_matrix(p, "P")
    _check_square_symmetric(p, "P")
    n = p.shape[0]
    l = np.zeros_like(p)
    for j in range(n):
        d = p[j, j] - l[j, :j] @ l[j, :j]
        if not (d > 0.0) or not math.isfinite(d):
            raise NotPositiveDefiniteError(
                j, f"matrix is not positive definite (pivot {j} = {d:.3e})"
            )
        l[j, j] = math.sqrt(d)
        if j + 1 < n:
            l[j + 1 :, j] = (p[j + 1 :, j] - l[j + 1 :, :j] @ l[j, :j]) / l[j, j]
    return l


def solve_lower_triangular(l: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Forward substitution for L y = b (b may have several columns)."""
    n = l.shape[0]
    y = np.zeros_like(b, dtype=float)
    for i in range(n):
        y[i] = (b[i] - l[i, :i] @ y[:i]) / l[i, i]
    return y


def solve_upper_triangular(u: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Back substitution for U x = b."""
    n = u.shape[0]
    x = np.zeros_like(b, dtype=float)
    for i in range(n - 1, -1, -1):
        x[i] = (b[i] - u[i, i + 1 :] @ x[i + 1 :]) / u[i, i]
    return x


def solve_spd(g: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve G x = b for symmetric positive definite G via Cholesky."""
    l = cholesky(g)
    return solve_upper_triangular(l.T, solve_lower_triangular(l, b))


def solve_least_squares(x, y, ridge: float = 0.0) -> np.ndarray:
    """Minimize ||Y - X M^T||_F^2 + ridge ||M||_F^2 over M.

    Rows of `x` are regressor vectors, rows of `y` the matching targets,
    so the fitted map satisfies target_row ~= M @ regressor_row. With
    ridge = 0 the solve goes through QR; otherwise through Cholesky on
    the ridge-regularized normal equations.
    """
    x = as_matrix(x, "X")
    y = as_matrix(y, "Y")
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"X has {x.shape[0]} rows but Y has {y.shape[0]}")
    if x.shape[0] < 1:
        raise ValueError("at least one sample row is required")
    if ridge < 0.0:
        raise ValueError(f"ridge must be >= 0, got {ridge}")
    rows, cols = x.shape

    if ridge == 0.0:
        if rows < cols:
            raise SingularSystemError(
                cols,
                f"{rows} sample rows cannot identify {cols} regressor columns",
            )
        q, r = np.linalg.qr(x)
        diag = np.abs(np.diag(r))
        tol = max(rows, cols) * np.finfo(float).eps * (diag.max() if diag.size else 0.0)
        deficient = np.nonzero(diag <= tol)[0]
        if deficient.size:
            j = int(deficient[0])
            raise SingularSystemError(
                j, f"regressor matrix is rank deficient in column {j}"
            )
        mt = solve_upper_triangular(r, q.T @ y)
        return mt.T

    g = x.T @ x + ridge * np.eye(cols)
    try:
        mt = solve_spd(symmetrize(g), x.T @ y)
    except NotPositiveDefiniteError as err:
        raise SingularSystemError(
            err.pivot, f"normal equations singular at pivot {err.pivot}"
        ) from err
    return mt.T


def gain_from_p(a, b, r, p) -> np.ndarray:
    """Feedback gain K = (R + B^T P B)^{-1} B^T P A.

    The feedback convention everywhere in this package is u = -K x.
    """
    a = as_matrix(a, "A")
    b = as_matrix(b, "B")
    r = as_matrix(r, "R")
    p = as_matrix(p, "P")
    g = symmetrize(r + b.T @ p @ b)
    try:
        return solve_spd(g, b.T @ p @ a)
    except NotPositiveDefiniteError as err:
        raise SingularSystemError(
            err.pivot, f"R + B^T P B is singular at pivot {err.pivot}"
        ) from err


@dataclass(frozen=True)
class DareSolution:
    """Stabilizing Riccati solution P, gain K, final defect norm, and the
    number of fixed-point iterations performed."""

    p: np.ndarray
    k: np.ndarray
    residual: float
    iterations: int


def _dare_rhs(a, b, q, r, p) -> np.ndarray:
    btp = b.T @ p
    g = symmetrize(r + btp @ b)
    correction = p @ b @ solve_spd(g, btp)
    return q + a.T @ (p - correction) @ a


def solve_dare(a, b, q, r, tol: float = 1e-10, max_iter: int = 10_000) -> DareSolution:
    """Solve P = Q + A^T (P - P B (R + B^T P B)^{-1} B^T P) A.

    Fixed-point iteration started at P_0 = Q with symmetrization every
    step; converges for stabilizable (A, B) with Q >= 0, R > 0. The
    returned residual is the Frobenius norm of the defect of the
    returned P.
    """
    a = as_matrix(a, "A")
    b = as_matrix(b, "B")
    q = as_matrix(q, "Q")
    r = as_matrix(r, "R")
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError(f"A must be square, got {a.shape}")
    if b.shape[0] != n:
        raise ValueError(f"B must have {n} rows, got {b.shape}")
    _check_square_symmetric(q, "Q")
    _check_square_symmetric(r, "R")
    cholesky(r)  # R must be positive definite

    p = symmetrize(q.copy())
    diff = math.inf
    for it in range(1, max_iter + 1):
        p_next = symmetrize(_dare_rhs(a, b, q, r, p))
        if not np.isfinite(p_next).all():
            raise RiccatiConvergenceError(math.inf, it)
        diff = float(np.linalg.norm(p_next - p, "fro"))
        p = p_next
        if diff <= tol:
            residual = float(np.linalg.norm(_dare_rhs(a, b, q, r, p) - p, "fro"))
            if residual <= tol:
                k = gain_from_p(a, b, r, p)
                return DareSolution(p=p, k=k, residual=residual, iterations=it)
    raise RiccatiConvergenceError(diff, max_iter)


def solve_discrete_lyapunov(
    a_cl,
    q,
    tol: float = 1e-12,
    max_iter: int = 200,
    growth_bound: float = 1e12,
) -> np.ndarray:
    """Symmetric P with A^T P A - P + Q = 0, for Schur-stable A.

    Accumulates the series P = sum_k (A^T)^k Q A^k with doubling, so the
    defect of the partial sum is exactly (A^N)^T Q A^N and convergence is
    checked against `tol` directly. Growth of the partial sums past
    `growth_bound` (or exhaustion of max_iter) raises
    LyapunovDivergenceError, signaling spectral radius >= 1.
    """
    a_cl = as_matrix(a_cl, "A_cl")
    q = as_matrix(q, "Q")
    _check_square_symmetric(q, "Q")
    cholesky(q)  # Q must be positive definite
    if a_cl.shape != q.shape:
        raise ValueError(f"A_cl shape {a_cl.shape} does not match Q {q.shape}")

    p = symmetrize(q.copy())
    m = a_cl.copy()
    for _ in range(max_iter):
        p = symmetrize(p + m.T @ p @ m)
        if not np.isfinite(p).all() or np.linalg.norm(p, "fro") > growth_bound:
            raise LyapunovDivergenceError(
                "Lyapunov series diverged; spectral radius of A_cl is >= 1"
            )
        m = m @ m
        if not np.isfinite(m).all():
            raise LyapunovDivergenceError(
                "Lyapunov series diverged; spectral radius of A_cl is >= 1"
            )
        defect = float(np.linalg.norm(m.T @ q @ m, "fro"))
        if defect <= tol:
            return p
    raise LyapunovDivergenceError(
        f"Lyapunov series did not converge within {max_iter} doublings"
    )


def is_schur_stable(a_cl) -> bool:
    """True iff all eigenvalues of A_cl lie strictly inside the unit disk.

    Decided without an eigensolver: the Lyapunov series for Q = I must
    converge and its sum must pass a Cholesky test.
    """
    a_cl = as_matrix(a_cl, "A_cl")
    if a_cl.shape[0] != a_cl.shape[1]:
        raise ValueError(f"A_cl must be square, got {a_cl.shape}")
    try:
        p = solve_discrete_lyapunov(a_cl, np.eye(a_cl.shape[0]))
        cholesky(p)
    except (LyapunovDivergenceError, NotPositiveDefiniteError):
        return False
    return True
