"""Small dense linear-algebra kernels used by the equilibrium solver.

Everything here is a plain fixed-point iteration on numpy arrays. The problems
are tiny (n of a handful), so simplicity and reproducibility win over speed.
"""

from dataclasses import dataclass

import numpy as np

DARE_TOL = 1e-10
DARE_MAX_ITER = 100_000


class SolverError(RuntimeError):
    """A fixed-point iteration failed to converge."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class ContractionError(SolverError):
    """Geometric-series iteration is diverging (spectral condition violated)."""


@dataclass(frozen=True)
class SolveReport:
    iterations: int
    residual: float
    converged: bool


def spectral_norm(M, max_iter=20_000):
    """Largest singular value of ``M`` by power iteration on ``M^T M``.

    The start vector is the normalised all-ones vector so the result is
    bit-stable between runs.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0 or not np.any(M):
        return 0.0
    G = M.T @ M
    n = G.shape[0]
    v = np.ones(n) / np.sqrt(n)
    w = G @ v
    # all-ones can be orthogonal to the dominant subspace (e.g. [[1, -1], [1, -1]])
    if np.linalg.norm(w) <= 1e-13 * np.trace(G):
        v = np.zeros(n)
        v[int(np.argmax(np.diag(G)))] = 1.0
        w = G @ v
    lam = float(v @ w)
    for _ in range(max_iter):
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            break
        v = w / nrm
        w = G @ v
        new = float(v @ w)
        if abs(new - lam) <= 1e-16 * abs(new):
            lam = new
            break
        lam = new
    return float(np.sqrt(max(lam, 0.0)))


def riccati_rhs(K, A, B, Q, R):
    """One value-iteration step ``A'KA - A'K'B Pi + Q`` with ``Pi = (R+B'KB)^-1 B'KA``."""
    S = R + B.T @ K @ B
    if not np.linalg.cond(S) < 1e14:
        raise SolverError("R + B'KB is numerically singular")
    Pi = np.linalg.solve(S, B.T @ K @ A)
    return A.T @ K @ A - A.T @ K.T @ B @ Pi + Q


def solve_dare(A, B, Q, R, tol=DARE_TOL, max_iter=DARE_MAX_ITER):
    """Solve the discrete algebraic Riccati equation by value iteration from ``K = Q``.

    Returns ``(K, SolveReport)``. Raises :class:`SolverError` if the Frobenius
    residual is still above ``tol`` after ``max_iter`` sweeps.
    """
    A, B, Q, R = (np.atleast_2d(np.asarray(x, dtype=float)) for x in (A, B, Q, R))
    K = Q.copy()
    residual = np.inf
    for it in range(1, max_iter + 1):
        K_next = riccati_rhs(K, A, B, Q, R)
        K_next = 0.5 * (K_next + K_next.T)
        residual = float(np.linalg.norm(K_next - K, "fro"))
        K = K_next
        if not np.isfinite(residual):
            raise SolverError("Riccati iteration diverged", residual, it)
        if residual <= tol:
            # report the residual of the returned iterate, not of the previous one
            residual = float(np.linalg.norm(K - riccati_rhs(K, A, B, Q, R), "fro"))
            if residual <= tol:
                return K, SolveReport(it, residual, True)
    raise SolverError(
        f"Riccati iteration did not converge in {max_iter} iterations "
        f"(residual {residual:.3e})",
        residual,
        max_iter,
    )


def solve_stein(Hc, Q, L, tol=1e-12, max_iter=100_000, patience=10):
    """Solve ``M = Q + Hc M L`` by the geometric series ``M_{n+1} = Q + Hc M_n L``.

    With ``Hc = H'`` the solution is ``sum_a (H^a)' Q L^a``. Raises
    :class:`ContractionError` when the residual grows ``patience`` times in a row.
    """
    Hc, Q, L = (np.atleast_2d(np.asarray(x, dtype=float)) for x in (Hc, Q, L))
    M = Q.copy()
    residual = np.inf
    growing = 0
    for it in range(1, max_iter + 1):
        M_next = Q + Hc @ M @ L
        new_residual = float(np.linalg.norm(M_next - M, "fro"))
        M = M_next
        if not np.isfinite(new_residual):
            raise ContractionError("Stein series overflowed", new_residual, it)
        growing = growing + 1 if new_residual > residual else 0
        residual = new_residual
        if growing >= patience:
            raise ContractionError(
                "Stein series diverging: ||Hc|| * ||L|| is not a contraction",
                residual,
                it,
            )
        if residual <= tol:
            return M
    raise SolverError(
        f"Stein iteration did not converge in {max_iter} iterations "
        f"(residual {residual:.3e})",
        residual,
        max_iter,
    )
