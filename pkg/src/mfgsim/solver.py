"""Mean-field equilibrium for the linear-quadratic tracking game.

Per type the tracking controller is ``U_k = -Pi Y_k - Gamma g_{k+1}`` with
gains from the Riccati solution K. The equilibrium mean field is linear,
``Xbar_{k+1} = L* Xbar_k``, where L* is the fixed point of

    Tbar(L) = sum_phi [H + B Gamma Mt_L L] P(phi),   Mt_L = Q + H' Mt_L L,

and the feed-forward trajectory is ``g_k = -Mt Xbar_k``.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .kernels import SolveReport, SolverError, solve_dare, solve_stein, spectral_norm
from .model import (
    ConfigError,
    GameConfig,
    TypeDistribution,
    array_doc,
    check_structural_assumptions,
    dumps_canonical,
)


class AssumptionViolation(RuntimeError):
    """A structural or contraction assumption needed by the solver does not hold."""


@dataclass(frozen=True)
class TypeGains:
    K: np.ndarray
    Gamma: np.ndarray
    Pi: np.ndarray
    H: np.ndarray
    Mtilde: Optional[np.ndarray] = None
    report: Optional[SolveReport] = None


@dataclass(frozen=True)
class ContractionDiagnostics:
    zeta: float
    xi_per_type: tuple

    @property
    def xi(self):
        return max(self.xi_per_type)

    @property
    def passed(self):
        return self.xi < 1.0

    def describe(self):
        verdict = "holds" if self.passed else "VIOLATED"
        return (f"contraction condition ||H|| + zeta < 1 {verdict}: "
                f"zeta={self.zeta:.6f}, max Xi={self.xi:.6f}")


@dataclass(frozen=True)
class EquilibriumSolution:
    gains: tuple
    Lstar: np.ndarray
    xbar0: np.ndarray
    diagnostics: ContractionDiagnostics
    report: Optional[SolveReport] = None
    forced: bool = False


def compute_gains(A, B, Q, R, tol=kernels.DARE_TOL, max_iter=kernels.DARE_MAX_ITER):
    A, B, Q, R = (np.atleast_2d(np.asarray(x, dtype=float)) for x in (A, B, Q, R))
    K, report = solve_dare(A, B, Q, R, tol, max_iter)
    Gamma = np.linalg.solve(R + B.T @ K @ B, B.T)
    Pi = Gamma @ K @ A
    H = A - B @ Pi
    return TypeGains(K=K, Gamma=Gamma, Pi=Pi, H=H, report=report)


def _type_gains(t, tol, max_iter):
    return compute_gains(t.A, t.B, t.Q, t.R, tol, max_iter)


def contraction_diagnostics(gains, d: TypeDistribution):
    """zeta = sum_phi ||Q|| ||B Gamma|| / (1 - ||H||)^2 P(phi); Xi(phi) = ||H(phi)|| + zeta."""
    types, mass = d.types, d.mass
    h_norms = [spectral_norm(g.H) for g in gains]
    zeta = 0.0
    for g, t, p, h in zip(gains, types, mass, h_norms):
        if h >= 1.0:
            zeta = np.inf
            break
        zeta += spectral_norm(t.Q) * spectral_norm(t.B @ g.Gamma) / (1.0 - h) ** 2 * p
    return ContractionDiagnostics(float(zeta), tuple(float(h + zeta) for h in h_norms))


def tbar_apply(L, gains, d: TypeDistribution, tol=1e-13, max_iter=100_000):
    L = np.atleast_2d(np.asarray(L, dtype=float))
    out = np.zeros_like(L)
    for g, t, p in zip(gains, d.types, d.mass):
        Mt = solve_stein(g.H.T, t.Q, L, tol=tol, max_iter=max_iter)
        out += (g.H + t.B @ g.Gamma @ Mt @ L) * p
    return out


def solve_mf_law(gains, d: TypeDistribution, tol=1e-10, max_iter=100_000, force=False,
                 diagnostics=None):
    """Fixed-point iteration ``L <- Tbar(L)`` from ``L0 = sum_phi H P(phi)``.

    Refuses to run when the contraction condition fails unless ``force`` is set;
    a forced result carries no existence or uniqueness guarantee.
    """
    diag = diagnostics or contraction_diagnostics(gains, d)
    if not diag.passed and not force:
        raise AssumptionViolation(
            f"contraction condition violated (Xi={diag.xi:.3f} >= 1, zeta={diag.zeta:.3f}); "
            "the mean-field fixed point is not guaranteed to exist or be unique")
    inner_tol = min(1e-13, tol * 1e-3)
    L = sum(g.H * p for g, p in zip(gains, d.mass))
    residual = np.inf
    for it in range(1, max_iter + 1):
        L_next = tbar_apply(L, gains, d, tol=inner_tol)
        residual = float(np.linalg.norm(L_next - L, "fro"))
        L = L_next
        if not np.isfinite(residual):
            break
        if residual <= tol:
            residual = float(np.linalg.norm(tbar_apply(L, gains, d, tol=inner_tol) - L, "fro"))
            if residual <= tol:
                return L, SolveReport(it, residual, True)
    raise SolverError(
        f"mean-field law iteration did not converge (residual {residual:.3e})", residual, max_iter)


def solve_equilibrium(cfg: GameConfig, force=False) -> EquilibriumSolution:
    """Full pipeline: structural checks, gains, contraction check, L*, Mtilde per type."""
    d = cfg.distribution
    for i, t in enumerate(d.types):
        diag = check_structural_assumptions(t)
        if not diag.passed and not force:
            raise AssumptionViolation(f"type {i}: {diag.describe()}")
    gains = [_type_gains(t, cfg.solver_tol, cfg.solver_max_iter) for t in d.types]
    cdiag = contraction_diagnostics(gains, d)
    Lstar, report = solve_mf_law(gains, d, tol=cfg.solver_tol,
                                 max_iter=cfg.solver_max_iter, force=force, diagnostics=cdiag)
    full = []
    for g, t in zip(gains, d.types):
        Mt = solve_stein(g.H.T, t.Q, Lstar, tol=min(1e-13, cfg.solver_tol * 1e-3))
        full.append(TypeGains(g.K, g.Gamma, g.Pi, g.H, Mt, g.report))
    xbar0 = sum(t.nu0 * p for t, p in zip(d.types, d.mass))
    return EquilibriumSolution(tuple(full), Lstar, np.asarray(xbar0, dtype=float), cdiag,
                               report, forced=force and not cdiag.passed)


def mf_trajectory(sol: EquilibriumSolution, T):
    """``Xbar*_0..T`` by the recursion ``Xbar_{k+1} = L* Xbar_k``; shape (T+1, n)."""
    out = np.empty((T + 1, sol.xbar0.shape[0]))
    out[0] = sol.xbar0
    for k in range(T):
        out[k + 1] = sol.Lstar @ out[k]
    return out


def feedforward(sol: EquilibriumSolution, phi, T, xbar=None):
    """``g_0..T`` for type ``phi`` in the closed form ``g_k = -Mtilde Xbar*_k``."""
    if xbar is None:
        xbar = mf_trajectory(sol, T)
    return -xbar[: T + 1] @ sol.gains[phi].Mtilde.T


def control_policy(gains: TypeGains, Y, g_next):
    """``U = -Pi Y - Gamma g_{k+1}``; works on a single vector or a stack of row vectors."""
    Y = np.asarray(Y, dtype=float)
    g_next = np.asarray(g_next, dtype=float)
    return -(Y @ gains.Pi.T) - (g_next @ gains.Gamma.T)


# --------------------------------------------------------------------------
# serialisation


def solution_to_dict(sol: EquilibriumSolution):
    return {
        "gains": [
            {"K": array_doc(g.K), "Gamma": array_doc(g.Gamma), "Pi": array_doc(g.Pi),
             "H": array_doc(g.H), "Mtilde": array_doc(g.Mtilde)}
            for g in sol.gains
        ],
        "Lstar": array_doc(sol.Lstar),
        "xbar0": array_doc(sol.xbar0),
        "diagnostics": {"zeta": float(sol.diagnostics.zeta),
                        "xi_per_type": [float(x) for x in sol.diagnostics.xi_per_type],
                        "pass": sol.diagnostics.passed},
        "forced": sol.forced,
    }


def dumps_solution(sol):
    return dumps_canonical(solution_to_dict(sol))


def solution_from_dict(doc):
    def arr(d):
        return np.array(d["data"], dtype=float).reshape(d["shape"])

    try:
        gains = tuple(
            TypeGains(arr(g["K"]), arr(g["Gamma"]), arr(g["Pi"]), arr(g["H"]), arr(g["Mtilde"]))
            for g in doc["gains"]
        )
        diag = ContractionDiagnostics(float(doc["diagnostics"]["zeta"]),
                                      tuple(float(x) for x in doc["diagnostics"]["xi_per_type"]))
        return EquilibriumSolution(gains, arr(doc["Lstar"]), arr(doc["xbar0"]), diag,
                                   forced=bool(doc.get("forced", False)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed equilibrium file: {exc}") from exc


def check_compatible(cfg: GameConfig, sol: EquilibriumSolution):
    if len(sol.gains) != len(cfg.distribution.types):
        raise ConfigError("equilibrium has a different number of types than the config")
    if sol.Lstar.shape != (cfg.n, cfg.n) or sol.gains[0].Pi.shape != (cfg.m, cfg.n):
        raise ConfigError("equilibrium dimensions do not match the config")

