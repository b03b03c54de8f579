"""Finite-N games under the equilibrium policy and unilateral deviations.

All N agents are stepped together as stacked arrays. Each agent draws its
initial state, process noise and channel noise from its own generator keyed
by ``(seed, agent, kind)``, so results do not depend on how runs are spread
over worker threads.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import comm
from .model import GameConfig, rng_stream, sample_types
from .solver import EquilibriumSolution, check_compatible, feedforward, mf_trajectory

KIND_X0, KIND_W, KIND_V = 0, 1, 2

POLICY_KINDS = ("equilibrium", "scaled", "zero", "mean_tracking")


@dataclass(frozen=True)
class PolicySpec:
    """Which control law to apply and to whom.

    ``scaled`` multiplies the feedback gain Pi by ``theta``; ``zero`` applies no
    control; ``mean_tracking`` replaces the precomputed mean field in the
    feed-forward term with ``L*`` times the realised population mean of the
    decoder outputs (a centralised-information deviation). ``agents=None``
    applies the policy to everybody; otherwise only the listed agent indices
    deviate and the rest play the equilibrium.
    """

    kind: str = "equilibrium"
    theta: float = 1.0
    agents: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")

    @property
    def label(self):
        if self.kind == "scaled":
            return f"scaled(theta={self.theta:g})"
        return self.kind


EQUILIBRIUM = PolicySpec()


@dataclass
class RunMetrics:
    avg_cost_per_agent: float
    eps_TN: float
    est_err_trace: np.ndarray
    tx_rate: float
    consensus_spread: np.ndarray
    agent_costs: np.ndarray = field(repr=False)


@dataclass
class Trace:
    X: np.ndarray  # (T, N, n)
    Y: np.ndarray
    U: np.ndarray  # (T, N, m)
    gamma: np.ndarray  # (T, N)
    err: np.ndarray
    xbar: np.ndarray  # (T+1, n)
    assignment: np.ndarray
    Q: np.ndarray  # per agent (N, n, n)
    R: np.ndarray


def worker_threads():
    """Parallelism cap from ``MFGSIM_THREADS`` (default: CPU count)."""
    raw = os.environ.get("MFGSIM_THREADS")
    if raw:
        return max(1, int(raw))
    return os.cpu_count() or 1


def parallel_map(fn, items, threads=None):
    """Ordered map over independent runs; output order never depends on scheduling."""
    items = list(items)
    threads = threads or worker_threads()
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def draw_noise(cfg: GameConfig, seed, N, T):
    """Standard-normal draws per agent: (x0 (N,n), w (T,N,n), v (T,N,n))."""
    n = cfg.n
    z0 = np.empty((N, n))
    zw = np.empty((T, N, n))
    zv = np.empty((T, N, n))
    for i in range(N):
        z0[i] = rng_stream(seed, i, KIND_X0).standard_normal(n)
        zw[:, i] = rng_stream(seed, i, KIND_W).standard_normal((T, n))
        zv[:, i] = rng_stream(seed, i, KIND_V).standard_normal((T, n))
    return z0, zw, zv


def population_mean(X):
    """Mean over agents computed about agent 0: identical agents give agent 0 exactly."""
    return X[0] + (X - X[0]).sum(axis=0) / X.shape[0]


def population_spread(X):
    """2-norm of the per-component cross-agent standard deviation."""
    D = X - X[0]
    N = X.shape[0]
    var = (D * D).sum(axis=0) / N - (D.sum(axis=0) / N) ** 2
    return float(np.sqrt(np.sum(np.clip(var, 0.0, None))))


def _stack(arrs, assignment):
    return np.stack(arrs)[assignment]


def run_game(cfg: GameConfig, sol: EquilibriumSolution, seed, policy: PolicySpec = EQUILIBRIUM,
             record=False, control_blind=False):
    """Simulate one N-agent game for T steps; returns ``(RunMetrics, Trace | None)``."""
    check_compatible(cfg, sol)
    N, T, n, m = cfg.N, cfg.T, cfg.n, cfg.m
    d = cfg.distribution
    assignment, _ = sample_types(N, d, seed)
    single = len(d.types) == 1
    pick = (lambda f: f(d.types[0])) if single else (lambda f: _stack([f(t) for t in d.types], assignment))
    A = pick(lambda t: t.A)
    B = pick(lambda t: t.B)
    Q = _stack([t.Q for t in d.types], assignment)
    R = _stack([t.R for t in d.types], assignment)
    nu0 = _stack([t.nu0 for t in d.types], assignment)

    xbar = mf_trajectory(sol, T + 1)
    gtraj = np.stack([feedforward(sol, j, T + 1, xbar) for j in range(len(d.types))])
    Pi = _stack([g.Pi for g in sol.gains], assignment)
    Gamma = _stack([g.Gamma for g in sol.gains], assignment)
    Mt = _stack([g.Mtilde for g in sol.gains], assignment)

    deviators = np.zeros(N, dtype=bool)
    if policy.agents is None:
        deviators[:] = True
    else:
        deviators[list(policy.agents)] = True
    if policy.kind == "equilibrium":
        deviators[:] = False
    fb = Pi.copy()
    if policy.kind == "scaled":
        fb[deviators] = policy.theta * Pi[deviators]
    active = np.ones(N)
    if policy.kind == "zero":
        active[deviators] = 0.0
    tracking = deviators if policy.kind == "mean_tracking" else None

    nz = cfg.noise
    Fx, Fw, Fv = (comm.noise_factor(M) for M in (nz.sigma_x, nz.sigma_w, nz.sigma_v))
    z0, zw, zv = draw_noise(cfg, seed, N, T)
    X0 = nu0 + z0 @ Fx.T
    W = zw @ Fw.T

    ls, Yhat0, delta0 = comm.init_link(nu0, X0, nz.sigma_x, m, cfg.decoder_init)
    sp = cfg.scheduler

    cost_sum = np.zeros(N)
    eps_sum = 0.0
    err_trace = np.empty(T)
    spread = np.empty(T)
    tx = 0
    if record:
        tr = {k: np.empty((T, N, n)) for k in ("X", "Y", "err")}
        tr["U"] = np.empty((T, N, m))
        tr["gamma"] = np.empty((T, N), dtype=bool)

    for k in range(T):
        rec = comm.link_step(
            ls, A, B, nz.sigma_w, nz.sigma_v, sp,
            w_prev=W[k - 1] if k > 0 else None, z_v=zv[k],
            init=(Yhat0, delta0) if k == 0 else None,
            control_blind=control_blind, factor_v=Fv,
        )
        Y, X = rec.Y, rec.X
        g_next = gtraj[assignment, k + 1]
        if tracking is not None:
            ybar_next = sol.Lstar @ population_mean(Y)
            g_next = g_next.copy()
            g_next[tracking] = -comm.mv(Mt[tracking], ybar_next)
        U = -comm.mv(fb, Y) - comm.mv(Gamma, g_next)
        U = U * active[:, None]

        xm = population_mean(X)
        dev = X - xm
        cost_sum += comm.quad(dev, Q) + comm.quad(U, R)
        diff = xm - xbar[k]
        eps_sum += float(diff @ diff)
        err_trace[k] = float((rec.err * rec.err).sum() / N)
        spread[k] = population_spread(X)
        tx += int(rec.gamma.sum())
        if record:
            tr["X"][k], tr["Y"][k], tr["err"][k] = X, Y, rec.err
            tr["U"][k], tr["gamma"][k] = U, rec.gamma
        comm.commit(ls, rec, U)

    agent_costs = cost_sum / T
    metrics = RunMetrics(
        avg_cost_per_agent=float(np.mean(agent_costs)),
        eps_TN=eps_sum / T,
        est_err_trace=err_trace,
        tx_rate=tx / (N * T),
        consensus_spread=spread,
        agent_costs=agent_costs,
    )
    trace = None
    if record:
        trace = Trace(X=tr["X"], Y=tr["Y"], U=tr["U"], gamma=tr["gamma"], err=tr["err"],
                      xbar=xbar, assignment=assignment, Q=Q, R=R)
    return metrics, trace


# --------------------------------------------------------------------------
# trace-level metrics


def epsilon_metric(trace: Trace, mf=None):
    """Time average of ``||(1/N) sum_j X_k^j - Xbar*_k||^2`` over the recorded horizon."""
    mf = trace.xbar if mf is None else np.asarray(mf, dtype=float)
    T = trace.X.shape[0]
    total = 0.0
    for k in range(T):
        diff = population_mean(trace.X[k]) - mf[k]
        total += float(diff @ diff)
    return total / T


def finite_cost(trace: Trace, i):
    """``(1/T) sum_k ||X_k^i - mean_k||_Q^2 + ||U_k^i||_R^2`` for agent ``i``."""
    T = trace.X.shape[0]
    total = 0.0
    for k in range(T):
        dev = trace.X[k, i] - population_mean(trace.X[k])
        u = trace.U[k, i]
        total += float(dev @ trace.Q[i] @ dev + u @ trace.R[i] @ u)
    return total / T


def consensus_spread(trace: Trace):
    return np.array([population_spread(trace.X[k]) for k in range(trace.X.shape[0])])


# --------------------------------------------------------------------------
# probes


class IncomparableSeeds(ValueError):
    """Two runs meant to share noise streams were given different seeds."""


@dataclass
class ProbeReport:
    policy: str
    max_err_diff: float
    gamma_match: bool
    steps: int

    @property
    def passed(self):
        return self.gamma_match and self.max_err_diff == 0.0


def _compare(base, other, label, T):
    diff = np.linalg.norm((base.err - other.err).reshape(T, -1), axis=1)
    return ProbeReport(policy=label, max_err_diff=float(diff.max()),
                       gamma_match=bool(np.array_equal(base.gamma, other.gamma)), steps=T)


def dual_effect_probe(cfg: GameConfig, sol, seed, alt_policy: PolicySpec, alt_seed=None,
                      base_policy: PolicySpec = EQUILIBRIUM, control_blind=False):
    """Run one agent under two policies with identical noise; errors and triggers must match exactly."""
    if alt_seed is not None and alt_seed != seed:
        raise IncomparableSeeds(f"incomparable seeds: {seed} vs {alt_seed}")
    return probe_suite(cfg, sol, seed, [alt_policy], base_policy, control_blind)[0]


def probe_suite(cfg: GameConfig, sol, seed, policies, base_policy: PolicySpec = EQUILIBRIUM,
                control_blind=False):
    """:func:`dual_effect_probe` for several alternatives against one shared base run."""
    one = cfg.with_overrides(N=1)
    _, base = run_game(one, sol, seed, base_policy, record=True, control_blind=control_blind)
    reports = []
    for pol in policies:
        _, tr = run_game(one, sol, seed, pol, record=True, control_blind=control_blind)
        reports.append(_compare(base, tr, pol.label, one.T))
    return reports


def default_deviation_family():
    fam = [PolicySpec("scaled", theta, (0,)) for theta in (0.5, 0.75, 1.0, 1.25, 1.5)]
    fam.append(PolicySpec("mean_tracking", 1.0, (0,)))
    return fam


@dataclass
class GapReport:
    N: int
    runs: int
    eq_cost: float
    eq_se: float
    member_costs: dict
    member_se: dict
    gap: float
    gap_se: float
    best: str
    note: str = ("lower bound: deviations are searched over a finite family, "
                 "not the full centralised policy class")


def nash_gap(cfg: GameConfig, sol, family=None, runs=None, deviator=0):
    """Estimate ``max(0, J_1(eq) - min_family J_1(dev))`` with common random numbers.

    Run ``r`` uses seed ``cfg.seed + r`` for the equilibrium and every deviation,
    so each member's gain is measured as a paired difference.
    """
    family = default_deviation_family() if family is None else list(family)
    runs = cfg.runs if runs is None else runs
    family = [PolicySpec(p.kind, p.theta, (deviator,)) if p.kind != "equilibrium" else p for p in family]
    seeds = [cfg.seed + r for r in range(runs)]

    def one(seed):
        eq, _ = run_game(cfg, sol, seed)
        costs = [eq.agent_costs[deviator]]
        for p in family:
            if p.kind == "equilibrium":
                costs.append(eq.agent_costs[deviator])
            else:
                met, _ = run_game(cfg, sol, seed, p)
                costs.append(met.agent_costs[deviator])
        return costs

    C = np.array(parallel_map(one, seeds))  # (runs, 1 + len(family))
    eq = C[:, 0]
    se = (lambda x: float(np.std(x, ddof=1) / np.sqrt(len(x))) if len(x) > 1 else 0.0)
    gains = eq[:, None] - C[:, 1:]
    mean_gain = gains.mean(axis=0)
    best = int(np.argmax(mean_gain))
    labels = [p.label for p in family]
    return GapReport(
        N=cfg.N, runs=runs,
        eq_cost=float(eq.mean()), eq_se=se(eq),
        member_costs={lab: float(C[:, j + 1].mean()) for j, lab in enumerate(labels)},
        member_se={lab: se(C[:, j + 1]) for j, lab in enumerate(labels)},
        gap=max(0.0, float(mean_gain[best])),
        gap_se=se(gains[:, best]),
        best=labels[best],
    )


def run_many(cfg: GameConfig, sol, seeds, policy: PolicySpec = EQUILIBRIUM, threads=None):
    return parallel_map(lambda s: run_game(cfg, sol, s, policy)[0], seeds, threads)
