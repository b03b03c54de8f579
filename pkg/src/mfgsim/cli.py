"""Command-line entry point: ``mfgsim <subcommand> --config PATH [options]``.

Flags override values from the config file, which override built-in defaults.
Every output file is written in a fixed row order with floats at 17
significant digits, so reruns are byte-identical whatever ``MFGSIM_THREADS`` is.

Exit codes: 0 ok, 1 dual-effect probe failed, 2 config error,
3 assumption violation, 4 solver non-convergence.
"""

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .kernels import SolverError
from .model import DECODER_INITS, ConfigError, check_structural_assumptions, fmt_float, load_config
from .sim import (
    PolicySpec,
    nash_gap,
    parallel_map,
    probe_suite,
    run_game,
)
from .solver import (
    AssumptionViolation,
    check_compatible,
    compute_gains,
    contraction_diagnostics,
    dumps_solution,
    solution_from_dict,
    solve_equilibrium,
)

EXIT_OK, EXIT_PROBE_FAIL, EXIT_CONFIG, EXIT_ASSUMPTION, EXIT_SOLVER = 0, 1, 2, 3, 4

SUMMARY_HEADER = ["run_id", "N", "T", "alpha", "seed", "avg_cost", "eps_TN", "tx_rate"]


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _cell(x):
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return fmt_float(x)
    return str(x)


def write_csv(path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(x) for x in row])


def _fmt_mat(M):
    M = np.atleast_2d(M)
    if M.size == 1:
        return f"{M.item():.6f}"
    return "[" + "; ".join(" ".join(f"{v:.6f}" for v in row) for row in M) + "]"


def load_run_config(args):
    cfg = load_config(args.config)
    return cfg.with_overrides(
        N=getattr(args, "agents", None),
        T=getattr(args, "horizon", None),
        alpha=getattr(args, "alpha", None),
        seed=getattr(args, "seed", None),
        runs=getattr(args, "runs", None),
        decoder_init=getattr(args, "decoder_init", None),
    )


def obtain_solution(cfg, args):
    path = getattr(args, "equilibrium", None)
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read equilibrium file {path}: {exc}") from exc
        sol = solution_from_dict(doc)
        check_compatible(cfg, sol)
        return sol
    return solve_equilibrium(cfg, force=args.force)


def cmd_solve(args):
    cfg = load_run_config(args)
    sol = solve_equilibrium(cfg, force=args.force)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "equilibrium.json").write_text(dumps_solution(sol))
    print(f"{'type':>4}  {'K':>12} {'Pi':>12} {'Gamma':>12} {'H':>12} {'Xi':>10}")
    for i, g in enumerate(sol.gains):
        print(f"{i:>4}  {_fmt_mat(g.K):>12} {_fmt_mat(g.Pi):>12} {_fmt_mat(g.Gamma):>12} "
              f"{_fmt_mat(g.H):>12} {sol.diagnostics.xi_per_type[i]:>10.6f}")
    print(f"L* = {_fmt_mat(sol.Lstar)}")
    print(f"zeta = {sol.diagnostics.zeta:.6f}")
    print(sol.diagnostics.describe())
    if sol.forced:
        print("warning: solved with --force; the fixed point carries no existence or "
              "uniqueness guarantee", file=sys.stderr)
    print(f"wrote {out / 'equilibrium.json'}")
    return EXIT_OK


def _summary_row(run_id, cfg, seed, met):
    return [run_id, cfg.N, cfg.T, cfg.scheduler.alpha, seed, met.avg_cost_per_agent,
            met.eps_TN, met.tx_rate]


def cmd_simulate(args):
    cfg = load_run_config(args)
    sol = obtain_solution(cfg, args)
    seeds = [cfg.seed + r for r in range(cfg.runs)]

    def one(r):
        return run_game(cfg, sol, seeds[r], record=(r == 0))

    results = parallel_map(one, range(cfg.runs))
    out = Path(args.out)
    write_csv(out / "summary.csv", SUMMARY_HEADER,
              [_summary_row(r, cfg, seeds[r], met) for r, (met, _) in enumerate(results)])

    tr = results[0][1]
    n, m = cfg.n, cfg.m
    header = (["k", "agent_id", "gamma"] + [f"x{j}" for j in range(n)]
              + [f"y{j}" for j in range(n)] + [f"u{j}" for j in range(m)] + ["err_sq"])
    err_sq = np.sum(tr.err * tr.err, axis=2)

    def trace_rows():
        for k in range(cfg.T):
            for i in range(cfg.N):
                yield ([k, i, bool(tr.gamma[k, i])] + list(tr.X[k, i]) + list(tr.Y[k, i])
                       + list(tr.U[k, i]) + [err_sq[k, i]])

    write_csv(out / "trace.csv", header, trace_rows())

    est = np.mean([met.est_err_trace for met, _ in results], axis=0)
    spread = np.mean([met.consensus_spread for met, _ in results], axis=0)
    write_csv(out / "timeseries.csv",
              ["k", "est_err_mean", "consensus_spread_mean"] + [f"xbar{j}" for j in range(n)],
              ([k, est[k], spread[k]] + list(tr.xbar[k]) for k in range(cfg.T)))

    costs = np.array([met.avg_cost_per_agent for met, _ in results])
    print(f"runs={cfg.runs} N={cfg.N} T={cfg.T} alpha={cfg.scheduler.alpha:g}: "
          f"mean avg_cost={costs.mean():.6g}, "
          f"mean tx_rate={np.mean([met.tx_rate for met, _ in results]):.4f}")
    print(f"wrote {out}/summary.csv, trace.csv, timeseries.csv")
    return EXIT_OK


def quartile_row(alpha, values, tx):
    values = np.asarray(values, dtype=float)
    q1, med, q3 = np.percentile(values, [25, 50, 75])
    se = float(np.std(values, ddof=1) / np.sqrt(len(values))) if len(values) > 1 else 0.0
    return [alpha, len(values), med, q1, q3, float(values.mean()), se, float(np.mean(tx))]


def cmd_sweep_alpha(args):
    base = load_run_config(args)
    sol = obtain_solution(base, args)
    alphas = args.alphas if args.alphas else [0.0, 2.0, 4.0, 6.0]
    jobs = [(a, r) for a in alphas for r in range(base.runs)]

    def one(job):
        a, r = job
        cfg = base.with_overrides(alpha=a)
        return run_game(cfg, sol, base.seed + r)[0]

    mets = parallel_map(one, jobs)
    rows, quart = [], []
    for a in alphas:
        sel = [(r, met) for (aa, r), met in zip(jobs, mets) if aa == a]
        cfg = base.with_overrides(alpha=a)
        rows.extend(_summary_row(r, cfg, base.seed + r, met) for r, met in sel)
        quart.append(quartile_row(a, [met.avg_cost_per_agent for _, met in sel],
                                  [met.tx_rate for _, met in sel]))
    out = Path(args.out)
    write_csv(out / "summary.csv", SUMMARY_HEADER, rows)
    write_csv(out / "quartiles.csv",
              ["alpha", "runs", "median", "q1", "q3", "mean", "se", "tx_rate_mean"], quart)
    print(f"{'alpha':>6} {'median':>12} {'q1':>12} {'q3':>12} {'tx_rate':>8}")
    for q in quart:
        print(f"{q[0]:>6g} {q[2]:>12.6g} {q[3]:>12.6g} {q[4]:>12.6g} {q[7]:>8.4f}")
    print(f"wrote {out}/summary.csv, quartiles.csv")
    return EXIT_OK


def cmd_nash_gap(args):
    base = load_run_config(args)
    sol = obtain_solution(base, args)
    sizes = args.sizes if args.sizes else [base.N]
    rows = []
    for N in sizes:
        rep = nash_gap(base.with_overrides(N=N), sol)
        rel = rep.gap / rep.eq_cost if rep.eq_cost > 0 else 0.0
        rows.append([N, rep.runs, "equilibrium", rep.eq_cost, rep.eq_se, "", "", ""])
        for label, cost in rep.member_costs.items():
            rows.append([N, rep.runs, label, cost, rep.member_se[label], "", "", ""])
        rows.append([N, rep.runs, "gap", rep.gap, rep.gap_se, rep.best, rel, 1])
        print(f"N={N:>6}  J_eq={rep.eq_cost:.6g}  gap={rep.gap:.3e} +/- {rep.gap_se:.1e} "
              f"({100 * rel:.3f}% of J_eq, best deviation {rep.best})")
    out = Path(args.out)
    write_csv(out / "gap.csv",
              ["N", "runs", "policy", "cost", "se", "best", "gap_rel", "is_gap"], rows)
    print("note: deviations are searched over a finite family, so the gap is a lower bound")
    print(f"wrote {out}/gap.csv")
    return EXIT_OK


def default_probe_policies():
    """Policy pairs compared against the equilibrium: no control and doubled feedback gain."""
    return [PolicySpec("zero"), PolicySpec("scaled", 2.0)]


def cmd_probe_dual_effect(args):
    cfg = load_run_config(args)
    sol = obtain_solution(cfg, args)
    seeds = [cfg.seed + r for r in range(cfg.runs)]
    rows, ok = [], True
    for seed in seeds:
        reports = probe_suite(cfg, sol, seed, default_probe_policies(),
                              control_blind=args.tamper_scheduler)
        for rep in reports:
            ok &= rep.passed
            rows.append([seed, cfg.decoder_init, rep.policy, rep.max_err_diff,
                         rep.gamma_match, rep.passed])
            print(f"seed={seed} init={cfg.decoder_init} {rep.policy:<18} "
                  f"max|de|={rep.max_err_diff:.3e} gamma_match={rep.gamma_match} "
                  f"{'PASS' if rep.passed else 'FAIL'}")
    write_csv(Path(args.out) / "probe.csv",
              ["seed", "decoder_init", "policy", "max_err_diff", "gamma_match", "pass"], rows)
    print("dual-effect probe:", "PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_PROBE_FAIL


def cmd_check(args):
    cfg = load_run_config(args)
    print(f"config ok: {len(cfg.distribution.types)} type(s), n={cfg.n}, m={cfg.m}, "
          f"N={cfg.N}, T={cfg.T}, alpha={cfg.scheduler.alpha:g}")
    bad = False
    gains = []
    for i, t in enumerate(cfg.distribution.types):
        diag = check_structural_assumptions(t)
        print(f"type {i}: {diag.describe()}")
        bad |= not diag.passed
        if diag.passed:
            gains.append(compute_gains(t.A, t.B, t.Q, t.R, cfg.solver_tol, cfg.solver_max_iter))
    if not bad:
        cdiag = contraction_diagnostics(gains, cfg.distribution)
        print(cdiag.describe())
        bad = not cdiag.passed
    return EXIT_ASSUMPTION if bad and not args.force else EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(
        prog="mfgsim",
        description="Mean-field LQ games with scheduled communication over noisy channels.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default="out"):
        sp.add_argument("--config", required=True, help="config file (.json or .yaml)")
        sp.add_argument("--out", default=out_default, help="output directory")
        sp.add_argument("--agents", type=int, help="number of agents N")
        sp.add_argument("--horizon", type=int, help="horizon T")
        sp.add_argument("--seed", type=int, help="master seed; run r uses seed + r")
        sp.add_argument("--runs", type=int, help="Monte Carlo runs")
        sp.add_argument("--decoder-init", choices=DECODER_INITS)
        sp.add_argument("--force", action="store_true",
                        help="continue when the contraction condition fails")
        return sp

    common(sub.add_parser("solve", help="solve the mean-field equilibrium"))

    sp = common(sub.add_parser("simulate", help="simulate N-agent games"))
    sp.add_argument("--alpha", type=float, help="scheduling threshold")
    sp.add_argument("--equilibrium", help="use a solved equilibrium.json instead of re-solving")

    sp = common(sub.add_parser("sweep-alpha", help="average cost across scheduling thresholds"))
    sp.add_argument("--alphas", type=_floats, help="comma-separated thresholds (default 0,2,4,6)")
    sp.add_argument("--equilibrium")

    sp = common(sub.add_parser("nash-gap", help="estimate the unilateral deviation gain"))
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--sizes", type=_ints, help="comma-separated population sizes")
    sp.add_argument("--equilibrium")

    sp = common(sub.add_parser("probe-dual-effect",
                               help="check estimation errors do not depend on the control"))
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--equilibrium")
    # test-only fault injection: lets the control leak into the scheduler input
    sp.add_argument("--tamper-scheduler", action="store_true", help=argparse.SUPPRESS)

    sp = common(sub.add_parser("check", help="validate a config and report the assumptions"))
    sp.add_argument("--alpha", type=float)
    return p


COMMANDS = {
    "solve": cmd_solve,
    "simulate": cmd_simulate,
    "sweep-alpha": cmd_sweep_alpha,
    "nash-gap": cmd_nash_gap,
    "probe-dual-effect": cmd_probe_dual_effect,
    "check": cmd_check,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AssumptionViolation as exc:
        print(f"assumption violated: {exc}", file=sys.stderr)
        return EXIT_ASSUMPTION
    except SolverError as exc:
        print(f"solver did not converge: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
