"""Command-line entry point: ``vpgrav {steady,evolve,verify,green-selftest}``."""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from vpgrav.config import ConfigError, defaults, parse_config
from vpgrav.snapshot import write_snapshot

THREADS_ENV = "VPGRAV_THREADS"
CSV_HEADER = "t,norm_rho_inf,norm_f_weighted,decay_lhs,decay_rhs,bootstrap_ok"
CONVERGENCE_HEADER = "iteration,weighted_diff,Uest_h,Uest_wh,Uest_rho,Uest_DPhi,flagged"


def fmt(x):
    """Shortest text that reads back to the same double (integers stay integers)."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "%.17g" % float(x)


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def build_parser():
    p = argparse.ArgumentParser(prog="vpgrav", description="Kinetic equilibria under gravity: solve and verify.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="configuration file (defaults apply to missing keys)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="override verify.seed")
    common.add_argument("--threads", type=int, help=f"worker threads (overrides ${THREADS_ENV} and the config)")
    sub = p.add_subparsers(dest="command", metavar="{steady,evolve,verify,green-selftest}")
    sub.required = True
    sub.add_parser("steady", parents=[common], help="solve for the steady state")
    sub.add_parser("evolve", parents=[common], help="march a perturbation of the steady state")
    sub.add_parser("verify", parents=[common], help="run the inequality battery")
    sub.add_parser("green-selftest", parents=[common], help="check the half-space Green function decomposition")
    return p


def resolve_config(args):
    cfg = parse_config(args.config) if args.config else defaults()
    v = cfg.values["verify"]
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be nonnegative")
        v["seed"] = args.seed
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            v["threads"] = int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    if args.threads is not None:
        v["threads"] = args.threads
    if v["threads"] < 1:
        raise ConfigError("verify.threads must be positive")
    return cfg


def _outdir(args):
    if not args.out:
        return None
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _solve(cfg):
    from vpgrav.steady import solve_steady

    grid, vgrid = cfg.grids()
    st = cfg["steady"]
    return solve_steady(cfg.boundary(), cfg.params(), grid, vgrid, tol_fix=st["tol_fix"],
                        max_iter=st["max_iter"], step_fraction=st["step_fraction"])


def cmd_steady(cfg, out):
    sol = _solve(cfg)
    print(f"steady: {sol.status}, {len(sol.history)} iterates, sup|grad Phi| = {sol.phi.grad_sup():.6g}")
    rows = []
    for it in sol.history:
        m = it.margins
        rows.append((it.index, it.diff, m["Uest:h"], m["Uest:wh"], m["Uest:rho"], m["Uest:DPhi"], it.flagged))
        print(f"  iterate {it.index}: diff {it.diff:.3e}" + ("  FLAGGED" if it.flagged else ""))
    if out:
        meta = {"g": sol.params.g, "eta": sol.params.eta}
        write_snapshot(os.path.join(out, "steady_h.snap"), sol.h, meta)
        write_snapshot(os.path.join(out, "steady_rho.snap"), sol.rho, dict(meta, role="density"))
        write_snapshot(os.path.join(out, "steady_phi.snap"), sol.phi.values, dict(meta, role="potential"))
        write_csv(os.path.join(out, "convergence.csv"), CONVERGENCE_HEADER, rows)
    return 0 if sol.converged else 1


def cmd_evolve(cfg, out):
    from vpgrav.verify import run_dynamic

    sol = _solve(cfg)
    print(f"steady: {sol.status}")
    stride = cfg["dynamic"]["stride"]
    res = run_dynamic(cfg, sol, stride=stride if out else None)
    rep = res.report
    print(f"evolve: {len(rep.t) - 1} steps of {res.dt:.6g} to T = {rep.t[-1]:.6g}")
    print(f"  lambda_inf {rep.lambda_inf:.6g}, lambda_fit {rep.lambda_fit:.6g}, bootstrap held: {rep.bootstrap_held}")
    if out:
        write_csv(os.path.join(out, "timeseries.csv"), CSV_HEADER, rep.csv_rows())
        for st in res.states:
            k = int(round(st.t / res.dt))
            write_snapshot(os.path.join(out, f"f_{k:06d}.snap"), st.f,
                           {"t": float(st.t), "g": sol.params.g, "role": "perturbation"})
    return 0


def cmd_verify(cfg, out):
    from vpgrav.verify import run_battery

    rep = run_battery(cfg, log=lambda m: print(m, file=sys.stderr, flush=True))
    sys.stdout.write(rep.text())
    if out:
        rep.write(os.path.join(out, "verify_report.txt"))
    return rep.status_code


def cmd_green(cfg, out):
    from vpgrav.poisson import green_selftest

    rep = green_selftest(seed=cfg["verify"]["seed"])
    lines = [
        f"c2 {rep.c2:.17g} ok={int(rep.c2_ok)}",
        f"boundary_max {rep.boundary_max:.17g}",
        f"fitted_C {rep.fitted_C:.17g}",
        f"envelope_worst {rep.envelope_worst:.17g} ok={int(rep.envelope_ok)}",
        f"ratio_3_to_1 {rep.ratio_3_to_1:.17g} ok={int(rep.ratio_ok)}",
        f"nonzero_mode_rate {rep.nonzero_mode_rate:.17g}",
        f"green_constant_empirical {rep.green_constant_empirical:.17g}",
        f"tail_estimate {rep.tail_estimate:.17g} converged={int(rep.converged)}",
        f"status {'pass' if rep.passed else 'fail'}",
    ]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if out:
        with open(os.path.join(out, "green_selftest.txt"), "w", encoding="utf-8") as fh:
            fh.write(text)
    return 0 if rep.passed else 1


COMMANDS = {"steady": cmd_steady, "evolve": cmd_evolve, "verify": cmd_verify, "green-selftest": cmd_green}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
    except (ConfigError, OSError) as exc:
        print(f"vpgrav: {exc}", file=sys.stderr)
        return 2
    out = _outdir(args)
    echo = cfg.echo()
    print(f"# resolved configuration ({cfg.source})")
    sys.stdout.write(echo)
    if out:
        with open(os.path.join(out, "resolved.cfg"), "w", encoding="utf-8") as fh:
            fh.write(echo)
    t0 = time.perf_counter()
    status = COMMANDS[args.command](cfg, out)
    print(f"# {args.command} finished in {time.perf_counter() - t0:.1f} s with status {status}", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
