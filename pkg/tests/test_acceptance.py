"""The fourteen acceptance criteria, each at its stated tolerance and time budget.

Every test prints one PASS/FAIL line; the lines are collected again in the
terminal summary under "acceptance criteria".
"""

from __future__ import annotations

import math
import time

import numpy as np
import pytest

from conftest import phase_samples, record_criterion, shooting_potential, strong_scenario
from vpgrav.characteristics import ForceField, backward_exit, exit_time_bound, flow_with_jacobian, integrate_flow
from vpgrav.grids import DensityField, Distribution, SpatialGrid, VelocityGrid
from vpgrav.poisson import solve_dirichlet


def _finish(number, title, ok, detail):
    record_criterion(number, title, ok, detail)
    assert ok, detail


def test_c01_poisson_mode0_oracle():
    t = time.perf_counter()
    grid = SpatialGrid(1, 1, 512, 20.0)
    rho = DensityField(grid, np.exp(-grid.x3)[None, None, :])
    phi = solve_dirichlet(rho, 1)
    elapsed = time.perf_counter() - t
    exact = np.exp(-grid.x3) - 1.0
    err_nodes = float(np.max(np.abs(phi.values[0, 0] - exact)))
    xs = np.random.default_rng(1).uniform(0.0, 20.0, 2000)
    err_off = float(np.max(np.abs(phi.potential(np.zeros((xs.size, 2)), xs) - (np.exp(-xs) - 1.0))))
    err = max(err_nodes, err_off)
    _finish(1, "Poisson mode-0 oracle", err <= 1e-6 and elapsed < 1.0,
            f"sup error {err:.3e} (nodes {err_nodes:.3e}, off-grid {err_off:.3e}) <= 1e-6, {elapsed:.3f} s < 1 s")


def test_c02_poisson_mode1_oracle():
    t = time.perf_counter()
    grid = SpatialGrid(4, 1, 512, 20.0)
    hor = np.cos(2 * np.pi * grid.x1)
    rho = DensityField(grid, hor[:, None, None] * np.exp(-grid.x3)[None, None, :])
    phi = solve_dirichlet(rho, 1)
    elapsed = time.perf_counter() - t
    k = 2 * np.pi
    prof = (np.exp(-grid.x3) - np.exp(-k * grid.x3)) / (1 - k * k)
    exact = hor[:, None, None] * prof[None, None, :]
    err = float(np.max(np.abs(phi.values - exact)))
    _finish(2, "Poisson mode-1 oracle", err <= 1e-6 and elapsed < 1.0,
            f"sup error {err:.3e} <= 1e-6, {elapsed:.3f} s < 1 s")


def test_c03_free_fall_exit_times():
    rng = np.random.default_rng(3)
    n = 1000
    g = rng.uniform(0.5, 10.0, n)
    x3 = rng.uniform(0.0, 3.0, n)
    v3 = rng.uniform(-3.0, 3.0, n)
    t = time.perf_counter()
    tb = np.empty(n)
    for i in range(n):
        z = np.array([0.0, 0.0, x3[i], 0.3, -0.2, v3[i]])
        tb[i] = backward_exit(z, ForceField(g[i])).t_b
    elapsed = time.perf_counter() - t
    exact = (np.sqrt(v3**2 + 2 * g * x3) - v3) / g
    err = float(np.max(np.abs(tb - exact)))
    _finish(3, "free-fall exit times", err <= 1e-8 and elapsed < 5.0,
            f"max |t_b - exact| {err:.3e} <= 1e-8 over {n} samples, {elapsed:.2f} s < 5 s")


def test_c04_exit_time_battery(strong_steady):
    details, ok = [], True
    for eta in (1, -1):
        sol, _ = strong_steady[eta]
        g = sol.params.g
        dphi = sol.phi.grad_sup()
        assert dphi <= g / 2, "precondition: the solved field must satisfy the gravity bound"
        Z = phase_samples(np.random.default_rng(4), 10_000, sol.grid.L3, sol.vgrid.vmax)
        t = time.perf_counter()
        rec = backward_exit(Z, ForceField(g, sol.phi), forward=True)
        elapsed = time.perf_counter() - t
        # 1e-10 relative absorbs the rounding of the computed times only
        v1 = int(np.count_nonzero(rec.t_b > exit_time_bound(Z, g, -1) * (1 + 1e-10)))
        v2 = int(np.count_nonzero(rec.t_b + rec.t_f > 4 / g * np.sqrt(Z[:, 5] ** 2 + g * Z[:, 2]) * (1 + 1e-10)))
        ok &= v1 == 0 and v2 == 0 and elapsed < 60
        details.append(f"eta={eta:+d} |grad Phi|={dphi:.3f}: {v1}+{v2} violations, {elapsed:.1f} s")
    _finish(4, "exit-time bound battery", ok, "; ".join(details) + " (10^4 samples each, < 60 s)")


def test_c05_steady_1d3v_shooting_oracle(strong_steady):
    details, ok = [], True
    for eta in (1, -1):
        sol, elapsed = strong_steady[eta]
        exact = shooting_potential(eta, 1.0, 1.0, 4.0, sol.grid.x3)
        err = float(np.max(np.abs(sol.phi.values[0, 0] - exact)))
        ok &= sol.converged and err <= 1e-4 and elapsed < 120
        details.append(f"eta={eta:+d}: sup error {err:.2e}, {len(sol.history)} iterates, {elapsed:.1f} s")
    _finish(5, "steady 1D3V shooting oracle", ok, "; ".join(details) + " (<= 1e-4, < 2 min)")


def test_c06_uniform_bound_monitor(default_steady):
    from vpgrav.steady import successive_ratios

    worst = min(m for it in default_steady.history for m in it.margins.values())
    ratios = successive_ratios(default_steady)[1:]
    ok = worst >= -1e-3 and bool(ratios) and max(ratios) <= 0.5
    _finish(6, "uniform-bound monitor", ok,
            f"worst relative margin {worst:.4f} >= -1e-3 over {len(default_steady.history)} iterates; "
            f"ratios after iterate 2 {', '.join(f'{r:.2e}' for r in ratios)} <= 0.5")


def test_c07_uniqueness_probe(default_params, default_datum, default_grids):
    from vpgrav.steady import _weighted_diff, uniqueness_probe

    grid, vgrid = default_grids
    rep = uniqueness_probe(default_datum, default_params, grid, vgrid, tol_fix=1e-12, max_iter=40)
    a, b = rep.solutions
    # the starts must really differ: compare the first iterates
    first_gap = _weighted_diff(a.history[0].h.values, b.history[0].h.values, grid, vgrid,
                               default_params.beta, default_params.g)
    ok = rep.passed and rep.distance <= 1e-6 and first_gap > 1e-9
    _finish(7, "uniqueness probe", ok,
            f"final weighted distance {rep.distance:.2e} <= 1e-6; first iterates differ by {first_gap:.2e}")


def test_c08_jacobian_check(strong_steady):
    sol, _ = strong_steady[1]
    force = ForceField(sol.params.g, sol.phi)
    rng = np.random.default_rng(8)
    Z = phase_samples(rng, 400, sol.grid.L3, sol.vgrid.vmax)
    Z = Z[np.abs(Z[:, 5]) > 0.2][:100]
    dur = 0.5 * backward_exit(Z, force).t_b
    h_ode, eps = 1e-3, 1e-6
    _, _, J = flow_with_jacobian(Z, force, dur, h_ode=h_ode)
    M = J.matrix()
    fd = np.empty_like(M)
    for j in range(6):
        zp, zm = Z.copy(), Z.copy()
        zp[:, j] += eps
        zm[:, j] -= eps
        xp, vp, _ = flow_with_jacobian(zp, force, dur, h_ode=h_ode)
        xm, vm, _ = flow_with_jacobian(zm, force, dur, h_ode=h_ode)
        fd[:, :, j] = np.hstack([xp - xm, vp - vm]) / (2 * eps)
    err = float(np.max(np.abs(M - fd) / np.maximum(1.0, np.abs(fd))))
    det = float(np.max(np.abs(J.determinant() - 1.0)))
    _finish(8, "Jacobian check", Z.shape[0] == 100 and err <= 1e-5 and det <= 1e-6,
            f"{Z.shape[0]} samples: max FD mismatch {err:.2e} <= 1e-5, max |det - 1| {det:.2e} <= 1e-6")


def _weight_drift(sol, Z, h_ode):
    p = sol.params
    force = ForceField(p.g, sol.phi)
    rec = backward_exit(Z, force, h_ode=h_ode)
    tr = integrate_flow(Z, force, rec.t_b, -1, h_ode=h_ode, error_estimate=False)
    x = tr.x.reshape(-1, 3)
    v = tr.v.reshape(-1, 3)
    x3 = np.maximum(x[:, 2], 0.0)
    pot = np.where(x3 > 0, sol.phi.potential(x[:, :2], x3), 0.0)
    E = (np.sum(v * v, 1) + 2 * pot + 2 * p.g * x3).reshape(tr.x.shape[:2])
    return float(np.max(np.abs(np.expm1(p.beta * (E - E[:1])))))


def test_c09_weight_invariance(default_steady, strong_steady):
    details, ok = [], True
    for name, sol in (("default", default_steady), ("strong field", strong_steady[1][0])):
        Z = phase_samples(np.random.default_rng(9), 200, sol.grid.L3, sol.vgrid.vmax)
        drift = _weight_drift(sol, Z, 1e-3)
        ok &= drift <= 1e-7
        details.append(f"{name}: max relative drift {drift:.2e}")
    _finish(9, "weight invariance", ok, "; ".join(details) + " (<= 1e-7, h_ode = 1e-3, 200 trajectories)")


def test_c10_grad_v_envelope(default_steady):
    from vpgrav.verify import grad_v_envelope

    Z = phase_samples(np.random.default_rng(10), 10_000, default_steady.grid.L3, default_steady.vgrid.vmax)
    val, env, margin = grad_v_envelope(default_steady, Z)
    finite = bool(np.all(np.isfinite(val)))
    ok = finite and margin >= 0
    bins = ", ".join(f"{e:.2e}" for e in env if not math.isnan(e))
    _finish(10, "grad_v h Gaussian envelope", ok,
            f"sup {np.max(val):.4e} finite={finite}; |v|-bin maxima [{bins}] non-increasing past the peak")


def test_c11_dynamic_decay_certification(default_dynamic):
    res, elapsed = default_dynamic
    rep = res.report
    ok = (rep.bootstrap_held and rep.lambda_fit > 0 and rep.decay_ok and rep.eb_ok and elapsed < 600
          and math.isclose(rep.t[-1], 20 / rep.lambda_inf, rel_tol=1e-12))
    worst = float(np.max(rep.decay_lhs / rep.decay_rhs))
    _finish(11, "dynamic decay certification", ok,
            f"{len(rep.t) - 1} steps to T={rep.t[-1]:.2f}; bootstrap held={rep.bootstrap_held}; "
            f"lambda_fit={rep.lambda_fit:.3f} (lambda_inf={rep.lambda_inf:.4f}, extinct={rep.extinct}); "
            f"max LHS/RHS {worst:.3e}; e^b value {rep.eb_value:.10f} <= 2; {elapsed:.0f} s < 600 s")


def test_c12_flux_potential_bound(default_dynamic):
    rep = default_dynamic[0].report
    worst = float(np.max(np.where(rep.flux_rhs > 0, rep.flux_lhs / np.where(rep.flux_rhs > 0, rep.flux_rhs, 1), 0)))
    _finish(12, "flux-potential bound", rep.flux_ok,
            f"LHS <= RHS at all {len(rep.t)} output times, max LHS/RHS {worst:.3e}")


def test_c13_green_selftest():
    from vpgrav.poisson import green_selftest

    rep = green_selftest()
    ok = rep.c2_ok and rep.envelope_ok
    _finish(13, "Green self-test", ok,
            f"c2 = {rep.c2:.15f} (1/(2 pi) = {1 / (2 * math.pi):.15f}); fitted C = {rep.fitted_C:.4f}; "
            f"worst remainder / (C e^-d) on d in [1, 5] = {rep.envelope_worst:.3f} (needs <= 1)")


def test_c14_io_round_trips(tmp_path):
    from vpgrav.config import defaults, parse_config, parse_config_text
    from vpgrav.snapshot import read_snapshot, to_distribution, write_snapshot
    from vpgrav.verify import run_battery

    rng = np.random.default_rng(14)
    grid, vg = SpatialGrid(2, 3, 5, 1.5), VelocityGrid(4, 3, 6, 2.0)
    d = Distribution(grid, vg, rng.standard_normal(grid.shape + vg.shape) * 1e-3, "perturbation", 1.5)
    path = tmp_path / "f.snap"
    write_snapshot(path, d)
    back = to_distribution(read_snapshot(path))
    snap_ok = back.values.tobytes() == d.values.tobytes() and back.grid == grid and back.vgrid == vg

    cfg = defaults()
    cfg.values["physics"]["beta"] = 2.75
    cfg.values["verify"]["h_ode"] = 1.0 / 3.0
    text = cfg.echo()
    (tmp_path / "a.cfg").write_text(text)
    again = parse_config(tmp_path / "a.cfg")
    echo_ok = again.values == cfg.values and parse_config_text(again.echo()).echo() == text

    small = parse_config_text(SMALL_BATTERY)
    r1 = run_battery(small).text(timing=False)
    r2 = run_battery(small).text(timing=False)
    small.values["verify"]["threads"] = 3
    r3 = run_battery(small).text(timing=False)
    det_ok = r1 == r2 == r3
    _finish(14, "I/O round trips", snap_ok and echo_ok and det_ok,
            f"snapshot bit-exact={snap_ok}; config echo stable={echo_ok}; "
            f"battery identical over 2 runs and 1 vs 3 threads={det_ok}")


SMALL_BATTERY = """
[grid]
n3 = 48
m1 = 6
m2 = 6
m3 = 24
[steady]
max_iter = 20
[verify]
samples = 400
envelope_samples = 400
lemma_samples = 40
weight_samples = 40
seed = 7
"""
