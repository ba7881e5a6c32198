from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vpgrav.dynamic import (
    InitialPerturbation,
    decay_constant,
    evolve,
    fit_decay_rate,
    flux_bound_constant,
    lambda_infinity,
)
from vpgrav.grids import SpatialGrid, VelocityGrid
from vpgrav.poisson import solve_dirichlet
from vpgrav.model import BoundaryDatum, Params
from vpgrav.steady import first_iterate_potential, solve_steady

finite = dict(allow_nan=False, allow_infinity=False)
P = Params(4.0, 1, 3.0, 1.5)
GRID, VGRID = SpatialGrid(1, 1, 33, 0.6), VelocityGrid(8, 8, 32, 2.2)


@pytest.fixture(scope="module")
def small_steady():
    return solve_steady(BoundaryDatum("maxwellian", 0.03, 6.0), P, GRID, VGRID, tol_fix=1e-12)


def test_first_iterate_is_the_gravity_maxwellian():
    G = BoundaryDatum("maxwellian", 0.03, 6.0)
    # velocity spacing fine enough that the trapezoid rule on e^{-6|v|^2} is exact to ~1e-8
    vg = VelocityGrid(16, 16, 64, 2.2)
    sol = solve_steady(G, P, GRID, vg, max_iter=1)
    phi1, rho1 = first_iterate_potential(G, GRID, P)
    assert np.max(np.abs(sol.rho.values - rho1.values)) < 5e-8 * rho1.values.max()
    exact_rho_phi = solve_dirichlet(rho1, P.eta).values
    assert np.max(np.abs(sol.phi.values - exact_rho_phi)) < 5e-8 * abs(phi1(GRID.L3))


def test_closed_form_potential_converges_at_fourth_order():
    G = BoundaryDatum("maxwellian", 0.03, 6.0)
    errs = []
    for n in (65, 129, 257):
        grid = SpatialGrid(1, 1, n, 0.6)
        phi1, rho1 = first_iterate_potential(G, grid, P)
        errs.append(np.max(np.abs(solve_dirichlet(rho1, P.eta).values[0, 0] - phi1(grid.x3))))
    assert errs[-1] < 5e-6 * abs(phi1(0.6))
    assert all(a / b > 12 for a, b in zip(errs, errs[1:]))


def test_vacuum_inflow_gives_vacuum(small_steady):
    sol = solve_steady(BoundaryDatum("maxwellian", 0.0, 6.0), P, GRID, VGRID)
    assert sol.converged and np.all(sol.h.values == 0) and sol.phi.is_zero


def test_picard_differences_contract(small_steady):
    assert small_steady.converged
    d = [it.diff for it in small_steady.history[1:]]
    assert all(b < 0.5 * a for a, b in zip(d, d[1:]) if a > 1e-14)


def test_zero_perturbation_stays_zero(small_steady):
    res = evolve(InitialPerturbation("zero"), small_steady, P, T=0.05)
    assert np.all(res.report.norm_rho == 0) and np.all(res.states[-1].f.values == 0)
    assert len(res.states) == 2


def test_perturbation_decays(small_steady):
    f0 = InitialPerturbation("gaussian", 0.01, 6.0, g=P.g)
    res = evolve(f0, small_steady, P, T=0.5)
    r = res.report.norm_rho
    assert r[-1] < r[0] and res.report.bootstrap_held


def test_lambda_and_constants():
    assert lambda_infinity(P, 0.0) == math.inf
    with pytest.raises(ValueError):
        lambda_infinity(P, -1.0)
    N = 0.1
    arg = 2 + 4 * 9 / (2 ** (8.5 + 0.5) * math.pi**1.5 * N)
    assert lambda_infinity(P, N) == pytest.approx(16 * 3 / 64 * math.log(arg), rel=1e-15)
    assert decay_constant(P, 0.0) == pytest.approx(16 * math.pi**1.5 / 3**1.5)
    assert flux_bound_constant(P) == pytest.approx(8 * math.pi * (1 + 1 / 12) / 9)


@settings(max_examples=40, deadline=None)
@given(rate=st.floats(0.01, 20, **finite), c=st.floats(-5, 5, **finite))
def test_fit_recovers_exact_exponentials(rate, c):
    t = np.linspace(0, 2.0, 101)
    y = np.exp(c - rate * t)
    lam, n, extinct = fit_decay_rate(t, y)
    assert lam == pytest.approx(rate, rel=1e-8) and not extinct and n == 51


def test_fit_handles_extinction():
    t = np.linspace(0, 1, 41)
    y = np.exp(-3 * t)
    y[30:] = 0
    lam, n, extinct = fit_decay_rate(t, y)
    assert extinct and lam == pytest.approx(3.0)
    lam, n, extinct = fit_decay_rate(t[:5], np.r_[1.0, 0, 0, 0, 0])
    assert extinct and lam == math.inf
