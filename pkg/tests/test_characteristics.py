from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vpgrav.characteristics import (
    ContractViolation,
    ForceField,
    backward_exit,
    exit_derivatives,
    exit_time_bound,
    forward_exit,
    integrate_flow,
)
from vpgrav.grids import DensityField, SpatialGrid
from vpgrav.poisson import solve_dirichlet

finite = dict(allow_nan=False, allow_infinity=False)


@settings(max_examples=50, deadline=None)
@given(x3=st.floats(0.0, 3.0, **finite), v3=st.floats(-3, 3, **finite),
       vp=st.lists(st.floats(-2, 2, **finite), min_size=2, max_size=2), g=st.floats(0.5, 8, **finite))
def test_free_fall_exit_matches_closed_form(x3, v3, vp, g):
    """Backward in time under pure gravity the particle exits at
    ``t_b = (sqrt(v3^2 + 2 g x3) - v3) / g`` with ``v_b3 = sqrt(v3^2 + 2 g x3)``."""
    z = np.array([0.1, -0.2, x3, vp[0], vp[1], v3])
    if x3 == 0.0:
        return
    rec = backward_exit(z, ForceField(g))
    s = math.sqrt(v3 * v3 + 2 * g * x3)
    assert rec.t_b == pytest.approx((s - v3) / g, abs=1e-11)
    assert rec.v_b[2] == pytest.approx(s, abs=1e-9)
    assert rec.x_b[2] == pytest.approx(0.0, abs=1e-12)
    assert rec.t_b <= exit_time_bound(z[None], g)[0] + 1e-12


def test_inflow_on_the_floor_exits_immediately():
    rec = backward_exit(np.array([0.2, 0.3, 0.0, 0.1, 0.0, 0.7]), ForceField(4.0))
    assert rec.t_b == 0.0 and rec.v_b[2] == pytest.approx(0.7)


def _field(eta=1, amp=0.3):
    grid = SpatialGrid(4, 1, 129, 3.0)
    rho = (1 + 0.5 * np.cos(2 * np.pi * grid.x1))[:, None, None] * np.exp(-2 * grid.x3)[None, None, :]
    return solve_dirichlet(DensityField(grid, amp * rho * np.ones(grid.shape)), eta)


def test_energy_conserved_along_trajectories():
    force = ForceField(4.0, _field())
    rng = np.random.default_rng(3)
    Z = np.column_stack([rng.uniform(-0.5, 0.5, (20, 2)), rng.uniform(0.1, 2.5, 20), rng.uniform(-1.5, 1.5, (20, 3))])
    tr = integrate_flow(Z, force, 0.3, direction=-1, h_ode=1e-3, stop_at_boundary=False)
    E = 0.5 * np.sum(tr.v**2, axis=-1) + 4.0 * tr.x[..., 2]
    E += np.stack([force.potential(x) for x in tr.x])
    assert np.max(np.abs(E - E[0])) < 1e-8


def test_forward_then_backward_returns_home():
    force = ForceField(4.0, _field(eta=-1))
    rng = np.random.default_rng(4)
    Z = np.column_stack([rng.uniform(-0.5, 0.5, (30, 2)), rng.uniform(0.0, 2.0, 30), rng.uniform(-1, 1, (30, 3))])
    Z[:, 5] = np.abs(Z[:, 5]) + 0.2
    fwd = forward_exit(Z, force)
    back = backward_exit(np.hstack([fwd.x_b, fwd.v_b]), force)
    # the floor point reached forward exits backwards through the original start's history
    bz = backward_exit(Z, force)
    assert np.allclose(back.t_b, fwd.t_f + bz.t_b, atol=1e-9)
    assert np.allclose(back.v_b, bz.v_b, atol=1e-8)


def test_exit_derivatives_match_finite_differences():
    force = ForceField(4.0, _field())
    z = np.array([0.05, 0.1, 0.8, 0.3, -0.2, 0.4])
    d = exit_derivatives(z, force)
    assert not d.grazing
    e = 1e-6
    for k in range(6):
        dz = np.zeros(6)
        dz[k] = e
        p, m = backward_exit(z + dz, force), backward_exit(z - dz, force)
        assert d.dt_b[k] == pytest.approx((p.t_b - m.t_b) / (2 * e), abs=1e-6)
        assert np.allclose(d.dv_b[:, k], (p.v_b - m.v_b) / (2 * e), atol=1e-6)


def test_field_stronger_than_gravity_is_a_contract_violation():
    grid = SpatialGrid(1, 1, 65, 2.0)
    # eta = +1: the field pushes particles up, here harder than gravity pulls down
    phi = solve_dirichlet(DensityField(grid, 50.0 * np.ones(grid.shape)), 1)
    with pytest.raises(ContractViolation):
        backward_exit(np.array([[0.0, 0.0, 1.0, 0.0, 0.0, 0.0]]), ForceField(0.5, phi))
