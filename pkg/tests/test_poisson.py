from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vpgrav.grids import DensityField, SpatialGrid
from vpgrav.poisson import Field, flux_potential, green_selftest, solve_dirichlet

finite = dict(allow_nan=False, allow_infinity=False)


def _mode_profile(B, k, x):
    """Solution of u'' - k^2 u = e^{-B x}, u(0) = 0, bounded."""
    return (np.exp(-B * x) - np.exp(-k * x)) / (B * B - k * k)


def _mode2_error(n3):
    grid = SpatialGrid(8, 1, n3, 12.0)
    hor = np.cos(4 * np.pi * grid.x1)
    rho = DensityField(grid, hor[:, None, None] * np.exp(-1.5 * grid.x3)[None, None, :])
    phi = solve_dirichlet(rho, -1)
    exact = -hor[:, None, None] * _mode_profile(1.5, 4 * np.pi, grid.x3)[None, None, :]
    return np.max(np.abs(phi.values - exact)), 4 * np.pi * 12.0 / (n3 - 1)


def test_mode2_product_path_is_second_order():
    errs = [_mode2_error(n) for n in (65, 129, 257)]
    assert all(kh > 0.5 for _, kh in errs)
    assert errs[0][0] < 2e-4
    for (e1, _), (e2, _) in zip(errs, errs[1:]):
        assert e1 / e2 > 3.5


def test_mode2_simpson_path_is_fourth_order():
    (e1, kh), (e2, _) = _mode2_error(513), _mode2_error(1025)
    assert kh < 0.5 and e2 < 2e-8
    assert e1 / e2 > 12


def test_zero_trace_and_zero_field():
    grid = SpatialGrid(4, 2, 33, 5.0)
    rng = np.random.default_rng(2)
    rho = DensityField(grid, rng.random(grid.shape) * np.exp(-grid.x3))
    phi = solve_dirichlet(rho, 1)
    assert np.max(np.abs(phi.values[:, :, 0])) == 0.0
    z = Field.zero(grid)
    assert z.is_zero and z.grad_sup() == 0.0


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-3, 3, **finite), b=st.floats(-3, 3, **finite), seed=st.integers(0, 10_000),
       eta=st.sampled_from([1, -1]))
def test_solver_is_linear(a, b, seed, eta):
    grid = SpatialGrid(4, 1, 33, 6.0)
    rng = np.random.default_rng(seed)
    r1 = rng.random(grid.shape) * np.exp(-grid.x3)
    r2 = rng.random(grid.shape) * np.exp(-2 * grid.x3)
    p1 = solve_dirichlet(DensityField(grid, r1), eta).values
    p2 = solve_dirichlet(DensityField(grid, r2), eta).values
    p12 = solve_dirichlet(DensityField(grid, a * r1 + b * r2), eta).values
    assert np.allclose(p12, a * p1 + b * p2, atol=1e-12 * (1 + abs(a) + abs(b)))


@settings(max_examples=20, deadline=None)
@given(B=st.floats(0.5, 4.0, **finite), A=st.floats(0.01, 10.0, **finite))
def test_gravity_like_monotone_profile(B, A):
    """For a positive density and eta = +1 the potential is nonpositive and
    ``d3 Phi`` equals minus the mass above each height."""
    L = 40.0 / B
    grid = SpatialGrid(1, 1, 401, L)
    phi = solve_dirichlet(DensityField(grid, A * np.exp(-B * grid.x3)[None, None, :]), 1)
    assert np.all(phi.values <= 1e-12)
    mass_above = A * np.exp(-B * grid.x3) / B
    assert np.max(np.abs(phi.grad[2][0, 0] + mass_above)) < 1e-6 * A / B


def test_flux_potential_of_constant_horizontal_flux_vanishes():
    from vpgrav.grids import FluxField

    grid = SpatialGrid(4, 4, 17, 2.0)
    b = np.zeros((3,) + grid.shape)
    b[0] = 1.0
    assert flux_potential(FluxField(grid, b)).sup == pytest.approx(0.0, abs=1e-14)


def test_green_constant_c2():
    rep = green_selftest(n_samples=50)
    assert rep.c2_ok and rep.c2 == pytest.approx(1 / (2 * math.pi), rel=1e-15)
    assert rep.boundary_max < 1e-12
    assert rep.converged
    assert rep.nonzero_mode_rate == pytest.approx(2 * math.pi, rel=0.01)
    assert rep.green_constant_empirical < 4.0
