from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vpgrav.grids import (
    DensityField,
    Distribution,
    SpatialGrid,
    VelocityGrid,
    composite_weights,
    interp_x3_v3,
    interpolate,
    moment_density,
    moment_flux,
)
from vpgrav.model import BoundaryDatum, Params, check_conditions, evaluate_weight, kinetic_distance

finite = dict(allow_nan=False, allow_infinity=False)


@pytest.mark.parametrize("kw, msg", [
    (dict(g=0.0), "physics.g must be positive"),
    (dict(eta=0), "physics.eta must be +1 or -1"),
    (dict(beta=-1.0), "physics.beta must be positive"),
])
def test_params_validation(kw, msg):
    base = dict(g=4.0, eta=1, beta=3.0, beta_tilde=1.5)
    base.update(kw)
    with pytest.raises(ValueError, match=msg.replace("+", r"\+")):
        Params(**base)


def test_weight_on_floor_and_above():
    p = Params(2.0, 1, 0.5, 0.25)
    z = np.array([[0.1, 0.2, 0.0, 1.0, -1.0, 0.5], [0.0, 0.0, 0.3, 0.0, 0.0, 0.0]])
    w = evaluate_weight("steady", z, None, p)
    assert w[0] == pytest.approx(math.exp(0.5 * 2.25), rel=1e-15)
    assert w[1] == pytest.approx(math.exp(0.5 * 2 * 2.0 * 0.3), rel=1e-15)
    with pytest.raises(ValueError):
        evaluate_weight("steady", [0, 0, -0.1, 0, 0, 0], None, p)
    with pytest.raises(ValueError):
        evaluate_weight("other", z, None, p)


@settings(max_examples=60, deadline=None)
@given(x3=st.floats(0, 5, **finite), v=st.lists(st.floats(-4, 4, **finite), min_size=3, max_size=3),
       g=st.floats(0.1, 10, **finite))
def test_weight_positive_and_kinetic_distance_gravity_only(x3, v, g):
    p = Params(g, 1, 1.0, 0.5)
    z = np.array([0.0, 0.0, x3, *v])
    assert evaluate_weight("steady", z, None, p) > 0
    a = kinetic_distance(z, None, p)
    assert a == pytest.approx(math.sqrt(v[2] ** 2 + x3**2 + 2 * g * x3), rel=1e-14, abs=1e-300)


@settings(max_examples=60, deadline=None)
@given(x1=st.floats(-0.5, 0.5, **finite), v=st.lists(st.floats(-2, 2, **finite), min_size=3, max_size=3),
       mod=st.floats(-1, 1, **finite), b=st.floats(0.2, 5, **finite))
def test_maxwellian_gradient_matches_differences(x1, v, mod, b):
    G = BoundaryDatum("maxwellian", 0.7, b, mod)
    xp = np.array([x1, 0.1])
    vv = np.array(v)
    gx, gv = G.gradient(xp, vv)
    e = 1e-6
    num_x = (G(xp + [e, 0], vv) - G(xp - [e, 0], vv)) / (2 * e)
    assert gx[0] == pytest.approx(num_x, abs=1e-7)
    for k in range(3):
        d = np.zeros(3)
        d[k] = e
        assert gv[k] == pytest.approx((G(xp, vv + d) - G(xp, vv - d)) / (2 * e), abs=1e-7)


def test_boundary_norms():
    G = BoundaryDatum("maxwellian", 0.03, 6.0, 0.5)
    assert G.weighted_norm(3.0) == pytest.approx(0.045)
    assert G.weighted_norm(7.0) == math.inf
    assert BoundaryDatum("maxwellian", 0.0).is_zero
    with pytest.raises(ValueError):
        BoundaryDatum("maxwellian", 1.0, 1.0, 1.5)


def test_conditions_report_unchecked_for_missing_norms():
    rep = check_conditions(Params(4.0, 1, 3.0, 1.5), {})
    assert all(e.status == "unchecked" for e in rep)
    rep = check_conditions(Params(4.0, 1, 3.0, 1.5), {"G_w": 0.03})
    need = (8 * math.pi**1.5 * 4.0 * 0.03) ** 0.4 * 4.0**-0.8
    assert rep["condition:beta"].lhs == pytest.approx(need)
    assert rep["condition:beta"].status == "pass"


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 12), c=st.lists(st.floats(-3, 3, **finite), min_size=4, max_size=4))
def test_composite_rule_exact_for_cubics(n, c):
    x = np.linspace(0.0, 1.3, n + 1)
    w = composite_weights(n, 1.3 / n)
    f = c[0] + c[1] * x + (c[2] * x**2 + c[3] * x**3 if n >= 2 else 0)
    exact = c[0] * 1.3 + c[1] * 1.3**2 / 2 + (c[2] * 1.3**3 / 3 + c[3] * 1.3**4 / 4 if n >= 2 else 0)
    assert float(w @ f) == pytest.approx(exact, abs=1e-12)


def test_gaussian_density_profile():
    beta, g = 2.0, 1.5
    grid = SpatialGrid(1, 1, 9, 1.0)
    vg = VelocityGrid(41, 41, 41, VelocityGrid.vmax_for_tail(beta, 1e-14))
    h = np.exp(-beta * (vg.speed2()[None, None, None] + 2 * g * grid.x3[None, None, :, None, None, None]))
    rho = moment_density(Distribution(grid, vg, h, beta=beta))
    exact = (math.pi / beta) ** 1.5 * np.exp(-2 * beta * g * grid.x3)
    assert np.max(np.abs(rho.values[0, 0] - exact)) < 1e-10
    flux = moment_flux(Distribution(grid, vg, h, beta=beta))
    assert np.max(np.abs(flux.values)) < 1e-12


def test_refined_grid_quadrature():
    grid = SpatialGrid(1, 1, 65, 3.0, refinement=2.0)
    assert grid.x3[0] == 0.0 and grid.x3[-1] == 3.0 and np.all(np.diff(np.diff(grid.x3)) > 0)
    assert float(grid.x3_weights @ np.exp(-grid.x3)) == pytest.approx(1 - math.exp(-3.0), rel=1e-8)


@settings(max_examples=40, deadline=None)
@given(a=st.floats(-2, 2, **finite), b=st.floats(-2, 2, **finite), c=st.floats(-2, 2, **finite),
       seed=st.integers(0, 1000))
def test_interpolation_reproduces_bilinear_functions(a, b, c, seed):
    grid, vg = SpatialGrid(1, 1, 17, 2.0), VelocityGrid(2, 3, 11, 1.5)
    rng = np.random.default_rng(seed)
    x3 = rng.uniform(0, 2.0, 50)
    v3 = rng.uniform(-1.5, 1.5, 50)
    f = lambda z, w: a + b * z + c * z * w  # noqa: E731
    X, V = np.meshgrid(grid.x3, vg.v3_axis, indexing="ij")
    table = np.repeat(f(X, V)[:, None, :], 6, axis=1)
    out = interp_x3_v3(table, grid, vg, x3, v3)
    assert np.allclose(out, f(x3, v3)[:, None], atol=1e-12)


def test_interpolate_flags_points_outside():
    grid = SpatialGrid(2, 1, 5, 1.0)
    dens = DensityField(grid, np.ones(grid.shape))
    val, flag = interpolate(dens, [[0.1, 0.0], [0.1, 0.0]], [0.5, 1.5])
    assert val[0] == pytest.approx(1.0) and val[1] == 0.0 and list(flag) == [False, True]
