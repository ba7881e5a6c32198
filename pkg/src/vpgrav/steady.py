"""Steady states by Picard iteration on the Lagrangian form of the kinetic equation.

Each iterate re-traces every phase node backwards under the previous field and
reads the inflow datum at the exit point; the density and potential follow by
quadrature and the half-space Poisson solve.

When the grid has a single horizontal node and the inflow datum is uniform in
``x_par`` the problem is horizontally homogeneous.  The horizontal velocity is
then conserved and the vertical motion does not depend on it, so only the
``(x3, v3)`` plane needs tracing ("reduced" path).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from vpgrav.characteristics import ForceField, backward_exit, exit_derivatives
from vpgrav.grids import DensityField, Distribution, interp_x3_v3, moment_density
from vpgrav.model import check_conditions
from vpgrav.poisson import Field, solve_dirichlet

CHUNK = 20000
STEADY_STEP_FRACTION = 1e-2
BOUND_RTOL = 1e-3


def _reduced(grid, G):
    return grid.n1 == 1 and grid.n2 == 1 and G.horizontally_uniform


def _plane_points(grid, vgrid):
    X3, V3 = np.meshgrid(grid.x3, vgrid.v3_axis, indexing="ij")
    Z = np.zeros((X3.size, 6))
    Z[:, 2] = X3.ravel()
    Z[:, 5] = V3.ravel()
    return Z


def _all_points(grid, vgrid):
    X1, X2, X3 = np.meshgrid(grid.x1, grid.x2, grid.x3, indexing="ij")
    V = vgrid.nodes()
    nx, nv = X1.size, V.shape[0] * V.shape[1] * V.shape[2]
    Z = np.empty((nx, nv, 6))
    Z[:, :, 0] = X1.reshape(-1, 1)
    Z[:, :, 1] = X2.reshape(-1, 1)
    Z[:, :, 2] = X3.reshape(-1, 1)
    Z[:, :, 3:] = V.reshape(1, nv, 3)
    return Z.reshape(-1, 6)


def _h_from_vb3(G, vgrid, vb3):
    """h on the reduced grid from the exit vertical speed table (n3, m3)."""
    n3, m3 = vb3.shape
    out = np.empty((n3, vgrid.m1, vgrid.m2, m3))
    zero = np.zeros((n3, vgrid.m2, m3, 2))
    for a, v1 in enumerate(vgrid.v1_axis):
        v = np.empty((n3, vgrid.m2, m3, 3))
        v[..., 0] = v1
        v[..., 1] = vgrid.v2_axis[None, :, None]
        v[..., 2] = vb3[:, None, :]
        out[:, a] = G(zero, v)
    return out


def evaluate_h_backtrace(z, Phi, G, params, step_fraction=STEADY_STEP_FRACTION, h_ode=None):
    """``h(z) = G(x_b(z), v_b(z))`` along backward characteristics of ``Phi``."""
    force = ForceField(params.g, Phi)
    Zs = np.atleast_2d(np.asarray(z, dtype=float))
    if G.is_zero:
        out = np.zeros(Zs.shape[0])
    else:
        out = np.empty(Zs.shape[0])
        for s in range(0, Zs.shape[0], CHUNK):
            rec = backward_exit(Zs[s:s + CHUNK], force, h_ode=h_ode, step_fraction=step_fraction)
            out[s:s + CHUNK] = G(rec.x_b[:, :2], rec.v_b)
    return float(out[0]) if np.ndim(z) == 1 else out


@dataclass
class SteadyIterate:
    index: int
    h: Distribution
    rho: DensityField
    phi: Field
    margins: dict
    diff: float
    flagged: bool = False
    exits: dict | None = None


def _weighted_diff(h_new, h_old, grid, vgrid, beta, g):
    w = np.exp(0.5 * beta * (vgrid.speed2()[None, None, None] + g * grid.x3[None, None, :, None, None, None]))
    return float(np.max(np.abs(h_new - h_old) * w))


def _weight_table(grid, vgrid, phi, params):
    pot = np.zeros(grid.shape) if phi is None else phi.values
    e = params.beta * (2 * pot + 2 * params.g * grid.x3[None, None, :])
    return e[..., None, None, None], params.beta * vgrid.speed2()[None, None, None]


def uniform_bound_margins(h, rho, phi_prev, phi_new, G, params):
    """Relative margins ``(rhs - lhs)/rhs`` of the four uniform iterate bounds.

    ``h`` was traced under ``phi_prev`` (its weight is built from that field),
    ``rho`` is its density and ``phi_new`` the potential solved from ``rho``.
    """
    grid, vgrid = h.grid, h.vgrid
    beta, g = params.beta, params.g
    Gsup = G.weighted_norm(0.0)
    Gw = G.weighted_norm(beta)
    ex, ev = _weight_table(grid, vgrid, phi_prev, params)
    wh = float(np.max(np.exp(ex + ev) * h.values)) if Gw > 0 else 0.0
    out = {}

    def rel(lhs, rhs):
        if rhs == 0:
            return 0.0 if lhs == 0 else -math.inf
        if math.isinf(rhs):
            return 1.0
        return (rhs - lhs) / rhs

    out["Uest:h"] = rel(float(np.max(h.values)), Gsup)
    out["Uest:wh"] = rel(wh, Gw)
    erho = float(np.max(np.exp(beta * g * grid.x3)[None, None, :] * rho.values))
    out["Uest:rho"] = rel(erho, (math.pi / beta) ** 1.5 * Gw)
    out["Uest:DPhi"] = rel(phi_new.grad_sup(), g / 2)
    return out


def picard_iterate(prev, G, params, grid, vgrid, step_fraction=STEADY_STEP_FRACTION, h_ode=None):
    """One Picard step: trace under ``prev.phi``, integrate, solve for the potential."""
    phi = prev.phi
    force = ForceField(params.g, phi)
    exits = None
    if G.is_zero:
        vals = np.zeros(grid.shape + vgrid.shape)
    elif _reduced(grid, G):
        Z = _plane_points(grid, vgrid)
        rec = backward_exit(Z, force, h_ode=h_ode, step_fraction=step_fraction)
        vb3 = rec.v_b[:, 2].reshape(grid.n3, vgrid.m3)
        exits = {"vb3": vb3, "tb": rec.t_b.reshape(grid.n3, vgrid.m3)}
        vals = _h_from_vb3(G, vgrid, vb3).reshape(grid.shape + vgrid.shape)
    else:
        Z = _all_points(grid, vgrid)
        flat = evaluate_h_backtrace(Z, phi, G, params, step_fraction, h_ode)
        vals = flat.reshape(grid.shape + vgrid.shape)
    vals = np.maximum(vals, 0.0)
    h = Distribution(grid, vgrid, vals, "steady", beta=params.beta)
    rho = moment_density(h)
    new_phi = solve_dirichlet(rho, params.eta)
    margins = uniform_bound_margins(h, rho, phi, new_phi, G, params)
    diff = math.inf if prev.h is None else _weighted_diff(vals, prev.h.values, grid, vgrid, params.beta, params.g)
    flagged = any(m < -BOUND_RTOL for m in margins.values())
    return SteadyIterate(prev.index + 1, h, rho, new_phi, margins, diff, flagged, exits)


def initial_iterate(grid, params, phi0=None):
    phi = Field.zero(grid, params.eta) if phi0 is None else phi0
    return SteadyIterate(0, None, None, phi, {}, math.inf)


def first_iterate_potential(G, grid, params):
    """Potential of the first iterate for a uniform Maxwellian inflow.

    Under pure gravity ``h^1 = A e^{-b(|v|^2 + 2 g x3)}`` so
    ``rho^1 = A (pi/b)^{3/2} e^{-2 b g x3}`` and the potential solves the mode-0
    problem in closed form:
    ``Phi^1 = eta A (pi/b)^{3/2} (2 b g)^{-2} (e^{-2 b g x3} - 1)``.
    Returns ``(x3 -> Phi^1, rho^1 on the grid)``.
    """
    if G.kind != "maxwellian" or not G.horizontally_uniform:
        raise ValueError("closed form needs a horizontally uniform Maxwellian inflow")
    A, b, g = G.amplitude, G.beta_G, params.g
    c = A * (math.pi / b) ** 1.5
    k = 2 * b * g

    def phi1(x3):
        return params.eta * c / k**2 * (np.exp(-k * np.asarray(x3)) - 1.0)

    rho = c * np.exp(-k * grid.x3)
    return phi1, DensityField(grid, np.broadcast_to(rho, grid.shape).copy())


@dataclass
class SteadySolution:
    params: object
    G: object
    grid: object
    vgrid: object
    h: Distribution
    rho: DensityField
    phi: Field
    history: list = field(default_factory=list)
    converged: bool = False
    status: str = ""
    reduced: bool = False
    exits: dict | None = None
    ratio: float = math.nan
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def grad_phi(self):
        return self.phi.grad

    @property
    def hess_phi(self):
        return self.phi.hess

    def weighted_h_norm(self):
        ex, ev = _weight_table(self.grid, self.vgrid, self.phi, self.params)
        return float(np.max(np.exp(ex + ev) * self.h.values))

    def vertical_tables(self):
        """Exit data of the final field on the (x3, v3) plane (reduced path).

        Keys ``vb3``, ``tb``, ``dvb3_dx3``, ``dvb3_dv3``, ``dtb_dx3``, ``dtb_dv3``,
        all of shape (n3, m3), plus ``grazing``.
        """
        if not self.reduced:
            raise ValueError("vertical tables exist only for horizontally homogeneous solutions")
        if "vt" not in self._cache:
            Z = _plane_points(self.grid, self.vgrid)
            force = ForceField(self.params.g, self.phi)
            ed = exit_derivatives(Z, force, step_fraction=STEADY_STEP_FRACTION)
            shp = (self.grid.n3, self.vgrid.m3)
            self._cache["vt"] = {
                "vb3": ed.record.v_b[:, 2].reshape(shp),
                "tb": ed.record.t_b.reshape(shp),
                "dvb3_dx3": ed.dv_b[:, 2, 2].reshape(shp),
                "dvb3_dv3": ed.dv_b[:, 2, 5].reshape(shp),
                "dtb_dx3": ed.dt_b[:, 2].reshape(shp),
                "dtb_dv3": ed.dt_b[:, 5].reshape(shp),
                "grazing": ed.grazing.reshape(shp),
            }
        return self._cache["vt"]

    def grad_v_h_table(self):
        """``grad_v h`` at every phase node, shape grid.shape + vgrid.shape + (3,)."""
        if "gvh" not in self._cache:
            if self.reduced:
                self._cache["gvh"] = self._reduced_grad_table()[1]
            else:
                Z = _all_points(self.grid, self.vgrid)
                _, gv, _ = grad_h(self, Z)
                self._cache["gvh"] = gv.reshape(self.grid.shape + self.vgrid.shape + (3,))
        return self._cache["gvh"]

    def _reduced_grad_table(self):
        """(d_x3 h, grad_v h) on the reduced grid from the exit tables."""
        vt = self.vertical_tables()
        G, vg, n3 = self.G, self.vgrid, self.grid.n3
        gvh = np.empty((n3, vg.m1, vg.m2, vg.m3, 3))
        dx3 = np.empty((n3, vg.m1, vg.m2, vg.m3))
        zero = np.zeros((n3, vg.m2, vg.m3, 2))
        for a, v1 in enumerate(vg.v1_axis):
            v = np.empty((n3, vg.m2, vg.m3, 3))
            v[..., 0] = v1
            v[..., 1] = vg.v2_axis[None, :, None]
            v[..., 2] = vt["vb3"][:, None, :]
            _, gv = G.gradient(zero, v)
            gvh[:, a, ..., 0] = gv[..., 0]
            gvh[:, a, ..., 1] = gv[..., 1]
            gvh[:, a, ..., 2] = gv[..., 2] * vt["dvb3_dv3"][:, None, :]
            dx3[:, a] = gv[..., 2] * vt["dvb3_dx3"][:, None, :]
        shp = self.grid.shape + vg.shape
        return dx3.reshape(shp), gvh.reshape(shp + (3,))

    def dv3_h_at(self, x3, v3, v_par):
        """``d h/d v3`` off the grid for the reduced problem, shape (Q, P).

        ``x3`` and ``v3`` (length Q) locate the points in the traced plane,
        ``v_par`` (P, 2) lists the conserved horizontal velocities.  The exit
        tables are interpolated bilinearly; the datum gradient is exact.
        """
        vt = self.vertical_tables()
        tab = np.stack([vt["vb3"], vt["dvb3_dv3"]], axis=1)
        q = interp_x3_v3(tab, self.grid, self.vgrid, x3, v3)
        vb3, dv = q[:, 0], q[:, 1]
        G = self.G
        if G.kind == "maxwellian":
            # the Maxwellian factorises into horizontal and vertical parts
            b = G.beta_G
            vert = -2 * b * G.amplitude * vb3 * np.exp(-b * vb3 * vb3) * dv
            out = vert[:, None] * np.exp(-b * np.sum(v_par**2, axis=1))[None, :]
        else:
            Q, P = len(x3), len(v_par)
            vb = np.empty((Q, P, 3))
            vb[..., :2] = v_par[None]
            vb[..., 2] = vb3[:, None]
            _, gv = G.gradient(np.zeros((Q, P, 2)), vb)
            out = gv[..., 2] * dv[:, None]
        outside = (np.abs(v3) > self.vgrid.vmax) | (x3 > self.grid.L3)
        out[outside] = 0.0
        return out

    def weighted_grad_v_norm(self, beta=None):
        """``sup w_beta |grad_v h|`` over the phase grid."""
        b = self.params.beta if beta is None else beta
        key = ("wdvh", b)
        if key not in self._cache:
            gv = self.grad_v_h_table()
            pot = self.phi.values
            e = b * (2 * pot + 2 * self.params.g * self.grid.x3[None, None, :])
            w = np.exp(e[..., None, None, None] + b * self.vgrid.speed2()[None, None, None])
            self._cache[key] = float(np.max(w * np.sqrt(np.sum(gv**2, axis=-1))))
        return self._cache[key]

    def norms(self):
        G, p = self.G, self.params
        return {
            "G_w": G.weighted_norm(p.beta),
            "G_grad_w": G.weighted_grad_norm(p.beta_tilde),
            "grad_phi": self.phi.grad_sup(),
            "wh": self.weighted_h_norm(),
        }


def solve_steady(G, params, grid, vgrid, tol_fix=1e-10, max_iter=50, phi0=None,
                 step_fraction=STEADY_STEP_FRACTION, h_ode=None, min_iter=1):
    """Picard iteration to a fixed point in the half-weight sup metric.

    Stops when ``sup e^{beta/2(|v|^2 + g x3)} |h^{l+1} - h^l| < tol_fix`` or after
    ``max_iter`` iterates.  ``phi0`` seeds the first trace (default zero field).
    """
    rep = check_conditions(params, {"G_w": G.weighted_norm(params.beta)})
    if rep["condition:beta"].status == "fail":
        warnings.warn("condition:beta fails; the iteration is not covered by the uniform bounds",
                      RuntimeWarning, stacklevel=2)
    it = initial_iterate(grid, params, phi0)
    history = []
    converged = False
    for _ in range(max_iter):
        it = picard_iterate(it, G, params, grid, vgrid, step_fraction, h_ode)
        history.append(it)
        if it.index >= min_iter and it.diff < tol_fix:
            converged = True
            break
        if G.is_zero and it.index >= 1:
            converged = True
            break
    diffs = [h.diff for h in history if math.isfinite(h.diff) and h.diff > 0]
    ratio = math.nan
    if len(diffs) >= 2:
        ratio = max(b / a for a, b in zip(diffs[:-1], diffs[1:]))
    status = "converged" if converged else f"not converged after {max_iter} iterations"
    return SteadySolution(params, G, grid, vgrid, it.h, it.rho, it.phi, history, converged, status,
                          _reduced(grid, G), it.exits, ratio)


def successive_ratios(sol):
    d = [h.diff for h in sol.history if math.isfinite(h.diff)]
    return [b / a if a > 0 else 0.0 for a, b in zip(d[:-1], d[1:])]


def grad_h(sol, z, fallback=True):
    """``(grad_x h, grad_v h, grazing)`` at phase points via exit derivatives.

    ``grad h = (d x_b)^T grad_x_par G + (d v_b)^T grad_v G``.
    """
    Z = np.atleast_2d(np.asarray(z, dtype=float))
    force = ForceField(sol.params.g, sol.phi)
    gx_out = np.zeros((Z.shape[0], 3))
    gv_out = np.zeros((Z.shape[0], 3))
    graz = np.zeros(Z.shape[0], dtype=bool)
    if sol.G.is_zero:
        return gx_out, gv_out, graz
    for s in range(0, Z.shape[0], CHUNK):
        ed = exit_derivatives(Z[s:s + CHUNK], force, step_fraction=STEADY_STEP_FRACTION, fallback=fallback)
        gx, gv = sol.G.gradient(ed.record.x_b[:, :2], ed.record.v_b)
        full = np.einsum("nij,ni->nj", ed.dx_b[:, :2, :], gx) + np.einsum("nij,ni->nj", ed.dv_b, gv)
        gx_out[s:s + CHUNK] = full[:, :3]
        gv_out[s:s + CHUNK] = full[:, 3:]
        graz[s:s + CHUNK] = ed.grazing
    return gx_out, gv_out, graz


@dataclass
class RegularityReport:
    log_fit: tuple
    log_r2: float
    log_samples: int
    dx3h_constant: float
    far_rho_grad_sup: float
    horizontal_rho_grad_sup: float
    grazing_samples: int


def regularity_diagnostics(sol, near=1.0):
    """Fitted constants of the boundary-layer regularity shape.

    ``log_fit`` is ``(C1, C2)`` in ``|d3 rho| ~ C1 + C2 |ln(x3^2 + g x3)|`` over
    nodes with ``0 < x3 <= near``; ``dx3h_constant`` is the smallest ``C`` with
    ``e^{bt/2(|v|^2 + g x3)} |d3 h| <= C (1 + 1/alpha)`` at the phase nodes.
    """
    p, grid = sol.params, sol.grid
    x3 = grid.x3
    rho = sol.rho.values
    d3 = np.gradient(rho, x3, axis=2)
    sel = (x3 > 0) & (x3 <= near)
    y = np.abs(d3[:, :, sel]).ravel()
    L = np.abs(np.log(x3[sel] ** 2 + p.g * x3[sel]))
    X = np.column_stack([np.ones(L.size), L])
    X = np.tile(X, (grid.n1 * grid.n2, 1))
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    res = y - X @ coef
    ss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(res**2)) / ss if ss > 0 else 1.0
    far = x3 >= 1.0
    bt = p.beta_tilde
    far_sup = float(np.max(np.abs(d3[:, :, far]) * np.exp(bt * p.g * x3[far] / 2))) if np.any(far) else 0.0
    if grid.n1 * grid.n2 > 1:
        dh = np.gradient(rho, grid.x1, axis=0) if grid.n1 > 1 else 0 * rho
        horiz = float(np.max(np.abs(dh)))
    else:
        horiz = 0.0
    C = math.nan
    graz = 0
    if sol.reduced and not sol.G.is_zero:
        dx3h, _ = sol._reduced_grad_table()
        vt = sol.vertical_tables()
        graz = int(np.count_nonzero(vt["grazing"]))
        vg = sol.vgrid
        d3phi0 = float(sol.phi.boundary_trace.ravel()[0])
        V3 = vg.v3_axis[None, :]
        X3 = x3[:, None]
        alpha = np.sqrt(np.maximum(V3**2 + X3**2 + 2 * d3phi0 * X3 + 2 * p.g * X3, 0.0))
        w = np.exp(0.5 * bt * (vg.speed2()[None] + p.g * x3[:, None, None, None]))
        ratio = np.abs(dx3h[0, 0]) * w / (1.0 + 1.0 / np.maximum(alpha, 1e-300))[:, None, None, :]
        ok = ~vt["grazing"][:, None, None, :] & np.ones(ratio.shape, dtype=bool)
        C = float(np.max(ratio[ok])) if np.any(ok) else math.nan
    return RegularityReport((float(coef[0]), float(coef[1])), r2, int(y.size), C, far_sup, horiz, graz)


@dataclass
class UniquenessReport:
    distance: float
    tolerance: float
    passed: bool
    condition_margin: float
    solutions: tuple


def uniqueness_probe(G, params, grid, vgrid, tol_fix=1e-10, max_iter=60, threshold=1e-6, eps_unique=1.0,
                     beta_bar=None):
    """Solve from two different seeds and compare the fixed points.

    Seeds: the zero field, and the first-iterate closed form (a uniform
    Maxwellian inflow) or else half of the first computed iterate's field.
    """
    a = solve_steady(G, params, grid, vgrid, tol_fix=tol_fix, max_iter=max_iter)
    if G.kind == "maxwellian" and G.horizontally_uniform:
        _, rho1 = first_iterate_potential(G, grid, params)
        seed = solve_dirichlet(rho1, params.eta)
    else:
        first = picard_iterate(initial_iterate(grid, params), G, params, grid, vgrid)
        seed = Field(grid, params.eta, 0.5 * first.phi.rho_hat, 0.5 * first.phi.phi_hat,
                     0.5 * first.phi.dphi_hat)
    b = solve_steady(G, params, grid, vgrid, tol_fix=tol_fix, max_iter=max_iter, phi0=seed)
    dist = _weighted_diff(a.h.values, b.h.values, grid, vgrid, params.beta, params.g)
    bb = params.beta if beta_bar is None else beta_bar
    margin = math.nan
    if not G.is_zero:
        try:
            norms = {"w_dvh_bar": max(a.weighted_grad_v_norm(bb), b.weighted_grad_v_norm(bb)), "beta_bar": bb}
            margin = check_conditions(params, norms, eps_unique=eps_unique)["condition_unique"].margin
        except ValueError:
            margin = math.nan
    else:
        margin = eps_unique * params.g**2 * bb**3
    return UniquenessReport(dist, threshold, dist <= threshold, margin, (a, b))
