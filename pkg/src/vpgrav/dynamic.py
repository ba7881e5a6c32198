"""Perturbations of a steady state: semi-Lagrangian Duhamel stepping and decay.

The perturbation ``f`` solves the kinetic equation with force
``-grad(Phi + Psi + g x3)`` and source ``grad Psi . grad_v h``, zero inflow on
the floor and ``Delta Psi = eta varrho``.  One time step traces every phase
node back over ``dt`` under the field frozen at the start of the step:

    f(t + dt, z) = f(t, Z(t)) + int grad Psi . grad_v h (Z(s)) ds,

where the first term is dropped and the integral shortened when the
trajectory leaves through the floor inside the step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from vpgrav.characteristics import ForceField, flow_map
from vpgrav.grids import Distribution, interp_x3_v3, interpolate, moment_density, moment_flux
from vpgrav.model import check_conditions
from vpgrav.poisson import Field, flux_potential, solve_dirichlet

TINY = 1e-300


def lambda_infinity(params, norm_wdvh):
    """Decay rate ``(g^2 beta/2^6) ln(2 + g beta^2 / (2^(17/2 + 2/g) pi^(3/2) N))``.

    ``N = sup w_beta |grad_v h|``; for ``N = 0`` the rate is unbounded and
    ``math.inf`` is returned.
    """
    if norm_wdvh < 0 or math.isnan(norm_wdvh):
        raise ValueError("the weighted derivative norm must be nonnegative")
    g, beta = params.g, params.beta
    if norm_wdvh == 0:
        return math.inf
    arg = 2.0 + g * beta**2 / (2 ** (8.5 + 2.0 / g) * math.pi**1.5 * norm_wdvh)
    return g * g * beta / 64.0 * math.log(arg)


def decay_constant(params, lam):
    """``(16 pi^(3/2) / beta^(3/2)) e^(16 lam^2 / (beta g^2))``."""
    b, g = params.beta, params.g
    return 16 * math.pi**1.5 / b**1.5 * math.exp(16 * lam * lam / (b * g * g))


def decay_f_constant(params, lam, norm_wdvh):
    b, g = params.beta, params.g
    inner = 1 + 4 ** (3 + 1 / g) * math.pi**1.5 / (g * b * b) * math.exp(64 * lam * lam / (g * g * b)) * norm_wdvh
    return 2 * math.exp(16 * lam * lam / (b * g * g)) * inner


def flux_bound_constant(params):
    """``8 pi (1 + 1/(beta g)) / beta^2``."""
    b, g = params.beta, params.g
    return 8 * math.pi * (1 + 1 / (b * g)) / b**2


class InitialPerturbation:
    """``f0 = eps (1 + delta cos(2 pi x1)) exp(-beta_f (|v|^2 + 2 g x3))`` or zero."""

    def __init__(self, kind="gaussian", amplitude=0.0, beta_f=1.0, modulation=0.0, g=1.0):
        if kind not in ("gaussian", "zero"):
            raise ValueError(f"unknown initial perturbation kind {kind!r}")
        if kind == "gaussian" and not beta_f > 0:
            raise ValueError("dynamic.f0_beta must be positive")
        self.kind = kind
        self.amplitude = 0.0 if kind == "zero" else float(amplitude)
        self.beta_f = float(beta_f)
        self.modulation = float(modulation)
        self.g = float(g)

    @property
    def horizontally_uniform(self):
        return self.modulation == 0.0 or self.amplitude == 0.0

    def table(self, grid, vgrid):
        """Values on the phase grid, shape grid.shape + vgrid.shape."""
        if self.amplitude == 0.0:
            return np.zeros(grid.shape + vgrid.shape)
        mod = 1 + self.modulation * np.cos(2 * np.pi * grid.x1)
        ex = np.exp(-2 * self.beta_f * self.g * grid.x3)
        ev = np.exp(-self.beta_f * vgrid.speed2())
        sp = self.amplitude * mod[:, None, None] * np.ones(grid.n2)[None, :, None] * ex[None, None, :]
        return sp[..., None, None, None] * ev[None, None, None]


@dataclass
class DynamicState:
    t: float
    f: Distribution
    varrho: object
    psi: Field
    b: object
    div_b_potential: object
    bootstrap: bool
    bootstrap_f: bool
    norm_f_half: float
    norm_rho: float
    norm_f_eighth: float = math.nan
    grad_psi: float = 0.0
    d_sup: float = 0.0


def _reduced_ok(steady, f_table):
    grid = steady.grid
    return steady.reduced and grid.n1 == 1 and grid.n2 == 1


def _weights(grid, vgrid, beta, g, frac):
    """``exp(frac beta (|v|^2 + g x3))`` on the phase grid."""
    return np.exp(frac * beta * (vgrid.speed2()[None, None, None] + g * grid.x3[None, None, :, None, None, None]))


def make_state(t, values, steady, params, half_w=None, eighth_w=None):
    grid, vgrid = steady.grid, steady.vgrid
    f = Distribution(grid, vgrid, values, "perturbation", beta=params.beta / 2)
    varrho = moment_density(f)
    psi = solve_dirichlet(varrho, params.eta)
    b = moment_flux(f)
    dpot = flux_potential(b)
    if half_w is None:
        half_w = _weights(grid, vgrid, params.beta, params.g, 0.5)
    if eighth_w is None:
        eighth_w = _weights(grid, vgrid, params.beta, params.g, 0.125)
    a = np.abs(values)
    nf = float(np.max(a * half_w))
    n8 = float(np.max(a * eighth_w))
    gpsi = psi.grad_sup()
    rep = check_conditions(params, {"grad_phi": steady.phi.grad_sup(), "grad_psi": gpsi, "f_half": nf})
    return DynamicState(t, f, varrho, psi, b, dpot, rep["Bootstrap"].passed, rep["Bootstrap_f"].passed, nf,
                        float(np.max(np.abs(varrho.values))), n8, gpsi, dpot.sup)


def _psi_d3(psi, x3):
    return psi.evaluate(np.zeros((len(x3), 2)), x3, order=1)[1][:, 2]


def _step_reduced(state, steady, params, dt, substeps, psi_end=None):
    grid, vgrid = steady.grid, steady.vgrid
    n3, m1, m2, m3 = grid.n3, vgrid.m1, vgrid.m2, vgrid.m3
    X3, V3 = np.meshgrid(grid.x3, vgrid.v3_axis, indexing="ij")
    Z = np.zeros((n3 * m3, 6))
    Z[:, 2] = X3.ravel()
    Z[:, 5] = V3.ravel()
    force = ForceField(params.g, steady.phi, None if state.psi.is_zero else state.psi)
    x, v, exited, te = flow_map(Z, force, dt, substeps)
    P = m1 * m2
    ftab = state.f.values.reshape(n3, P, m3)
    live = ~exited
    I = np.zeros((n3 * m3, P))
    if np.any(live):
        I[live] = interp_x3_v3(ftab, grid, vgrid, x[live, 2], v[live, 2])
    N = np.zeros((n3 * m3, P))
    if not state.psi.is_zero and not steady.G.is_zero:
        span = np.where(exited, te, dt)
        vpar = np.stack(np.meshgrid(vgrid.v1_axis, vgrid.v2_axis, indexing="ij"), -1).reshape(P, 2)
        # integrand at the node (end of the step)
        d3_end = _psi_d3(state.psi if psi_end is None else psi_end, Z[:, 2])
        gv = steady.grad_v_h_table()[0, 0].reshape(n3, P, m3, 3)
        dvh_end = np.moveaxis(gv[..., 2], 1, 2).reshape(n3 * m3, P)
        # integrand at the foot (start of the step or exit point)
        d3_foot = _psi_d3(state.psi, np.maximum(x[:, 2], 0.0))
        dvh_foot = steady.dv3_h_at(np.maximum(x[:, 2], 0.0), v[:, 2], vpar)
        N = 0.5 * span[:, None] * (d3_end[:, None] * dvh_end + d3_foot[:, None] * dvh_foot)
    new = (I + N).reshape(n3, m3, m1, m2)
    new = np.moveaxis(new, 1, 3).reshape(grid.shape + vgrid.shape)
    # zero inflow on the incoming half of the floor
    new[:, :, 0][..., vgrid.v3_axis > 0] = 0.0
    return new


def _step_general(state, steady, params, dt, substeps, psi_end=None):
    grid, vgrid = steady.grid, steady.vgrid
    from vpgrav.steady import _all_points

    Z = _all_points(grid, vgrid)
    force = ForceField(params.g, steady.phi, None if state.psi.is_zero else state.psi)
    x, v, exited, te = flow_map(Z, force, dt, substeps)
    out = np.zeros(Z.shape[0])
    live = ~exited
    if np.any(live):
        out[live], _ = interpolate(state.f, x[live, :2], x[live, 2], v[live])
    if not state.psi.is_zero and not steady.G.is_zero:
        span = np.where(exited, te, dt)
        gv = steady.grad_v_h_table().reshape(-1, 3)
        pe = state.psi if psi_end is None else psi_end
        a_end = np.sum(pe.gradient(Z[:, :2], Z[:, 2]) * gv, axis=1)
        xf = np.maximum(x[:, 2], 0.0)
        gfoot = np.empty((Z.shape[0], 3))
        table = steady.grad_v_h_table()
        for c in range(3):
            comp = Distribution(grid, vgrid, table[..., c], "total")
            gfoot[:, c], _ = interpolate(comp, x[:, :2], xf, v)
        a_foot = np.sum(state.psi.gradient(x[:, :2], xf) * gfoot, axis=1)
        out += 0.5 * span * (a_end + a_foot)
    new = out.reshape(grid.shape + vgrid.shape)
    new[:, :, 0][..., vgrid.v3_axis > 0] = 0.0
    return new


def duhamel_step(state, steady, params, dt, substeps=4, predictor_corrector=False, weights=None):
    """Advance the perturbation by one step of length ``dt``.

    ``substeps`` Runge-Kutta steps trace each node over the step.  With
    ``predictor_corrector`` the source at the end of the step uses the
    potential of a first predicted update.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    stepper = _step_reduced if _reduced_ok(steady, state.f.values) else _step_general
    hw, ew = weights if weights is not None else (None, None)
    new = stepper(state, steady, params, dt, substeps)
    if predictor_corrector:
        pred = make_state(state.t + dt, new, steady, params, hw, ew)
        new = stepper(state, steady, params, dt, substeps, psi_end=pred.psi)
    # flush subnormal residue; it carries no information and slows arithmetic
    new[np.abs(new) < TINY] = 0.0
    return make_state(state.t + dt, new, steady, params, hw, ew)


def default_dt(grid, vgrid, g, fraction=0.1):
    """``fraction (2/g)`` times the median of ``sqrt(v3^2 + g x3)`` over phase nodes."""
    X3, V3 = np.meshgrid(grid.x3, vgrid.v3_axis, indexing="ij")
    return fraction * (2.0 / g) * float(np.median(np.sqrt(V3**2 + g * X3)))


def initial_weight_norm(values, steady, params, psi0):
    """``sup w_beta(0) |f0|`` with ``w_beta(0) = exp(beta(|v|^2 + 2 Phi + 2 Psi(0) + 2 g x3))``."""
    grid, vgrid = steady.grid, steady.vgrid
    pot = steady.phi.values + psi0.values
    e = params.beta * (2 * pot + 2 * params.g * grid.x3[None, None, :])
    w = np.exp(e[..., None, None, None] + params.beta * vgrid.speed2()[None, None, None])
    return float(np.max(w * np.abs(values)))


@dataclass
class DecayReport:
    lambda_fit: float
    lambda_inf: float
    t: np.ndarray
    norm_rho: np.ndarray
    norm_f_half: np.ndarray
    decay_lhs: np.ndarray
    decay_rhs: float
    decay_f_lhs: np.ndarray
    decay_f_rhs: float
    flux_lhs: np.ndarray
    flux_rhs: np.ndarray
    bootstrap: np.ndarray
    eb_value: float
    wf0: float
    norm_wdvh: float
    extinct: bool = False
    fit_samples: int = 0

    @property
    def bootstrap_held(self):
        return bool(np.all(self.bootstrap))

    @property
    def certifying(self):
        return self.bootstrap_held

    @property
    def decay_ok(self):
        return bool(np.all(self.decay_lhs <= self.decay_rhs))

    @property
    def decay_f_ok(self):
        return bool(np.all(self.decay_f_lhs <= self.decay_f_rhs))

    @property
    def flux_ok(self):
        return bool(np.all(self.flux_lhs <= self.flux_rhs))

    @property
    def eb_ok(self):
        return self.eb_value <= 2.0

    def csv_rows(self):
        for i in range(len(self.t)):
            yield (self.t[i], self.norm_rho[i], self.norm_f_half[i], self.decay_lhs[i], self.decay_rhs,
                   int(self.bootstrap[i]))


def fit_decay_rate(t, y, window=(0.5, 1.0), min_samples=10):
    """Least-squares slope of ``-log y`` over the window fraction of ``[0, T]``.

    Returns ``(rate, samples, extinct)``.  When the series hits exactly zero
    (everything left the truncated box or fell below the flush level) the
    horizon ``T`` is moved back to the last positive sample and ``extinct``
    is set.  With too few positive samples left the rate is ``inf``.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    zero = np.flatnonzero(y <= 0)
    extinct = zero.size > 0
    if extinct:
        t, y = t[:zero[0]], y[:zero[0]]
        if t.size == 0:
            return math.inf, 0, True
    T = t[-1]
    sel = (t >= window[0] * T) & (t <= window[1] * T)
    tw, yw = t[sel], y[sel]
    if tw.size < min_samples:
        return (math.inf if extinct else math.nan), int(tw.size), extinct
    slope = np.polyfit(tw, -np.log(yw), 1)[0]
    return float(slope), int(tw.size), extinct


@dataclass
class EvolveResult:
    states: list
    report: DecayReport
    psi_history: list = field(default_factory=list)
    dt: float = 0.0


def evolve(f0, steady, params, dt=None, T=None, substeps=4, stride=None, predictor_corrector=False,
           keep_psi=True, progress=None):
    """March the perturbation from ``f0`` to time ``T``.

    ``f0`` is an InitialPerturbation or an array on the phase grid.  ``T``
    defaults to ``20/lambda_inf``.  Full states are kept every ``stride``
    steps (first and last only when ``stride`` is None); every step enters the
    decay report.
    """
    grid, vgrid = steady.grid, steady.vgrid
    values = f0.table(grid, vgrid) if isinstance(f0, InitialPerturbation) else np.asarray(f0, dtype=float)
    wdvh = steady.weighted_grad_v_norm() if not steady.G.is_zero else 0.0
    lam = lambda_infinity(params, wdvh)
    if T is None:
        if not math.isfinite(lam):
            raise ValueError("T must be given when lambda_inf is unbounded")
        T = 20.0 / lam
    if dt is None:
        dt = default_dt(grid, vgrid, params.g)
    n = max(1, int(math.ceil(T / dt - 1e-9)))
    dt = T / n
    hw = _weights(grid, vgrid, params.beta, params.g, 0.5)
    ew = _weights(grid, vgrid, params.beta, params.g, 0.125)
    st = make_state(0.0, values, steady, params, hw, ew)
    wf0 = initial_weight_norm(values, steady, params, st.psi)
    states = [st]
    psis = [st.psi] if keep_psi else []
    ts, nr, nf, n8, boot, dsup = [0.0], [st.norm_rho], [st.norm_f_half], [st.norm_f_eighth], \
        [st.bootstrap and st.bootstrap_f], [st.d_sup]
    for k in range(1, n + 1):
        st = duhamel_step(st, steady, params, dt, substeps, predictor_corrector, (hw, ew))
        st.t = k * dt
        ts.append(st.t)
        nr.append(st.norm_rho)
        nf.append(st.norm_f_half)
        n8.append(st.norm_f_eighth)
        boot.append(st.bootstrap and st.bootstrap_f)
        dsup.append(st.d_sup)
        if keep_psi:
            psis.append(st.psi)
        if k == n or (stride and k % stride == 0):
            states.append(st)
        if progress is not None:
            progress(k, n, st)
    t = np.array(ts)
    nr, nf, n8 = np.array(nr), np.array(nf), np.array(n8)
    lam_eff = lam if math.isfinite(lam) else 0.0
    growth = np.exp(lam_eff * t)
    rhs = decay_constant(params, lam_eff) * wf0
    frhs = decay_f_constant(params, lam_eff, wdvh) * wf0
    flux_rhs = flux_bound_constant(params) * np.maximum.accumulate(nf)
    dmax = float(np.max(dsup))
    eb = math.exp(64 * params.beta / params.g * dmax**2)
    rate, ns, extinct = fit_decay_rate(t, nr)
    rep = DecayReport(rate, lam, t, nr, nf, growth * nr, rhs, growth * n8, frhs, np.array(dsup), flux_rhs,
                      np.array(boot), eb, wf0, wdvh, extinct, ns)
    return EvolveResult(states, rep, psis, dt)


@dataclass
class WeightRatioReport:
    ratio_margin: float
    inverse_margin: float
    steady_inverse_margin: float
    samples: int
    d_sup: float

    @property
    def passed(self):
        return min(self.ratio_margin, self.inverse_margin, self.steady_inverse_margin) >= 0


def weight_ratio_check(result, steady, params, points, substeps=4, rtol=1e-9):
    """Weight bounds along dynamic characteristics traced back from ``T``.

    For each sample ``(x, v)`` at the final time the trajectory is traced back
    step by step through the stored potentials until it exits or reaches
    ``t = 0``.  Margins are in log form, ``log(bound) - log(value)``:

    * ``ratio_margin``: ``w(s')/w(s) <= exp((8 beta/g) D sqrt(v3^2 + g x3))``
    * ``inverse_margin``: ``1/w(s) <= exp(64 beta D^2/g - beta/2 (|v|^2 + g x3))``
    * ``steady_inverse_margin``: ``1/w_beta <= exp(16^2 beta D^2/(2 g^2) - beta/4 (|v|^2 + g x3))``

    with ``w(s)`` the dynamic weight at time ``s`` and ``D`` the sup of the flux
    potential over the run.
    """
    if not result.psi_history:
        raise ValueError("the run kept no potential history")
    b, g = params.beta, params.g
    D = float(np.max(result.report.flux_lhs))
    Z = np.atleast_2d(np.asarray(points, dtype=float)).copy()
    n = len(result.psi_history) - 1
    dt = result.dt
    x, v = Z[:, :3].copy(), Z[:, 3:].copy()
    alive = np.ones(Z.shape[0], dtype=bool)
    logw = []

    def dyn_logw(k, xx, vv):
        psi = result.psi_history[k]
        pot = steady.phi.potential(xx[:, :2], xx[:, 2]) + psi.potential(xx[:, :2], xx[:, 2])
        pot = np.where(xx[:, 2] <= 0, 0.0, pot)
        return b * (np.sum(vv * vv, 1) + 2 * pot + 2 * g * xx[:, 2])

    def steady_logw(xx, vv):
        pot = np.where(xx[:, 2] <= 0, 0.0, steady.phi.potential(xx[:, :2], xx[:, 2]))
        return b * (np.sum(vv * vv, 1) + 2 * pot + 2 * g * xx[:, 2])

    lw_list = [dyn_logw(n, x, v)]
    sw_list = [steady_logw(x, v)]
    mask_list = [alive.copy()]
    for k in range(n - 1, -1, -1):
        idx = np.nonzero(alive)[0]
        if idx.size == 0:
            break
        psi = result.psi_history[k]
        force = ForceField(g, steady.phi, None if psi.is_zero else psi)
        Zi = np.hstack([x[idx], v[idx]])
        xn, vn, ex, _ = flow_map(Zi, force, dt, substeps)
        x[idx], v[idx] = xn, vn
        lw = np.full(Z.shape[0], np.nan)
        lw[idx] = dyn_logw(k, xn, vn)
        sw = np.full(Z.shape[0], np.nan)
        sw[idx] = steady_logw(xn, vn)
        lw_list.append(lw)
        sw_list.append(sw)
        alive[idx[ex]] = False
        mask_list.append(~np.isnan(lw))
    LW = np.array(lw_list)
    SW = np.array(sw_list)
    e0 = np.sum(Z[:, 3:] ** 2, 1) + g * Z[:, 2]
    spread = np.nanmax(LW, axis=0) - np.nanmin(LW, axis=0)
    ratio_bound = 8 * b / g * D * np.sqrt(Z[:, 5] ** 2 + g * Z[:, 2])
    ratio_margin = float(np.min(ratio_bound - spread + rtol * (1 + np.abs(ratio_bound))))
    inv = -np.nanmin(LW, axis=0)
    inv_bound = 64 * b / g * D * D - 0.5 * b * e0
    inverse_margin = float(np.min(inv_bound - inv + rtol * (1 + np.abs(inv_bound))))
    sinv = -np.nanmin(SW, axis=0)
    s_bound = 16**2 * b / (2 * g * g) * D * D - 0.25 * b * e0
    steady_margin = float(np.min(s_bound - sinv + rtol * (1 + np.abs(s_bound))))
    return WeightRatioReport(ratio_margin, inverse_margin, steady_margin, int(np.sum(~np.isnan(LW))), D)
