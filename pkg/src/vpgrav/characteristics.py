"""Characteristics of the kinetic equation: flows, exits and sensitivities.

Trajectories solve ``X' = V``, ``V' = -grad Phi(X) - grad Psi(X) - g e3`` with
fixed-step classical Runge-Kutta.  Many phase points are advanced in lockstep;
each point gets its own step size so that all of them cover their requested
duration in the same number of steps.  Boundary crossings are refined on the
length of the last step, inside the bracket, until ``|X3| < 1e-12``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from vpgrav.model import as_phase_array, kinetic_distance, wrap_periodic

EXIT_TOL = 1e-12
GRAZING = 1e-6
DEFAULT_STEP_FRACTION = 1e-3
TRANSIT_CFL = 0.5
UNIFORM_STEP_FRACTION = 0.125


class IntegrationError(RuntimeError):
    pass


class ContractViolation(RuntimeError):
    """A trajectory failed to exit within the analytic bound on the exit time."""


class ForceField:
    """Acceleration ``-grad Phi - grad Psi - g e3``.

    ``phi`` and ``psi`` are field objects or ``None``.  A supplied ``psi`` is
    the perturbation potential frozen at one instant.
    """

    def __init__(self, g, phi=None, psi=None):
        self.g = float(g)
        self.fields = [f for f in (phi, psi) if f is not None and not f.is_zero]
        self.phi = phi
        self.psi = psi
        self.time_dependent = psi is not None

    def accel(self, x, hessian=False):
        N = x.shape[0]
        a = np.zeros((N, 3))
        a[:, 2] = -self.g
        H = np.zeros((N, 3, 3)) if hessian else None
        for f in self.fields:
            out = f.evaluate(x[:, :2], x[:, 2], order=2 if hessian else 1)
            a -= out[1]
            if hessian:
                H += out[2]
        return (a, H) if hessian else a

    def potential(self, x):
        p = np.zeros(x.shape[0])
        for f in self.fields:
            p += f.potential(x[:, :2], x[:, 2])
        return p

    @property
    def length_scale(self):
        """Shortest variation length of the fields (infinite for pure gravity).

        Vertically ``sup|d33 phi| / sup|d3 d33 phi|`` from nodal data, never
        below one grid cell; horizontally the period over the largest mode.
        """
        if "ell" not in self.__dict__:
            ell = math.inf
            for f in self.fields:
                gr = f.grid
                H33 = f.hess[2, 2]
                d = np.gradient(H33, gr.x3, axis=2)
                top = float(np.max(np.abs(H33)))
                slope = float(np.max(np.abs(d)))
                if slope > 0:
                    ell = min(ell, max(top / slope, float(np.min(np.diff(gr.x3)))))
                for n in (gr.n1, gr.n2):
                    if n > 1:
                        ell = min(ell, 2.0 / n)
            self.__dict__["ell"] = ell
        return self.__dict__["ell"]

    def gradient_sup(self):
        return sum(f.grad_sup() for f in self.fields)

    def check_bootstrap(self, x):
        """Vertical acceleration at sample points; it is at most -g/2 under the bootstrap bound."""
        return self.accel(np.asarray(x, dtype=float))[:, 2]


def _rk4(x, v, h, force, J=None):
    hh = h[:, None]
    if J is None:
        a1 = force.accel(x)
        x2 = x + 0.5 * hh * v
        v2 = v + 0.5 * hh * a1
        a2 = force.accel(x2)
        x3 = x + 0.5 * hh * v2
        v3 = v + 0.5 * hh * a2
        a3 = force.accel(x3)
        x4 = x + hh * v3
        v4 = v + hh * a3
        a4 = force.accel(x4)
        xn = x + hh / 6 * (v + 2 * v2 + 2 * v3 + v4)
        vn = v + hh / 6 * (a1 + 2 * a2 + 2 * a3 + a4)
        return xn, vn, None
    h3 = h[:, None, None]

    def rhs(xs, vs, Js):
        a, H = force.accel(xs, hessian=True)
        dJ = np.empty_like(Js)
        dJ[:, :3] = Js[:, 3:]
        dJ[:, 3:] = -np.einsum("nij,njk->nik", H, Js[:, :3])
        return vs, a, dJ

    k1x, k1v, k1J = rhs(x, v, J)
    k2x, k2v, k2J = rhs(x + 0.5 * hh * k1x, v + 0.5 * hh * k1v, J + 0.5 * h3 * k1J)
    k3x, k3v, k3J = rhs(x + 0.5 * hh * k2x, v + 0.5 * hh * k2v, J + 0.5 * h3 * k2J)
    k4x, k4v, k4J = rhs(x + hh * k3x, v + hh * k3v, J + h3 * k3J)
    xn = x + hh / 6 * (k1x + 2 * k2x + 2 * k3x + k4x)
    vn = v + hh / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
    Jn = J + h3 / 6 * (k1J + 2 * k2J + 2 * k3J + k4J)
    return xn, vn, Jn


def _refine_exit(x, v, h, f0, f1, sgn, force, max_iter=200):
    """Length ``tau`` in (0, h] of the step that lands on the floor.

    Bracketed refinement (Illinois regula falsi, falling back to bisection when
    the secant leaves the bracket) on ``tau -> X3``, until ``|X3| < 1e-12``.
    ``f0 > 0`` and ``f1 <= 0`` are the heights at the two ends of the step.
    """
    lo = np.zeros_like(h)
    hi = h.copy()
    flo = f0.copy()
    fhi = f1.copy()
    side = np.zeros(h.shape, dtype=np.int8)
    tau = h.copy()
    done = np.abs(f1) < EXIT_TOL
    for _ in range(max_iter):
        todo = np.nonzero(~done)[0]
        if todo.size == 0:
            break
        a, b, fa, fb = lo[todo], hi[todo], flo[todo], fhi[todo]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (a * fb - b * fa) / (fb - fa)
        bad = ~((t > a) & (t < b))
        t[bad] = 0.5 * (a[bad] + b[bad])
        xm, _, _ = _rk4(x[todo], v[todo], sgn * t, force)
        f = xm[:, 2]
        conv = np.abs(f) < EXIT_TOL
        tau[todo[conv]] = t[conv]
        done[todo[conv]] = True
        up = (f > 0) & ~conv
        dn = ~up & ~conv
        iu, idn = todo[up], todo[dn]
        lo[iu], flo[iu] = t[up], f[up]
        fhi[iu[side[iu] == 1]] *= 0.5
        side[iu] = 1
        hi[idn], fhi[idn] = t[dn], f[dn]
        flo[idn[side[idn] == -1]] *= 0.5
        side[idn] = -1
        stuck = (hi[todo] - lo[todo]) <= 4 * np.spacing(hi[todo])
        if np.any(stuck & ~conv):
            raise IntegrationError("step underflow while refining a boundary crossing")
    if not np.all(done):
        raise IntegrationError("boundary crossing refinement did not converge")
    return tau


@dataclass
class TraceResult:
    x: np.ndarray
    v: np.ndarray
    J: np.ndarray | None
    exit_time: np.ndarray
    exited: np.ndarray
    steps: int
    h: np.ndarray
    samples: dict | None = None


def _trace(Z, force, durations, direction, h, stop_at_boundary=True, jacobian=False, record=False,
           monitor=None):
    """Advance all points over their durations in lockstep.

    ``direction`` is -1 (backward) or +1 (forward).  ``h`` holds the largest
    allowed step per point.  ``monitor(idx, x, v, s)`` is called after every
    step on the still-active points with the elapsed time ``s``.
    """
    sgn = float(direction)
    N = Z.shape[0]
    if not record and monitor is None and N > 1:
        grouped = _trace_grouped(Z, force, durations, direction, h, stop_at_boundary, jacobian)
        if grouped is not None:
            return grouped
    x = Z[:, :3].copy()
    v = Z[:, 3:].copy()
    J = np.broadcast_to(np.eye(6), (N, 6, 6)).copy() if jacobian else None
    durations = np.asarray(durations, dtype=float) * np.ones(N)
    with np.errstate(divide="ignore", invalid="ignore"):
        counts = np.where(durations > 0, np.ceil(durations / h), 0)
    n = int(np.max(counts)) if N else 0
    step = durations / n if n else np.zeros(N)
    exit_time = np.full(N, np.nan)
    exited = np.zeros(N, dtype=bool)
    if stop_at_boundary:
        # points already leaving through the floor exit at once
        at_floor = (x[:, 2] <= 0) & (sgn * v[:, 2] <= 0)
        exit_time[at_floor] = 0.0
        exited[at_floor] = True
        x[at_floor, 2] = 0.0
    samples = None
    if record:
        samples = {"s": np.zeros((n + 1, N)), "x": np.empty((n + 1, N, 3)), "v": np.empty((n + 1, N, 3))}
        samples["x"][0] = x
        samples["v"][0] = v
    active = np.nonzero(~exited & (step > 0))[0]
    for k in range(n):
        if active.size == 0:
            if record:
                samples["s"][k + 1:] = samples["s"][k]
                samples["x"][k + 1:] = samples["x"][k]
                samples["v"][k + 1:] = samples["v"][k]
            break
        xa, va = x[active], v[active]
        ha = step[active]
        Ja = J[active] if jacobian else None
        xn, vn, Jn = _rk4(xa, va, sgn * ha, force, Ja)
        if stop_at_boundary:
            crossed = xn[:, 2] <= 0
            if np.any(crossed):
                c = np.nonzero(crossed)[0]
                tau = _refine_exit(xa[c], va[c], ha[c], xa[c, 2], xn[c, 2], sgn, force)
                xc, vc, Jc = _rk4(xa[c], va[c], sgn * tau, force, Ja[c] if jacobian else None)
                xc[:, 2] = 0.0
                xn[c], vn[c] = xc, vc
                if jacobian:
                    Jn[c] = Jc
                exit_time[active[c]] = k * ha[c] + tau
                exited[active[c]] = True
        x[active], v[active] = xn, vn
        if jacobian:
            J[active] = Jn
        if monitor is not None:
            monitor(active, xn, vn, (k + 1) * ha)
        if record:
            samples["x"][k + 1] = x
            samples["v"][k + 1] = v
            s_now = np.where(exited, exit_time, (k + 1) * step)
            samples["s"][k + 1] = np.where(np.isnan(s_now), (k + 1) * step, s_now)
        if stop_at_boundary:
            active = active[~exited[active]]
    return TraceResult(x, v, J, exit_time, exited, n, step, samples)


def _trace_grouped(Z, force, durations, direction, h, stop_at_boundary, jacobian):
    """Trace points in bins of similar step count (powers of two).

    Lockstep tracing costs the largest step count times the number of points;
    binning keeps slow and fast points apart.  Returns ``None`` when a single
    bin would result.
    """
    durations = np.asarray(durations, dtype=float) * np.ones(Z.shape[0])
    with np.errstate(divide="ignore", invalid="ignore"):
        counts = np.where(durations > 0, np.ceil(durations / h), 0)
    key = np.floor(np.log2(np.maximum(counts, 1))).astype(int)
    bins = np.unique(key)
    if bins.size == 1:
        return None
    N = Z.shape[0]
    x = np.empty((N, 3))
    v = np.empty((N, 3))
    J = np.empty((N, 6, 6)) if jacobian else None
    exit_time = np.empty(N)
    exited = np.empty(N, dtype=bool)
    step = np.empty(N)
    n = 0
    for b in bins:
        sel = np.nonzero(key == b)[0]
        r = _trace(Z[sel], force, durations[sel], direction, h[sel], stop_at_boundary, jacobian)
        x[sel], v[sel], exit_time[sel], exited[sel], step[sel] = r.x, r.v, r.exit_time, r.exited, r.h
        if jacobian:
            J[sel] = r.J
        n = max(n, r.steps)
    return TraceResult(x, v, J, exit_time, exited, n, step)


def default_step(Z, g, fraction=DEFAULT_STEP_FRACTION):
    """Step ``fraction * (2/g) sqrt(v3^2 + g x3)`` per point."""
    return fraction * (2.0 / g) * np.sqrt(Z[:, 5] ** 2 + g * np.maximum(Z[:, 2], 0.0))


def exit_time_bound(Z, g, direction=-1):
    """Upper bound ``(2/g)(sqrt(v3^2 + g x3) -+ v3)`` on the exit time."""
    v3 = Z[:, 5] * (1.0 if direction < 0 else -1.0)
    return (2.0 / g) * (np.sqrt(Z[:, 5] ** 2 + g * np.maximum(Z[:, 2], 0.0)) - v3)


@dataclass
class Trajectory:
    s: np.ndarray
    x: np.ndarray
    v: np.ndarray
    exited: np.ndarray
    exit_time: np.ndarray
    error_estimate: np.ndarray


def integrate_flow(z, force, duration, direction=-1, h_ode=None, step_fraction=DEFAULT_STEP_FRACTION,
                   stop_at_boundary=True, error_estimate=True):
    """Trajectory samples over ``duration`` in the given direction.

    Samples are stored at every step (shape ``(steps+1, N, ...)``); the step
    error is estimated by Richardson extrapolation against a run with twice the
    step.  With ``stop_at_boundary`` the trajectory freezes at its exit.
    """
    if np.any(np.asarray(duration) < 0):
        raise ValueError("duration must be nonnegative")
    Z, single = as_phase_array(z)
    h = _resolve_step(Z, force, h_ode, step_fraction)
    res = _trace(Z, force, duration, direction, h, stop_at_boundary=stop_at_boundary, record=True)
    err = np.zeros(Z.shape[0])
    if error_estimate and res.steps >= 2:
        coarse = _trace(Z, force, duration, direction, 2 * res.h * (res.h > 0) + (res.h == 0),
                        stop_at_boundary=stop_at_boundary)
        fine = np.hstack([res.x, res.v])
        err = np.max(np.abs(fine - np.hstack([coarse.x, coarse.v])), axis=1) / 15.0
    s = res.samples["s"] * (1.0 if direction > 0 else -1.0)
    tr = Trajectory(s, res.samples["x"], res.samples["v"], res.exited, res.exit_time, err)
    return tr


def _resolve_step(Z, force, h_ode, fraction, cfl=TRANSIT_CFL):
    """Per-point step: explicit ``h_ode``, else the exit-scale default capped so
    that one step moves at most ``cfl`` field cells."""
    if h_ode is None:
        if not force.fields:
            # constant acceleration: every RK4 step is exact, so resolution is moot
            fraction = max(fraction, UNIFORM_STEP_FRACTION)
        h = default_step(Z, force.g, fraction)
        ell = force.length_scale
        if cfl and math.isfinite(ell):
            speed = np.sqrt(np.sum(Z[:, 3:] ** 2, axis=1) + 3 * force.g * np.maximum(Z[:, 2], 0.0))
            with np.errstate(divide="ignore"):
                h = np.minimum(h, cfl * ell / speed)
    else:
        h = np.full(Z.shape[0], float(h_ode))
    return np.where(h > 0, h, 1.0)


@dataclass
class ExitRecord:
    t_b: np.ndarray
    x_b: np.ndarray
    v_b: np.ndarray
    t_f: np.ndarray
    error: np.ndarray
    J: np.ndarray | None = None

    def __getitem__(self, i):
        J = None if self.J is None else self.J[i]
        return ExitRecord(self.t_b[i], self.x_b[i], self.v_b[i], self.t_f[i], self.error[i], J)


def _exit(Z, force, direction, h_ode, fraction, safety, jacobian, error_estimate):
    h = _resolve_step(Z, force, h_ode, fraction)
    bound = exit_time_bound(Z, force.g, direction) * (1.0 + safety) + 1e-14
    res = _trace(Z, force, bound, direction, h, stop_at_boundary=True, jacobian=jacobian)
    if not np.all(res.exited):
        bad = np.nonzero(~res.exited)[0]
        raise ContractViolation(
            f"{bad.size} trajectories did not reach the floor within the exit-time bound "
            f"(first at phase point {Z[bad[0]].tolist()}); the field violates the gravity bound "
            "or the integrator failed")
    err = np.full(Z.shape[0], np.nan)
    if error_estimate:
        coarse = _trace(Z, force, bound, direction, 2 * h, stop_at_boundary=True)
        err = np.abs(coarse.exit_time - res.exit_time) / 15.0
    return res, err


def backward_exit(z, force, h_ode=None, step_fraction=DEFAULT_STEP_FRACTION, safety=0.25,
                  forward=False, jacobian=False, error_estimate=False):
    """Backward exit time, position and velocity on the floor.

    Points on the floor moving inward (``v3 > 0``) exit at time 0.  With
    ``forward=True`` the forward exit time is computed by the mirrored
    procedure; otherwise ``t_f`` is NaN.
    """
    Z, single = as_phase_array(z)
    res, err = _exit(Z, force, -1, h_ode, step_fraction, safety, jacobian, error_estimate)
    t_f = np.full(Z.shape[0], np.nan)
    if forward:
        fres, _ = _exit(Z, force, +1, h_ode, step_fraction, safety, False, False)
        t_f = fres.exit_time
    x_b = res.x.copy()
    x_b[:, :2] = wrap_periodic(x_b[:, :2])
    rec = ExitRecord(res.exit_time, x_b, res.v, t_f, err, res.J)
    return rec[0] if single else rec


def forward_exit(z, force, h_ode=None, step_fraction=DEFAULT_STEP_FRACTION, safety=0.25):
    """Forward exit time and the exit state."""
    Z, single = as_phase_array(z)
    res, err = _exit(Z, force, +1, h_ode, step_fraction, safety, False, False)
    x_f = res.x.copy()
    x_f[:, :2] = wrap_periodic(x_f[:, :2])
    rec = ExitRecord(np.full(Z.shape[0], np.nan), x_f, res.v, res.exit_time, err)
    return rec[0] if single else rec


@dataclass
class JacobianState:
    """Blocks of the flow derivative ``d(X, V)/d(x, v)``, each (N, 3, 3)."""

    dX_dx: np.ndarray
    dX_dv: np.ndarray
    dV_dx: np.ndarray
    dV_dv: np.ndarray

    @classmethod
    def from_matrix(cls, J):
        return cls(J[:, :3, :3], J[:, :3, 3:], J[:, 3:, :3], J[:, 3:, 3:])

    def matrix(self):
        top = np.concatenate([self.dX_dx, self.dX_dv], axis=2)
        bot = np.concatenate([self.dV_dx, self.dV_dv], axis=2)
        return np.concatenate([top, bot], axis=1)

    def determinant(self):
        return np.linalg.det(self.matrix())


def flow_with_jacobian(z, force, duration, direction=-1, h_ode=None, step_fraction=DEFAULT_STEP_FRACTION):
    """Final state and flow Jacobian after ``duration`` (no boundary stop).

    Returns ``(x, v, JacobianState)``.  The variational equations
    ``d(dX)/ds = dV``, ``d(dV)/ds = -Hess(X) dX`` are advanced by the same
    Runge-Kutta steps as the trajectory.
    """
    if np.any(np.asarray(duration) < 0):
        raise ValueError("duration must be nonnegative")
    Z, single = as_phase_array(z)
    h = _resolve_step(Z, force, h_ode, step_fraction)
    res = _trace(Z, force, duration, direction, h, stop_at_boundary=False, jacobian=True)
    js = JacobianState.from_matrix(res.J)
    if single:
        return res.x[0], res.v[0], JacobianState.from_matrix(res.J[:1])
    return res.x, res.v, js


@dataclass
class ExitDerivatives:
    """Derivatives of the backward exit data with respect to ``(x, v)``.

    ``dt_b`` has shape (N, 6); ``dx_b`` and ``dv_b`` have shape (N, 3, 6).
    ``grazing`` flags points whose exit is nearly tangent; their entries come
    from one-sided finite differences.
    """

    record: ExitRecord
    dt_b: np.ndarray
    dx_b: np.ndarray
    dv_b: np.ndarray
    grazing: np.ndarray


class GrazingSingularity(RuntimeError):
    pass


def exit_derivatives(z, force, h_ode=None, step_fraction=DEFAULT_STEP_FRACTION, grazing=GRAZING,
                     fallback=True, h_fd=1e-7):
    """Exit-time and exit-state derivatives from the variational flow.

    With ``fallback=False`` a grazing exit raises ``GrazingSingularity``;
    otherwise the affected points use one-sided finite differences.
    """
    Z, single = as_phase_array(z)
    rec = backward_exit(Z, force, h_ode=h_ode, step_fraction=step_fraction, jacobian=True)
    vb3 = rec.v_b[:, 2]
    graz = np.abs(vb3) < grazing
    if np.any(graz) and not fallback:
        raise GrazingSingularity(f"{int(np.count_nonzero(graz))} exits are grazing (|v_b3| < {grazing})")
    J = rec.J
    dX, dV = J[:, :3, :], J[:, 3:, :]
    safe = np.where(graz, 1.0, vb3)
    dtb = dX[:, 2, :] / safe[:, None]
    dxb = dX - rec.v_b[:, :, None] * dtb[:, None, :]
    a_b = force.accel(rec.x_b)
    dvb = dV - a_b[:, :, None] * dtb[:, None, :]
    if np.any(graz):
        idx = np.nonzero(graz)[0]
        fd_t, fd_x, fd_v = _one_sided_exit_fd(Z[idx], force, h_ode, step_fraction, h_fd)
        dtb[idx], dxb[idx], dvb[idx] = fd_t, fd_x, fd_v
    if single:
        return ExitDerivatives(rec, dtb[0], dxb[0], dvb[0], graz[0])
    return ExitDerivatives(rec, dtb, dxb, dvb, graz)


def _one_sided_exit_fd(Z, force, h_ode, fraction, h_fd):
    n = Z.shape[0]
    base = backward_exit(Z, force, h_ode=h_ode, step_fraction=fraction)
    dt = np.zeros((n, 6))
    dx = np.zeros((n, 3, 6))
    dv = np.zeros((n, 3, 6))
    for j in range(6):
        Zp = Z.copy()
        Zp[:, j] += h_fd
        p = backward_exit(Zp, force, h_ode=h_ode, step_fraction=fraction)
        dt[:, j] = (p.t_b - base.t_b) / h_fd
        d = p.x_b - base.x_b
        d[:, :2] -= np.round(d[:, :2])
        dx[:, :, j] = d / h_fd
        dv[:, :, j] = (p.v_b - base.v_b) / h_fd
    return dt, dx, dv


@dataclass
class VelocityLemmaReport:
    worst_upper: float
    worst_lower: float
    endpoint_worst: float
    samples: int
    skipped: int

    @property
    def passed(self):
        return self.worst_upper >= 0 and self.worst_lower >= 0 and self.endpoint_worst >= 0


def velocity_lemma_check(z, phi, params, h_ode=None, step_fraction=DEFAULT_STEP_FRACTION, rtol=1e-9):
    """Two-sided exponential envelope of the kinetic distance along backward flows.

    Margins are relative, ``(upper - alpha)/upper`` and ``(alpha - lower)/upper``,
    minimised over trajectory samples; ``endpoint_worst`` is the margin of the
    lower bound for the exit speed ``|v_b3|``.  ``rtol`` absorbs rounding.
    """
    Z, _ = as_phase_array(z)
    g = params.g
    force = ForceField(g, phi)
    keep = ~((Z[:, 2] == 0) & (Z[:, 5] >= 0))
    skipped = int(np.count_nonzero(~keep))
    Z = Z[keep]
    if Z.shape[0] == 0:
        return VelocityLemmaReport(0.0, 0.0, 0.0, 0, skipped)
    rec = backward_exit(Z, force, h_ode=h_ode, step_fraction=step_fraction)
    tr = integrate_flow(Z, force, rec.t_b, -1, h_ode=h_ode, step_fraction=step_fraction,
                        stop_at_boundary=False, error_estimate=False)
    d33 = phi.d33_sup() if phi is not None else 0.0
    mix = phi.boundary_mixed_sup() if phi is not None else 0.0
    alpha0 = kinetic_distance(Z, phi, params)
    S, N = tr.s.shape
    X = tr.x.reshape(-1, 3)
    V = tr.v.reshape(-1, 3)
    X3 = np.maximum(X[:, 2], 0.0)
    pts = np.hstack([X[:, :2], X3[:, None], V])
    alpha = kinetic_distance(pts, phi, params).reshape(S, N)
    speed_par = np.hypot(tr.v[..., 0], tr.v[..., 1])
    ds = np.abs(np.diff(tr.s, axis=0))
    integ = np.vstack([np.zeros((1, N)), np.cumsum(0.5 * ds * (speed_par[1:] + speed_par[:-1]), axis=0)])
    expo = (1 + d33) * np.abs(tr.s) + mix / g * integ
    upper = alpha0[None, :] * np.exp(expo)
    lower = alpha0[None, :] * np.exp(-expo)
    scale = np.maximum(upper, 1e-300)
    mu = float(np.min((upper - alpha) / scale + rtol))
    ml = float(np.min((alpha - lower) / scale + rtol))
    vb3 = np.abs(rec.v_b[:, 2])
    end = float(np.min((vb3 - lower[-1]) / np.maximum(upper[-1], 1e-300) + rtol))
    return VelocityLemmaReport(mu, ml, end, int(N * S), skipped)


def flow_map(z, force, duration, n_steps, direction=-1, stop_at_boundary=True):
    """End state after ``duration`` with exactly ``n_steps`` equal RK4 steps.

    Returns ``(x, v, exited, exit_time)``; exited trajectories stop on the floor.
    Used by the time-marching solver, where the duration is one time step.
    """
    Z, _ = as_phase_array(z)
    d = np.asarray(duration, dtype=float) * np.ones(Z.shape[0])
    h = np.where(d > 0, d / max(int(n_steps), 1), 1.0)
    # the tiny enlargement keeps the step count at n_steps despite rounding
    res = _trace(Z, force, d, direction, h * (1 + 1e-12), stop_at_boundary=stop_at_boundary)
    return res.x, res.v, res.exited, res.exit_time
