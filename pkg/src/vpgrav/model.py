"""Physical parameters, phase points, weights and the smallness conditions.

Phase points are handled in two forms.  ``PhasePoint`` is the validated single
point value type; the numerical kernels work on stacked arrays of shape
``(N, 6)`` holding ``(x1, x2, x3, v1, v2, v3)`` per row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def wrap_periodic(x):
    """Map horizontal coordinates into the fundamental cell [-1/2, 1/2)."""
    x = np.asarray(x, dtype=float)
    return x - np.floor(x + 0.5)


@dataclass(frozen=True)
class Params:
    """Physical constants of a run.

    Parameters
    ----------
    g : float
        Gravitational acceleration, pointing towards the floor ``x3 = 0``.
    eta : int
        Sign of the interaction; the potential solves ``Delta Phi = eta rho``.
    beta : float
        Exponent of the Gaussian energy weight used by every norm.
    beta_tilde : float
        Exponent of the weight used by the derivative estimates.
    green_constant : float
        Constant of the elliptic decay estimate for the half-space Green function.
    """

    g: float
    eta: int
    beta: float
    beta_tilde: float
    green_constant: float = 4.0

    def __post_init__(self):
        if not self.g > 0:
            raise ValueError("physics.g must be positive")
        if self.eta not in (1, -1):
            raise ValueError("physics.eta must be +1 or -1")
        if not self.beta > 0:
            raise ValueError("physics.beta must be positive")
        if not self.beta_tilde > 0:
            raise ValueError("physics.beta_tilde must be positive")
        if not self.green_constant > 0:
            raise ValueError("physics.green_constant must be positive")


@dataclass(frozen=True)
class PhasePoint:
    x_par: tuple
    x3: float
    v: tuple

    def __post_init__(self):
        if self.x3 < 0:
            raise ValueError(f"phase point below the floor: x3={self.x3}")
        xp = wrap_periodic(np.asarray(self.x_par, dtype=float).reshape(2))
        object.__setattr__(self, "x_par", (float(xp[0]), float(xp[1])))
        object.__setattr__(self, "x3", float(self.x3))
        object.__setattr__(self, "v", tuple(float(c) for c in np.asarray(self.v, dtype=float).reshape(3)))

    def as_array(self):
        return np.array([*self.x_par, self.x3, *self.v])

    @classmethod
    def from_array(cls, z):
        z = np.asarray(z, dtype=float)
        return cls((z[0], z[1]), z[2], (z[3], z[4], z[5]))


def as_phase_array(z):
    """Return ``(Z, single)`` with ``Z`` of shape (N, 6)."""
    if isinstance(z, PhasePoint):
        return z.as_array()[None, :], True
    arr = np.asarray(z, dtype=float)
    if arr.ndim == 1:
        if arr.shape[0] != 6:
            raise ValueError("a phase point has six coordinates")
        return arr[None, :].copy(), True
    if arr.ndim != 2 or arr.shape[1] != 6:
        raise ValueError(f"expected an (N, 6) array of phase points, got shape {arr.shape}")
    return arr, False


class BoundaryDatum:
    """Inflow datum ``G(x_par, v)`` on the incoming half of the floor.

    Two kinds are supported.  ``maxwellian`` is

        G = amplitude * (1 + modulation * cos(2 pi x1)) * exp(-beta_G |v|^2),

    and ``tabulated`` holds samples on a periodic horizontal grid times a
    velocity grid, evaluated by multilinear interpolation.  Values for
    ``v3 <= 0`` are never used by the solvers.
    """

    def __init__(self, kind, amplitude=1.0, beta_G=1.0, modulation=0.0, table=None, vgrid=None):
        if kind not in ("maxwellian", "tabulated"):
            raise ValueError(f"unknown boundary kind {kind!r}")
        self.kind = kind
        self.amplitude = float(amplitude)
        self.beta_G = float(beta_G)
        self.modulation = float(modulation)
        self._norm_cache = {}
        if kind == "maxwellian":
            if self.amplitude < 0:
                raise ValueError("boundary amplitude must be nonnegative")
            if not self.beta_G > 0:
                raise ValueError("boundary decay must be positive")
            if abs(self.modulation) > 1:
                raise ValueError("boundary modulation must lie in [-1, 1] to keep G >= 0")
        else:
            table = np.asarray(table, dtype=float)
            if table.ndim != 5:
                raise ValueError("tabulated boundary data must have shape (n1, n2, m1, m2, m3)")
            if not np.all(np.isfinite(table)) or np.any(table < 0):
                raise ValueError("tabulated boundary data must be finite and nonnegative")
            if vgrid is None or table.shape[2:] != vgrid.shape:
                raise ValueError("tabulated boundary data needs a matching velocity grid")
            self.table = table
            self.vgrid = vgrid

    @property
    def is_zero(self):
        if self.kind == "maxwellian":
            return self.amplitude == 0.0
        return not np.any(self.table)

    @property
    def horizontally_uniform(self):
        if self.kind == "maxwellian":
            return self.modulation == 0.0
        return np.all(self.table == self.table[:1, :1])

    def __call__(self, x_par, v):
        x_par = np.asarray(x_par, dtype=float)
        v = np.asarray(v, dtype=float)
        if self.kind == "maxwellian":
            v2 = np.sum(v * v, axis=-1)
            mod = 1.0 + self.modulation * np.cos(2 * np.pi * x_par[..., 0])
            return self.amplitude * mod * np.exp(-self.beta_G * v2)
        return self._table_eval(x_par, v)[0]

    def gradient(self, x_par, v):
        """Return ``(grad_x_par G, grad_v G)`` with shapes (..., 2) and (..., 3)."""
        x_par = np.asarray(x_par, dtype=float)
        v = np.asarray(v, dtype=float)
        if self.kind == "maxwellian":
            v2 = np.sum(v * v, axis=-1)
            e = self.amplitude * np.exp(-self.beta_G * v2)
            c = np.cos(2 * np.pi * x_par[..., 0])
            s = np.sin(2 * np.pi * x_par[..., 0])
            gx = np.zeros(x_par.shape)
            gx[..., 0] = -2 * np.pi * self.modulation * s * e
            gv = (-2 * self.beta_G * (1.0 + self.modulation * c) * e)[..., None] * v
            return gx, gv
        return self._table_eval(x_par, v)[1:]

    def _table_eval(self, x_par, v):
        from vpgrav.grids import multilinear_periodic

        n1, n2 = self.table.shape[:2]
        return multilinear_periodic(self.table, (n1, n2), self.vgrid, x_par, v)

    def weighted_norm(self, beta):
        """``sup e^{beta |v|^2} G`` over the incoming boundary."""
        key = ("w", beta)
        if key not in self._norm_cache:
            if self.kind == "maxwellian":
                if self.amplitude == 0:
                    val = 0.0
                elif beta > self.beta_G:
                    val = math.inf
                else:
                    val = self.amplitude * (1 + abs(self.modulation))
            else:
                v2 = self.vgrid.speed2()
                mask = self.vgrid.v3_axis[None, None, :] > 0
                w = np.where(mask, np.exp(beta * v2), 0.0)
                val = float(np.max(self.table * w))
            self._norm_cache[key] = val
        return self._norm_cache[key]

    def weighted_grad_norm(self, beta_tilde):
        """``sup e^{beta_tilde |v|^2} |grad_(x_par, v) G|`` over the incoming boundary."""
        key = ("dw", beta_tilde)
        if key not in self._norm_cache:
            if self.kind == "maxwellian":
                val = self._maxwellian_grad_norm(beta_tilde)
            else:
                vg = self.vgrid
                v = np.stack(np.meshgrid(vg.v1_axis, vg.v2_axis, vg.v3_axis, indexing="ij"), axis=-1)
                v = v[vg.v3_axis[None, None, :].repeat(vg.m1, 0).repeat(vg.m2, 1) > 0]
                n1, n2 = self.table.shape[:2]
                best = 0.0
                for i in range(n1):
                    for j in range(n2):
                        xp = np.broadcast_to(np.array([-0.5 + i / n1, -0.5 + j / n2]), (len(v), 2))
                        gx, gv = self.gradient(xp, v)
                        mag = np.sqrt(np.sum(gx**2, -1) + np.sum(gv**2, -1))
                        best = max(best, float(np.max(mag * np.exp(beta_tilde * np.sum(v * v, -1)))))
                val = best
            self._norm_cache[key] = val
        return self._norm_cache[key]

    def _maxwellian_grad_norm(self, bt):
        if self.amplitude == 0:
            return 0.0
        if bt >= self.beta_G:
            return math.inf
        c = self.beta_G - bt
        # the supremum over |v| and x1 of a smooth profile, located numerically on a fine mesh
        r = np.linspace(0.0, math.sqrt(40.0 / c), 4001)
        th = np.linspace(-0.5, 0.5, 401)
        R, T = np.meshgrid(r, th, indexing="ij")
        e = self.amplitude * np.exp(-c * R**2)
        gx = 2 * np.pi * self.modulation * np.sin(2 * np.pi * T) * e
        gv = 2 * self.beta_G * (1 + self.modulation * np.cos(2 * np.pi * T)) * R * e
        return float(np.max(np.hypot(gx, gv)))


def _field_value(Phi, x_par, x3):
    if Phi is None:
        return np.zeros_like(x3)
    return Phi.potential(x_par, x3)


def evaluate_weight(kind, z, Phi, params, Psi=None):
    """Gaussian energy weight ``exp(beta(|v|^2 + 2 Phi [+ 2 Psi] + 2 g x3))``.

    ``Phi`` and ``Psi`` are field objects (``None`` means identically zero).
    On the floor the potentials vanish and the weight is ``exp(beta |v|^2)``.
    """
    if kind not in ("steady", "dynamic"):
        raise ValueError(f"unknown weight kind {kind!r}")
    if kind == "steady" and Psi is not None:
        raise ValueError("the steady weight takes no perturbation potential")
    Z, single = as_phase_array(z)
    x3 = Z[:, 2]
    if np.any(x3 < 0):
        raise ValueError("weight evaluated below the floor (x3 < 0)")
    v2 = np.sum(Z[:, 3:] ** 2, axis=1)
    pot = _field_value(Phi, Z[:, :2], x3)
    if kind == "dynamic":
        pot = pot + _field_value(Psi, Z[:, :2], x3)
    pot = np.where(x3 == 0, 0.0, pot)
    out = np.exp(params.beta * (v2 + 2 * pot + 2 * params.g * x3))
    return float(out[0]) if single else out


def kinetic_distance(z, Phi, params):
    """Boundary-adapted distance ``sqrt(v3^2 + x3^2 + 2 d3Phi(x_par, 0) x3 + 2 g x3)``."""
    Z, single = as_phase_array(z)
    x3 = Z[:, 2]
    if np.any(x3 < 0):
        raise ValueError("kinetic distance evaluated below the floor (x3 < 0)")
    if Phi is None:
        d3 = np.zeros_like(x3)
    else:
        d3 = Phi.gradient(Z[:, :2], np.zeros_like(x3))[:, 2]
    rad = Z[:, 5] ** 2 + x3**2 + 2 * d3 * x3 + 2 * params.g * x3
    if np.any(rad < 0):
        raise ValueError("kinetic distance undefined: the field gradient exceeds the gravity bound")
    out = np.sqrt(rad)
    return float(out[0]) if single else out


@dataclass
class ConditionEntry:
    name: str
    lhs: float
    rhs: float
    margin: float
    status: str  # "pass", "fail" or "unchecked"
    soft: bool = False

    @property
    def passed(self):
        return self.status == "pass"


@dataclass
class ConditionReport:
    entries: dict = field(default_factory=dict)

    def add(self, name, lhs, rhs, soft=False):
        if lhs is None or rhs is None or math.isnan(lhs) or math.isnan(rhs):
            self.entries[name] = ConditionEntry(name, math.nan, math.nan, math.nan, "unchecked", soft)
            return
        margin = rhs - lhs
        status = "pass" if margin >= 0 else "fail"
        self.entries[name] = ConditionEntry(name, float(lhs), float(rhs), float(margin), status, soft)

    def unchecked(self, name, soft=False):
        self.entries[name] = ConditionEntry(name, math.nan, math.nan, math.nan, "unchecked", soft)

    def __getitem__(self, name):
        return self.entries[name]

    def __iter__(self):
        return iter(self.entries.values())

    def all_hard_pass(self):
        return all(e.status == "pass" for e in self.entries.values() if not e.soft)


def check_conditions(params, norms, eps_unique=1.0, ml_factor=1.0):
    """Evaluate every smallness and compatibility condition with its margin.

    ``norms`` maps names to precomputed sup-norms; missing entries make the
    dependent conditions "unchecked".  Recognised keys:

    ``G_w``        sup e^{beta|v|^2} G on the inflow boundary
    ``G_grad_w``   sup e^{beta_tilde|v|^2} |grad_(x_par,v) G|
    ``grad_phi``   sup |grad Phi|
    ``grad_psi``   sup over time of sup |grad Psi|
    ``f_half``     sup over time of sup e^{beta/2(|v|^2+g x3)} |f|
    ``wh``         sup w_beta h
    ``wF0``        sup of the initial dynamic weight times F0 = h + f0
    ``F0_grad_w``  sup of the initial beta_tilde dynamic weight times |grad F0|
    ``w_dvh_bar``  sup w_{beta_bar} |grad_v h|, with ``beta_bar`` also given
    """
    g, beta, bt = params.g, params.beta, params.beta_tilde
    rep = ConditionReport()
    get = norms.get

    Gw = get("G_w")
    if Gw is None:
        rep.unchecked("condition:beta")
    else:
        need = (8 * math.pi**1.5 * params.green_constant) ** 0.4 * Gw**0.4 * g**-0.8
        rep.add("condition:beta", need, beta)

    Gd, dphi = get("G_grad_w"), get("grad_phi")
    if Gw is None or Gd is None or dphi is None:
        rep.unchecked("condition:G", soft=True)
    else:
        inner = (1 + dphi / g + 1 / (g * g * bt)) / (g * bt * bt) + (1 + math.sqrt(bt) * dphi) / bt**1.5
        lhs = Gw * math.log(math.e + inner * Gd)
        rep.add("condition:G", lhs, g * g * bt * beta**1.5 / 16, soft=True)

    dpsi = get("grad_psi")
    if dphi is None or dpsi is None:
        rep.unchecked("Bootstrap")
    else:
        rep.add("Bootstrap", dphi + dpsi, g / 2)

    fh = get("f_half")
    if fh is None:
        rep.unchecked("Bootstrap_f")
    else:
        rhs = math.sqrt(math.log(2)) * math.sqrt(g) * beta**1.5 / (64 * math.pi * (1 + 1 / (beta * g)))
        rep.add("Bootstrap_f", fh, rhs)

    wh, wF0 = get("wh"), get("wF0")
    M = None
    if wh is not None and wF0 is not None and Gw is not None:
        M = max(wh, wF0 + Gw)
    if M is None:
        rep.unchecked("choice:g")
        rep.unchecked("choice_ML:M", soft=True)
    else:
        rep.add("choice:g", M, math.sqrt(math.log(2)) / (2**8.5 * math.pi) * g**1.5 * beta**2.5)
        rep.add("choice_ML:M", M, ml_factor * min(g * math.sqrt(bt) * beta**1.5, g * beta**2.5), soft=True)

    LF0 = get("F0_grad_w")
    if LF0 is None or Gd is None:
        rep.unchecked("choice_ML:L", soft=True)
    else:
        rep.add("choice_ML:L", max(LF0, Gd), ml_factor * min(bt**1.5, g * g * bt**2.5), soft=True)

    wdvh, bbar = get("w_dvh_bar"), get("beta_bar")
    if wdvh is None or bbar is None:
        rep.unchecked("condition_unique")
    else:
        rep.add("condition_unique", wdvh, eps_unique * g * g * bbar**3)
    return rep
