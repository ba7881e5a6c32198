"""Truncated phase-space grids, velocity moments and multilinear interpolation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

ROLES = ("steady", "perturbation", "total")


def composite_weights(n_int, step):
    """Weights of a composite rule on ``n_int`` equal intervals.

    Simpson's rule when ``n_int`` is even.  For an odd count the last three
    intervals use the 3/8 rule so the order stays four; a single interval falls
    back to the trapezoid.
    """
    w = np.zeros(n_int + 1)
    if n_int == 0:
        return w
    if n_int == 1:
        w[:] = 0.5 * step
        return w
    n_simp = n_int if n_int % 2 == 0 else n_int - 3
    if n_simp > 0:
        w[0:n_simp + 1:2] += 2.0
        w[1:n_simp:2] += 4.0
        w[0] -= 1.0
        w[n_simp] -= 1.0
        w[: n_simp + 1] *= step / 3.0
    if n_simp != n_int:
        w[n_simp:n_simp + 4] += np.array([1.0, 3.0, 3.0, 1.0]) * (3.0 * step / 8.0)
    return w


@dataclass(frozen=True)
class SpatialGrid:
    """Nodes of ``T^2 x [0, L3]``.

    Horizontal nodes sit at ``-1/2 + j/n``.  Vertically ``n3`` nodes include
    both ends; ``refinement > 0`` maps a uniform parameter ``s`` through
    ``L3 (e^{k s} - 1)/(e^k - 1)`` to cluster nodes near the floor.
    """

    n1: int
    n2: int
    n3: int
    L3: float
    refinement: float = 0.0

    def __post_init__(self):
        if self.n1 < 1 or self.n2 < 1:
            raise ValueError("grid.n1 and grid.n2 must be at least 1")
        if self.n3 < 3:
            raise ValueError("grid.n3 must be at least 3")
        if not self.L3 > 0:
            raise ValueError("grid.L3 must be positive")
        if self.refinement < 0:
            raise ValueError("grid.vertical_refinement must be nonnegative")

    @staticmethod
    def height_for_tail(beta, g, tol):
        """Smallest height with ``exp(-beta g L3 / 2) <= tol``."""
        return 2.0 * math.log(1.0 / tol) / (beta * g)

    @property
    def homogeneous(self):
        return self.n1 == 1 and self.n2 == 1

    @property
    def shape(self):
        return (self.n1, self.n2, self.n3)

    @cached_property
    def x1(self):
        return -0.5 + np.arange(self.n1) / self.n1

    @cached_property
    def x2(self):
        return -0.5 + np.arange(self.n2) / self.n2

    @cached_property
    def ds(self):
        return 1.0 / (self.n3 - 1)

    @cached_property
    def s(self):
        return np.linspace(0.0, 1.0, self.n3)

    @cached_property
    def x3(self):
        k = self.refinement
        if k == 0:
            x = self.L3 * self.s
        else:
            x = self.L3 * np.expm1(k * self.s) / math.expm1(k)
        x[0] = 0.0
        x[-1] = self.L3
        return x

    @cached_property
    def dx3ds(self):
        k = self.refinement
        if k == 0:
            return np.full(self.n3, self.L3)
        return self.L3 * k * np.exp(k * self.s) / math.expm1(k)

    @cached_property
    def x3_weights(self):
        """Quadrature weights for integrals over [0, L3] on the vertical nodes."""
        return composite_weights(self.n3 - 1, self.ds) * self.dx3ds

    def locate_x3(self, q):
        """Cell index, local coordinate in [0, 1] and cell width for heights ``q``.

        Heights above ``L3`` are clamped into the last cell with ``t > 1``.
        """
        q = np.asarray(q, dtype=float)
        k = self.refinement
        if k == 0:
            u = q / self.L3 * (self.n3 - 1)
        else:
            u = np.log1p(np.maximum(q, 0.0) * math.expm1(k) / self.L3) / k * (self.n3 - 1)
        i = np.clip(np.floor(u).astype(np.int64), 0, self.n3 - 2)
        x = self.x3
        h = x[i + 1] - x[i]
        t = (q - x[i]) / h
        return i, t, h


@dataclass(frozen=True)
class VelocityGrid:
    """Uniform tensor grid on ``[-vmax, vmax]^3``."""

    m1: int
    m2: int
    m3: int
    vmax: float

    def __post_init__(self):
        if min(self.m1, self.m2, self.m3) < 2:
            raise ValueError("grid.m1, grid.m2 and grid.m3 must be at least 2")
        if not self.vmax > 0:
            raise ValueError("grid.vmax must be positive")

    @staticmethod
    def vmax_for_tail(beta, tol):
        """Smallest cutoff with ``exp(-beta vmax^2) <= tol``."""
        return math.sqrt(math.log(1.0 / tol) / beta)

    @property
    def shape(self):
        return (self.m1, self.m2, self.m3)

    def _axis(self, m):
        return np.linspace(-self.vmax, self.vmax, m)

    @cached_property
    def v1_axis(self):
        return self._axis(self.m1)

    @cached_property
    def v2_axis(self):
        return self._axis(self.m2)

    @cached_property
    def v3_axis(self):
        return self._axis(self.m3)

    def spacing(self, m):
        return 2 * self.vmax / (m - 1)

    def _weights(self, m):
        w = np.full(m, self.spacing(m))
        w[0] *= 0.5
        w[-1] *= 0.5
        return w

    @cached_property
    def weights(self):
        return self._weights(self.m1), self._weights(self.m2), self._weights(self.m3)

    def speed2(self):
        return (self.v1_axis[:, None, None] ** 2 + self.v2_axis[None, :, None] ** 2
                + self.v3_axis[None, None, :] ** 2)

    def nodes(self):
        """All velocity nodes as an array of shape (m1, m2, m3, 3)."""
        return np.stack(np.meshgrid(self.v1_axis, self.v2_axis, self.v3_axis, indexing="ij"), axis=-1)


@dataclass
class Distribution:
    """Phase-space samples with shape ``(n1, n2, n3, m1, m2, m3)``."""

    grid: SpatialGrid
    vgrid: VelocityGrid
    values: np.ndarray
    role: str = "steady"
    beta: float | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.grid.shape + self.vgrid.shape:
            raise ValueError(f"distribution shape {self.values.shape} does not match the grids")
        if self.role not in ROLES:
            raise ValueError(f"unknown distribution role {self.role!r}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("distribution values must be finite")
        if self.role == "steady" and np.any(self.values < 0):
            raise ValueError("a steady distribution must be nonnegative")


@dataclass
class DensityField:
    grid: SpatialGrid
    values: np.ndarray
    tail_bound: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.grid.shape:
            raise ValueError("density shape does not match the grid")


@dataclass
class FluxField:
    grid: SpatialGrid
    values: np.ndarray
    tail_bound: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (3,) + self.grid.shape:
            raise ValueError("flux shape does not match the grid")


def _velocity_integral(vals, vgrid):
    w1, w2, w3 = vgrid.weights
    return ((vals @ w3) @ w2) @ w1


def _tail_sup(dist):
    if dist.beta is None:
        return math.nan, None
    b = dist.beta
    m = float(np.max(np.abs(dist.values) * np.exp(b * dist.vgrid.speed2())))
    return m, b


def moment_density(dist):
    """Density ``int dist dv`` by the trapezoid rule, with a Gaussian tail bound."""
    vals = _velocity_integral(dist.values, dist.vgrid)
    m, b = _tail_sup(dist)
    tail = math.nan
    if b is not None:
        a = math.sqrt(b) * dist.vgrid.vmax
        tail = m * (math.pi / b) ** 1.5 * (1.0 - math.erf(a) ** 3)
    return DensityField(dist.grid, vals, tail)


def moment_flux(dist):
    """Flux ``int v dist dv`` by the trapezoid rule, with a Gaussian tail bound."""
    vg = dist.vgrid
    out = np.empty((3,) + dist.grid.shape)
    out[0] = _velocity_integral(dist.values * vg.v1_axis[:, None, None], vg)
    out[1] = _velocity_integral(dist.values * vg.v2_axis[None, :, None], vg)
    out[2] = _velocity_integral(dist.values * vg.v3_axis[None, None, :], vg)
    m, b = _tail_sup(dist)
    tail = math.nan
    if b is not None:
        a = math.sqrt(b) * vg.vmax
        tail = m * (math.pi / b**2 * math.exp(-a * a) + 2 * math.pi / b**2 * math.erfc(a))
    return FluxField(dist.grid, out, tail)


# --- interpolation -----------------------------------------------------------

def _locate_periodic(q, n):
    if n == 1:
        z = np.zeros(q.shape, dtype=np.int64)
        return z, z, np.zeros(q.shape), 0.0
    u = (np.asarray(q, dtype=float) + 0.5) * n
    u = np.mod(u, n)
    i0 = np.floor(u).astype(np.int64)
    i0 = np.minimum(i0, n - 1)
    return i0, (i0 + 1) % n, u - i0, float(n)


def _locate_uniform(q, lo, hi, m):
    step = (hi - lo) / (m - 1)
    u = (q - lo) / step
    inside = (u >= 0) & (u <= m - 1)
    i0 = np.clip(np.floor(u).astype(np.int64), 0, m - 2)
    return i0, i0 + 1, u - i0, 1.0 / step, inside


def _multilinear(table, locs, want_grad=False):
    """Evaluate a multilinear interpolant.

    ``locs`` holds one ``(i0, i1, frac, dfrac_dq)`` tuple per table axis.  Returns
    the value and, if requested, the derivative along every axis.
    """
    d = len(locs)
    val = 0.0
    grads = [0.0] * d if want_grad else None
    for corner in range(1 << d):
        idx = []
        ws = []
        for a, (i0, i1, fr, _) in enumerate(locs):
            bit = (corner >> a) & 1
            idx.append(i1 if bit else i0)
            ws.append(fr if bit else 1.0 - fr)
        c = table[tuple(idx)]
        w = np.prod(np.stack(np.broadcast_arrays(*ws)), axis=0)
        val = val + w * c
        if want_grad:
            for a in range(d):
                dw = locs[a][3] * (1.0 if (corner >> a) & 1 else -1.0)
                others = [ws[b] for b in range(d) if b != a]
                wo = np.prod(np.stack(np.broadcast_arrays(*others, np.ones_like(ws[0]))), axis=0)
                grads[a] = grads[a] + dw * wo * c
    return val, grads


def multilinear_periodic(table, nhor, vgrid, x_par, v):
    """Interpolate boundary-type data over (x1, x2, v1, v2, v3); zero outside the box."""
    x_par = np.asarray(x_par, dtype=float)
    v = np.asarray(v, dtype=float)
    shape = x_par.shape[:-1]
    xp = x_par.reshape(-1, 2)
    vv = v.reshape(-1, 3)
    locs = [_locate_periodic(xp[:, 0], nhor[0]), _locate_periodic(xp[:, 1], nhor[1])]
    inside = np.ones(len(xp), dtype=bool)
    for a, m in enumerate(vgrid.shape):
        i0, i1, fr, dq, ins = _locate_uniform(vv[:, a], -vgrid.vmax, vgrid.vmax, m)
        locs.append((i0, i1, fr, dq))
        inside &= ins
    val, grads = _multilinear(table, locs, want_grad=True)
    val = np.where(inside, val, 0.0)
    gx = np.stack([np.where(inside, grads[a], 0.0) for a in range(2)], axis=-1)
    gv = np.stack([np.where(inside, grads[a], 0.0) for a in range(2, 5)], axis=-1)
    return val.reshape(shape), gx.reshape(shape + (2,)), gv.reshape(shape + (3,))


def _locate_vertical(grid, x3):
    if np.any(x3 < 0):
        raise ValueError("interpolation below the floor (x3 < 0); resolve exits first")
    above = x3 > grid.L3
    i, t, h = grid.locate_x3(np.minimum(x3, grid.L3))
    return (i, i + 1, t, 1.0 / h), above


def interpolate(obj, x_par, x3, v=None):
    """Multilinear interpolation of grid data at query points.

    ``obj`` is a Distribution (then ``v`` is required), a DensityField or any
    object with a nodal ``values`` array of shape ``(n1, n2, n3)``.  Returns
    ``(values, tail_flag)``; points above ``L3`` (or outside the velocity box)
    get the truncated tail value 0 and a raised flag.
    """
    x_par = np.atleast_2d(np.asarray(x_par, dtype=float))
    x3 = np.atleast_1d(np.asarray(x3, dtype=float))
    grid = obj.grid
    lz, above = _locate_vertical(grid, x3)
    locs = [_locate_periodic(x_par[:, 0], grid.n1), _locate_periodic(x_par[:, 1], grid.n2), lz]
    outside = above.copy()
    if isinstance(obj, Distribution):
        if v is None:
            raise ValueError("velocity required to interpolate a distribution")
        v = np.atleast_2d(np.asarray(v, dtype=float))
        vg = obj.vgrid
        for a, m in enumerate(vg.shape):
            i0, i1, fr, dq, ins = _locate_uniform(v[:, a], -vg.vmax, vg.vmax, m)
            locs.append((i0, i1, fr, dq))
            outside |= ~ins
    val, _ = _multilinear(obj.values, locs)
    val = np.where(outside, 0.0, val)
    return val, outside


def interp_x3_v3(table, grid, vgrid, x3, v3):
    """Bilinear interpolation in (x3, v3) of a table shaped (n3, P, m3).

    Used by the horizontally homogeneous solvers, where the horizontal velocity
    is conserved along characteristics and only (x3, v3) move.  Returns (Q, P).
    """
    (i0, i1, tz, _), above = _locate_vertical(grid, x3)
    k0, k1, tv, _, inside = _locate_uniform(v3, -vgrid.vmax, vgrid.vmax, vgrid.m3)
    tz = tz[:, None]
    tv = tv[:, None]
    # rows (n3, m3) of contiguous P-vectors make the four gathers cheap
    rows = np.ascontiguousarray(np.moveaxis(table, 2, 1))
    out = ((1 - tz) * ((1 - tv) * rows[i0, k0] + tv * rows[i0, k1])
           + tz * ((1 - tv) * rows[i1, k0] + tv * rows[i1, k1]))
    bad = above | ~inside
    if np.any(bad):
        out[bad] = 0.0
    return out
