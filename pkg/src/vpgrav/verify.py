"""Inequality battery: builds a steady state and a perturbed run, then checks
every estimate with an explicit constant and reports its worst margin.

A margin is positive when the inequality holds.  Unless stated otherwise it is
relative, ``(rhs - lhs)/rhs``, reduced over samples by an exact minimum, so the
report does not depend on how the checks are spread over threads.  Checks whose
hypotheses fail are reported ``unchecked``.  Soft checks (fitted constants,
shape diagnostics) never affect the exit status.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from vpgrav.characteristics import (
    ContractViolation,
    ForceField,
    backward_exit,
    exit_time_bound,
    integrate_flow,
    velocity_lemma_check,
)
from vpgrav.dynamic import evolve, lambda_infinity, weight_ratio_check
from vpgrav.model import check_conditions
from vpgrav.steady import grad_h, regularity_diagnostics, solve_steady, successive_ratios, uniqueness_probe

PASS, FAIL, UNCHECKED, WARN = "pass", "fail", "unchecked", "warn"


@dataclass(frozen=True)
class CheckSpec:
    id: str
    anchor: str
    samples: int = 0
    seed: int = 0
    tolerance: float = 0.0
    severity: str = "hard"


@dataclass
class CheckResult:
    spec: CheckSpec
    samples: int
    margin: float
    status: str
    wall: float = 0.0
    note: str = ""

    def record(self, timing=True):
        s = self.spec
        parts = [f"check={s.id}", f"severity={s.severity}", f"status={self.status}",
                 f"samples={self.samples}", f"margin={self.margin:.17g}", f"tolerance={s.tolerance:.17g}",
                 f"seed={s.seed}", f"anchor={s.anchor!r}"]
        if self.note:
            parts.append(f"note={self.note!r}")
        if timing:
            parts.append(f"wall={self.wall:.3f}")
        return " ".join(parts)


@dataclass
class VerifyReport:
    results: list = field(default_factory=list)
    config_text: str = ""

    def __getitem__(self, cid):
        for r in self.results:
            if r.spec.id == cid:
                return r
        raise KeyError(cid)

    @property
    def hard_failures(self):
        return [r for r in self.results if r.spec.severity == "hard" and r.status == FAIL]

    @property
    def status_code(self):
        return 1 if self.hard_failures else 0

    def summary(self):
        n = {k: 0 for k in (PASS, FAIL, UNCHECKED, WARN)}
        for r in self.results:
            n[r.status] += 1
        return (f"summary checks={len(self.results)} pass={n[PASS]} fail={n[FAIL]} "
                f"unchecked={n[UNCHECKED]} warn={n[WARN]} hard_failures={len(self.hard_failures)}")

    def text(self, timing=True):
        """One record per check plus a summary; ``timing=False`` drops wall times."""
        lines = [r.record(timing) for r in self.results]
        lines.append(self.summary())
        return "\n".join(lines) + "\n"

    def write(self, path, timing=True):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.text(timing))


def rel_margin(lhs, rhs):
    """``min (rhs - lhs)/rhs`` elementwise; a zero right side needs a zero left side."""
    lhs = np.broadcast_to(np.asarray(lhs, dtype=float), np.broadcast(lhs, rhs).shape)
    rhs = np.broadcast_to(np.asarray(rhs, dtype=float), lhs.shape)
    if lhs.size == 0:
        return 0.0
    if np.any(~np.isfinite(lhs)):
        return -math.inf
    with np.errstate(divide="ignore", invalid="ignore"):
        m = np.where(rhs > 0, (rhs - lhs) / np.where(rhs > 0, rhs, 1.0),
                     np.where(lhs <= 0, 0.0, -np.inf))
    return float(np.min(m))


def sample_phase(rng, grid, vgrid, n):
    """Uniform samples of the truncated phase box (``x3 > 0`` almost surely)."""
    Z = np.empty((n, 6))
    Z[:, :2] = rng.uniform(0.0, 1.0, (n, 2))
    Z[:, 2] = rng.uniform(0.0, grid.L3, n)
    Z[:, 3:] = rng.uniform(-vgrid.vmax, vgrid.vmax, (n, 3))
    return Z


def _status(spec, margin):
    if margin is None or (isinstance(margin, float) and math.isnan(margin)):
        return UNCHECKED
    ok = margin >= -spec.tolerance
    if spec.severity == "soft":
        return PASS if ok else WARN
    return PASS if ok else FAIL


# individual checks; each returns (samples, margin, note)

def _exit_times(ctx, spec):
    sol = ctx["steady"]
    Z = sample_phase(np.random.default_rng(spec.seed), sol.grid, sol.vgrid, spec.samples)
    force = ForceField(sol.params.g, sol.phi)
    rec = backward_exit(Z, force, forward=True)
    g = sol.params.g
    m1 = rel_margin(rec.t_b, exit_time_bound(Z, g, -1))
    m2 = rel_margin(rec.t_b + rec.t_f, 4.0 / g * np.sqrt(Z[:, 5] ** 2 + g * Z[:, 2]))
    return spec.samples, min(m1, m2), f"backward={m1:.6g} round_trip={m2:.6g}"


def _weight_invariance(ctx, spec):
    sol, cfg = ctx["steady"], ctx["config"]
    p = sol.params
    Z = sample_phase(np.random.default_rng(spec.seed), sol.grid, sol.vgrid, spec.samples)
    force = ForceField(p.g, sol.phi)
    h_ode = cfg["verify"]["h_ode"]
    rec = backward_exit(Z, force, h_ode=h_ode)
    tr = integrate_flow(Z, force, rec.t_b, -1, h_ode=h_ode, error_estimate=False)
    x = tr.x.reshape(-1, 3)
    v = tr.v.reshape(-1, 3)
    x3 = np.maximum(x[:, 2], 0.0)
    pot = np.where(x3 > 0, sol.phi.potential(x[:, :2], x3), 0.0)
    E = (np.sum(v * v, 1) + 2 * pot + 2 * p.g * x3).reshape(tr.x.shape[:2])
    drift = float(np.max(np.abs(np.expm1(p.beta * (E - E[:1])))))
    tol = cfg["verify"]["weight_drift_tol"]
    return spec.samples, (tol - drift) / tol, f"max_relative_drift={drift:.6g}"


def _uniform_bounds(ctx, spec):
    sol = ctx["steady"]
    worst = min((m for it in sol.history for m in it.margins.values()), default=0.0)
    return len(sol.history), float(worst), ""


def _contraction(ctx, spec):
    sol = ctx["steady"]
    r = successive_ratios(sol)[1:]  # ratios after the second iterate
    if not r:
        return 0, math.nan, "too few iterates"
    worst = max(r)
    return len(r), (0.5 - worst) / 0.5, f"max_ratio={worst:.6g}"


def _velocity_lemma(ctx, spec):
    sol = ctx["steady"]
    Z = sample_phase(np.random.default_rng(spec.seed), sol.grid, sol.vgrid, spec.samples)
    rep = velocity_lemma_check(Z, sol.phi, sol.params)
    m = min(rep.worst_upper, rep.worst_lower, rep.endpoint_worst)
    return rep.samples, m, f"upper={rep.worst_upper:.6g} lower={rep.worst_lower:.6g} end={rep.endpoint_worst:.6g}"


def grad_v_envelope(sol, Z, n_bins=10):
    """Weighted ``|grad_v h|`` per ``|v|`` bin and the monotonicity margin of its tail.

    The weight is ``e^{bt/2(|v|^2 + g x3)}``.  Beyond the bin holding the
    overall maximum the bin maxima must not increase; the margin is the most
    negative step relative to the peak (``-inf`` for a non-finite value).
    """
    p = sol.params
    _, gv, _ = grad_h(sol, Z)
    w = np.exp(0.5 * p.beta_tilde * (np.sum(Z[:, 3:] ** 2, 1) + p.g * Z[:, 2]))
    val = w * np.sqrt(np.sum(gv**2, 1))
    if not np.all(np.isfinite(val)):
        return val, None, -math.inf
    speed = np.sqrt(np.sum(Z[:, 3:] ** 2, 1))
    edges = np.linspace(0.0, float(speed.max()) * (1 + 1e-12), n_bins + 1)
    idx = np.clip(np.searchsorted(edges, speed, side="right") - 1, 0, n_bins - 1)
    env = np.full(n_bins, np.nan)
    for b in range(n_bins):
        sel = idx == b
        if np.any(sel):
            env[b] = float(np.max(val[sel]))
    filled = env[~np.isnan(env)]
    peak = float(filled.max()) if filled.size else 0.0
    if peak == 0.0:
        return val, env, 0.0
    tail = filled[int(np.argmax(filled)):]
    steps = tail[:-1] - tail[1:]
    return val, env, float(min(steps.min(), 0.0) / peak) if steps.size else 0.0


def _envelope(ctx, spec):
    sol = ctx["steady"]
    Z = sample_phase(np.random.default_rng(spec.seed), sol.grid, sol.vgrid, spec.samples)
    val, env, margin = grad_v_envelope(sol, Z)
    sup = float(np.max(val)) if val.size else 0.0
    return spec.samples, margin, f"sup={sup:.6g}"


def _grad_v_constant(ctx, spec):
    sol = ctx["steady"]
    p = sol.params
    Z = sample_phase(np.random.default_rng(spec.seed), sol.grid, sol.vgrid, spec.samples)
    val, _, _ = grad_v_envelope(sol, Z)
    scale = (1 + sol.phi.grad_sup()) * sol.G.weighted_grad_norm(p.beta_tilde)
    C = float(np.max(val)) / scale if scale > 0 else 0.0
    # the implicit constant is not explicit; a value of order one is expected
    return spec.samples, 1.0 - C / 10.0, f"fitted_constant={C:.6g}"


def _elliptic(ctx, spec):
    sol = ctx["steady"]
    p, grid = sol.params, sol.grid
    B = p.beta * p.g
    A = float(np.max(sol.rho.values * np.exp(B * grid.x3)[None, None, :]))
    gr = sol.phi.grad
    base = p.green_constant * A * (1 + 1 / B)
    lhs = [np.abs(gr[j]) for j in range(3)]
    rhs = [np.full(grid.shape, base)] * 2 + [base + p.green_constant * A * np.exp(-B * grid.x3)[None, None, :] / B]
    m = min(rel_margin(lhs[j], np.broadcast_to(rhs[j], grid.shape)) for j in range(3))
    return int(np.prod(grid.shape)), m, f"A={A:.6g} B={B:.6g}"


def _regularity(ctx, spec):
    rep = regularity_diagnostics(ctx["steady"])
    return rep.log_samples, rep.log_r2 - 0.9, f"log_fit_r2={rep.log_r2:.6g} dx3h_constant={rep.dx3h_constant:.6g}"


def _uniqueness(ctx, spec):
    cfg = ctx["config"]
    sol = ctx["steady"]
    v = cfg["verify"]
    rep = uniqueness_probe(sol.G, sol.params, sol.grid, sol.vgrid, tol_fix=cfg["steady"]["tol_fix"],
                           max_iter=cfg["steady"]["max_iter"], eps_unique=v["eps_unique"])
    if not math.isnan(rep.condition_margin) and rep.condition_margin < 0:
        return 2, math.nan, f"uniqueness condition fails (margin {rep.condition_margin:.6g})"
    return 2, (rep.tolerance - rep.distance) / rep.tolerance, f"distance={rep.distance:.6g}"


def _conditions(name):
    def run(ctx, spec):
        e = ctx["conditions"][name]
        if e.status == UNCHECKED:
            return 0, math.nan, "norm unavailable"
        return 1, rel_margin(e.lhs, e.rhs), f"lhs={e.lhs:.6g} rhs={e.rhs:.6g}"
    return run


def _steady_bootstrap(ctx, spec):
    sol = ctx["steady"]
    d = sol.phi.grad_sup()
    return 1, rel_margin(d, sol.params.g / 2), f"grad_phi_sup={d:.6g}"


def _dynamic_bootstrap(ctx, spec):
    rep = ctx["dynamic"].report
    return len(rep.t), (0.0 if rep.bootstrap_held else -1.0), f"steps_failing={int(np.sum(~rep.bootstrap))}"


def _decay_rho(ctx, spec):
    rep = ctx["dynamic"].report
    return len(rep.t), rel_margin(rep.decay_lhs, rep.decay_rhs), f"rhs={rep.decay_rhs:.6g}"


def _decay_f(ctx, spec):
    rep = ctx["dynamic"].report
    return len(rep.t), rel_margin(rep.decay_f_lhs, rep.decay_f_rhs), f"rhs={rep.decay_f_rhs:.6g}"


def _flux(ctx, spec):
    rep = ctx["dynamic"].report
    return len(rep.t), rel_margin(rep.flux_lhs, rep.flux_rhs), ""


def _eb(ctx, spec):
    rep = ctx["dynamic"].report
    return 1, rel_margin(rep.eb_value, 2.0), f"value={rep.eb_value:.17g}"


def _decay_rate(ctx, spec):
    rep = ctx["dynamic"].report
    lam = rep.lambda_fit
    note = f"lambda_fit={lam:.6g} lambda_inf={rep.lambda_inf:.6g} extinct={rep.extinct}"
    if math.isnan(lam):
        return rep.fit_samples, math.nan, note
    return rep.fit_samples, (1.0 if lam > 0 else -1.0), note


def _weight_ratio(ctx, spec):
    sol, res = ctx["steady"], ctx["dynamic"]
    Z = sample_phase(np.random.default_rng(spec.seed), sol.grid, sol.vgrid, spec.samples)
    rep = weight_ratio_check(res, sol, sol.params, Z, substeps=ctx["config"]["dynamic"]["substeps"])
    m = min(rep.ratio_margin, rep.inverse_margin, rep.steady_inverse_margin)
    return rep.samples, m, (f"ratio={rep.ratio_margin:.6g} inverse={rep.inverse_margin:.6g} "
                            f"steady_inverse={rep.steady_inverse_margin:.6g}")


# id, anchor, runner, severity, tolerance key or value, sample key, gates
BATTERY = [
    ("condition-beta", "beta >= (8 pi^1.5 C |G|_w)^0.4 g^-0.8", _conditions("condition:beta"), "hard", 0.0, None, ()),
    ("condition-G", "G small against g^2 bt beta^1.5/16", _conditions("condition:G"), "soft", 0.0, None, ()),
    ("choice-g", "M <= sqrt(ln 2) g^1.5 beta^2.5/(2^8.5 pi)", _conditions("choice:g"), "hard", 0.0, None,
     ("dynamic",)),
    ("steady-bootstrap", "sup|grad Phi| <= g/2", _steady_bootstrap, "hard", "bound_rtol", None, ("steady",)),
    ("uniform-bounds", "four uniform Picard iterate bounds", _uniform_bounds, "hard", "bound_rtol", None,
     ("steady",)),
    ("picard-contraction", "successive difference ratio <= 1/2 after iterate 2", _contraction, "hard", 0.0, None,
     ("steady",)),
    ("exit-time", "t_b <= (2/g)(sqrt(v3^2+g x3) - v3), t_b + t_f <= (4/g) sqrt(v3^2+g x3)", _exit_times, "hard",
     1e-9, "samples", ("steady", "steady-bootstrap")),
    ("weight-invariance", "steady weight constant along characteristics", _weight_invariance, "hard", 0.0,
     "weight_samples", ("steady", "steady-bootstrap")),
    ("velocity-lemma", "kinetic distance within exp(+-[(1+|d33 Phi|)s + |grad_par d3 Phi|/g int|V_par|])",
     _velocity_lemma, "hard", 0.0, "lemma_samples", ("steady", "steady-bootstrap")),
    ("grad-v-envelope", "weighted |grad_v h| finite, non-increasing tail in |v|", _envelope, "hard", 0.0,
     "envelope_samples", ("steady", "steady-bootstrap")),
    ("grad-v-constant", "weighted |grad_v h| <= C (1+|grad Phi|) |e^{bt|v|^2} grad G|", _grad_v_constant, "soft",
     0.0, "envelope_samples", ("steady", "steady-bootstrap")),
    ("elliptic-decay", "|d_j Phi| <= C A (1 + 1/B + delta_j3 e^{-B x3}/B)", _elliptic, "soft", 0.0, None,
     ("steady",)),
    ("regularity-log-fit", "|d3 rho| ~ C1 + C2 |ln(x3^2 + g x3)|, R^2 >= 0.9", _regularity, "soft", 0.0, None,
     ("steady",)),
    ("uniqueness", "two seeds converge within 1e-6", _uniqueness, "hard", 0.0, None, ("steady",)),
    ("dynamic-bootstrap", "sup|grad Phi| + sup|grad Psi| <= g/2 and weighted |f| small, every step",
     _dynamic_bootstrap, "hard", 0.0, None, ("dynamic",)),
    ("decay-rho", "e^{lam t}|e^{beta g x3} varrho| <= 16 pi^1.5 beta^-1.5 e^{16 lam^2/(beta g^2)} |w f0|",
     _decay_rho, "hard", 0.0, None, ("dynamic", "dynamic-bootstrap")),
    ("decay-f", "e^{lam t}|w_{beta/8} f| <= explicit constant times |w f0|", _decay_f, "hard", 0.0, None,
     ("dynamic", "dynamic-bootstrap")),
    ("flux-potential", "|grad inv-Laplacian div b| <= 8 pi (1+1/(beta g))/beta^2 sup|w_{beta/2} f|", _flux,
     "hard", 0.0, None, ("dynamic",)),
    ("exp-flux-bound", "exp(64 beta D^2/g) <= 2", _eb, "hard", 0.0, None, ("dynamic", "dynamic-bootstrap")),
    ("weight-ratio", "dynamic weight ratio and inverse-weight bounds", _weight_ratio, "hard", 1e-9,
     "weight_samples", ("dynamic", "dynamic-bootstrap")),
    ("decay-rate", "fitted decay rate positive", _decay_rate, "soft", 0.0, None, ("dynamic", "dynamic-bootstrap")),
]


def build_specs(config):
    v = config["verify"]
    out = []
    for k, (cid, anchor, _, sev, tol, skey, _) in enumerate(BATTERY):
        tol = v[tol] if isinstance(tol, str) else tol
        out.append(CheckSpec(cid, anchor, v[skey] if skey else 0, v["seed"] + 1000 * k, tol, sev))
    return out


def run_dynamic(config, steady, stride=None):
    """The perturbed run of ``config``; ``T`` defaults to ``20/lambda_inf`` (1 when that is unbounded)."""
    p = steady.params
    d = config["dynamic"]
    f0 = config.initial_perturbation()
    wdvh = steady.weighted_grad_v_norm() if not steady.G.is_zero else 0.0
    lam = lambda_infinity(p, wdvh)
    T = d["T"] if d["T"] > 0 else (20.0 / lam if math.isfinite(lam) else 1.0)
    dt = d["dt"] if d["dt"] > 0 else None
    return evolve(f0, steady, p, dt=dt, T=T, substeps=d["substeps"], stride=stride,
                  predictor_corrector=d["predictor_corrector"])


def run_battery(config, threads=None, log=None):
    """Build the scenario of ``config`` and run every check; returns a VerifyReport."""
    say = log or (lambda msg: None)
    threads = threads or config["verify"]["threads"]
    p = config.params()
    grid, vgrid = config.grids()
    G = config.boundary()
    st = config["steady"]
    ctx = {"config": config}
    stage_error = {}
    with np.errstate(over="ignore"):
        t0 = time.perf_counter()
        try:
            ctx["steady"] = solve_steady(G, p, grid, vgrid, tol_fix=st["tol_fix"], max_iter=st["max_iter"],
                                         step_fraction=st["step_fraction"])
            say(f"steady: {ctx['steady'].status} ({time.perf_counter() - t0:.1f} s)")
        except ContractViolation as exc:
            stage_error["steady"] = str(exc)
            say(f"steady: failed ({exc})")
    sol = ctx.get("steady")
    specs = build_specs(config)
    results = {}

    def gated(spec, gates):
        for gname in gates:
            if gname in ("steady", "dynamic"):
                if gname not in ctx:
                    return f"{gname} stage unavailable"
            elif results.get(gname) is None or results[gname].status != PASS:
                return f"hypothesis {gname} not established"
        return None

    def run_one(spec, runner, gates):
        why = gated(spec, gates)
        if why:
            return CheckResult(spec, 0, math.nan, UNCHECKED, 0.0, why)
        t = time.perf_counter()
        with np.errstate(over="ignore", under="ignore"):
            n, margin, note = runner(ctx, spec)
        st_ = _status(spec, margin)
        if st_ == UNCHECKED and not note:
            note = "hypothesis not established"
        return CheckResult(spec, int(n), float(margin), st_, time.perf_counter() - t, note)

    norms = {"G_w": G.weighted_norm(p.beta), "G_grad_w": G.weighted_grad_norm(p.beta_tilde)}
    if sol is not None:
        norms.update(grad_phi=sol.phi.grad_sup(), wh=sol.weighted_h_norm())
    ctx["conditions"] = check_conditions(p, norms, config["verify"]["eps_unique"], config["verify"]["ml_factor"])

    by_id = {s.id: (s, BATTERY[k][2], BATTERY[k][6]) for k, s in enumerate(specs)}
    order = [s.id for s in specs]

    # steady bootstrap gates the dynamic run
    for cid in ("condition-beta", "condition-G", "steady-bootstrap"):
        results[cid] = run_one(*by_id[cid])
    if "steady" in stage_error:
        results["steady-bootstrap"] = CheckResult(by_id["steady-bootstrap"][0], 0, -math.inf, FAIL, 0.0,
                                                  "steady solve failed: " + stage_error["steady"][:120])
    if sol is not None and results["steady-bootstrap"].status == PASS:
        t0 = time.perf_counter()
        if not sol.G.is_zero:
            # fill the lazy caches before any worker threads touch them
            if sol.reduced:
                sol.vertical_tables()
            sol.weighted_grad_v_norm()
        res = run_dynamic(config, sol)
        ctx["dynamic"] = res
        say(f"dynamic: {len(res.report.t) - 1} steps ({time.perf_counter() - t0:.1f} s)")
        norms["wF0"] = res.report.wf0
        ctx["conditions"] = check_conditions(p, norms, config["verify"]["eps_unique"],
                                             config["verify"]["ml_factor"])

    # first wave: checks without cross-check gates, then the gated ones
    remaining = [cid for cid in order if cid not in results]
    waves = [[c for c in remaining if not any(gn in by_id for gn in by_id[c][2])],
             [c for c in remaining if any(gn in by_id for gn in by_id[c][2])]]
    for wave in waves:
        if threads > 1 and len(wave) > 1:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                futs = {cid: ex.submit(run_one, *by_id[cid]) for cid in wave}
                for cid in wave:
                    results[cid] = futs[cid].result()
        else:
            for cid in wave:
                results[cid] = run_one(*by_id[cid])
                say(results[cid].record())
    return VerifyReport([results[cid] for cid in order], config.echo())
