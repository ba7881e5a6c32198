"""Run configuration: ``[section]`` headers with ``key = value`` lines."""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, field

SCHEMA = {
    "physics": {
        "g": (float, 4.0),
        "eta": (int, 1),
        "beta": (float, 3.0),
        "beta_tilde": (float, 1.5),
        "green_constant": (float, 4.0),
    },
    "grid": {
        "n1": (int, 1),
        "n2": (int, 1),
        "n3": (int, 128),
        "L3": (float, 0.6),
        "m1": (int, 16),
        "m2": (int, 16),
        "m3": (int, 64),
        "vmax": (float, 2.2),
        "vertical_refinement": (float, 0.0),
    },
    "boundary": {
        "kind": (str, "maxwellian"),
        "amplitude": (float, 0.03),
        "beta_G": (float, 6.0),
        "modulation": (float, 0.0),
        "table": (str, ""),
    },
    "steady": {
        "tol_fix": (float, 1e-12),
        "max_iter": (int, 40),
        "step_fraction": (float, 1e-2),
        "seed_closed_form": (bool, False),
    },
    "dynamic": {
        "dt": (float, 0.0),
        "T": (float, 0.0),
        "f0_kind": (str, "gaussian"),
        "f0_amplitude": (float, 0.01),
        "f0_beta": (float, 6.0),
        "f0_modulation": (float, 0.0),
        "substeps": (int, 4),
        "stride": (int, 10),
        "predictor_corrector": (bool, False),
    },
    "verify": {
        "seed": (int, 42),
        "samples": (int, 10000),
        "jacobian_samples": (int, 100),
        "lemma_samples": (int, 200),
        "weight_samples": (int, 200),
        "envelope_samples": (int, 10000),
        "h_ode": (float, 1e-3),
        "weight_drift_tol": (float, 1e-7),
        "jacobian_tol": (float, 1e-5),
        "det_tol": (float, 1e-6),
        "bound_rtol": (float, 1e-3),
        "eps_unique": (float, 1.0),
        "ml_factor": (float, 1.0),
        "threads": (int, 1),
    },
}

POSITIVE = {
    ("physics", "beta"), ("physics", "beta_tilde"), ("physics", "green_constant"),
    ("grid", "n1"), ("grid", "n2"), ("grid", "n3"), ("grid", "L3"), ("grid", "m1"), ("grid", "m2"),
    ("grid", "m3"), ("grid", "vmax"), ("boundary", "beta_G"), ("steady", "tol_fix"), ("steady", "max_iter"),
    ("steady", "step_fraction"), ("dynamic", "f0_beta"), ("dynamic", "substeps"), ("dynamic", "stride"),
    ("verify", "samples"), ("verify", "jacobian_samples"), ("verify", "lemma_samples"),
    ("verify", "weight_samples"), ("verify", "envelope_samples"), ("verify", "h_ode"),
    ("verify", "weight_drift_tol"), ("verify", "jacobian_tol"), ("verify", "det_tol"), ("verify", "bound_rtol"),
    ("verify", "eps_unique"), ("verify", "ml_factor"), ("verify", "threads"),
}
NONNEGATIVE = {("grid", "vertical_refinement"), ("boundary", "amplitude"), ("dynamic", "dt"), ("dynamic", "T"),
               ("dynamic", "f0_amplitude"), ("verify", "seed")}


class ConfigError(ValueError):
    pass


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _convert(section, key, typ, raw, where):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            f = float(raw)
            if not f.is_integer():
                raise ValueError(raw)
            return int(f)
        if typ is float:
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError(raw)
            return v
        return raw
    except ValueError:
        raise ConfigError(f"{section}.{key} must be {typ.__name__}, got {raw!r}{where}") from None


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    source: str = "<defaults>"

    def __getitem__(self, section):
        return self.values[section]

    def get(self, section, key):
        return self.values[section][key]

    def echo(self):
        """The resolved configuration as parseable text."""
        out = io.StringIO()
        for sec, keys in SCHEMA.items():
            out.write(f"[{sec}]\n")
            for k in keys:
                out.write(f"{k} = {_fmt(self.values[sec][k])}\n")
            out.write("\n")
        return out.getvalue()

    def params(self):
        from vpgrav.model import Params

        p = self.values["physics"]
        return Params(p["g"], p["eta"], p["beta"], p["beta_tilde"], p["green_constant"])

    def grids(self):
        from vpgrav.grids import SpatialGrid, VelocityGrid

        g = self.values["grid"]
        return (SpatialGrid(g["n1"], g["n2"], g["n3"], g["L3"], g["vertical_refinement"]),
                VelocityGrid(g["m1"], g["m2"], g["m3"], g["vmax"]))

    def boundary(self):
        from vpgrav.grids import VelocityGrid
        from vpgrav.model import BoundaryDatum
        from vpgrav.snapshot import read_snapshot

        b = self.values["boundary"]
        if b["kind"] == "maxwellian":
            return BoundaryDatum("maxwellian", b["amplitude"], b["beta_G"], b["modulation"])
        snap = read_snapshot(b["table"])
        m = snap.meta
        vg = VelocityGrid(int(m["m1"]), int(m["m2"]), int(m["m3"]), float(m["vmax"]))
        return BoundaryDatum("tabulated", table=snap.values, vgrid=vg)

    def initial_perturbation(self):
        from vpgrav.dynamic import InitialPerturbation

        d = self.values["dynamic"]
        return InitialPerturbation(d["f0_kind"], d["f0_amplitude"], d["f0_beta"], d["f0_modulation"],
                                   self.values["physics"]["g"])


def _validate(vals, where=""):
    p = vals["physics"]
    if not p["g"] > 0:
        raise ConfigError("physics.g must be positive")
    if p["eta"] not in (1, -1):
        raise ConfigError("physics.eta must be +1 or -1")
    for sec, key in POSITIVE:
        if not vals[sec][key] > 0:
            raise ConfigError(f"{sec}.{key} must be positive{where}")
    for sec, key in NONNEGATIVE:
        if vals[sec][key] < 0:
            raise ConfigError(f"{sec}.{key} must be nonnegative{where}")
    g = vals["grid"]
    for k in ("m1", "m2", "m3"):
        if g[k] < 2:
            raise ConfigError(f"grid.{k} must be at least 2{where}")
    if g["n3"] < 3:
        raise ConfigError(f"grid.n3 must be at least 3{where}")
    b = vals["boundary"]
    if b["kind"] not in ("maxwellian", "tabulated"):
        raise ConfigError(f"boundary.kind must be maxwellian or tabulated{where}")
    if b["kind"] == "tabulated" and not b["table"]:
        raise ConfigError(f"boundary.table is required for tabulated data{where}")
    if abs(b["modulation"]) > 1:
        raise ConfigError(f"boundary.modulation must lie in [-1, 1]{where}")
    if vals["dynamic"]["f0_kind"] not in ("gaussian", "zero"):
        raise ConfigError(f"dynamic.f0_kind must be gaussian or zero{where}")


def defaults():
    vals = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
    return RunConfig(vals)


def parse_config_text(text, source="<string>"):
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {source}: {exc}") from None
    vals = defaults().values
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}] in {source}")
        for key, raw in cp.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {sec}.{key} in {source}")
            typ = SCHEMA[sec][key][0]
            vals[sec][key] = _convert(sec, key, typ, raw, f" in {source}")
    _validate(vals, f" in {source}")
    return RunConfig(vals, source)


def parse_config(path):
    """Read and validate a configuration file; unknown keys are rejected."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_config_text(text, str(path))
