"""Vlasov-Poisson equilibria and their stability under downward gravity.

The package solves the kinetic problem on the horizontally periodic half-space
``T^2 x [0, inf)`` with inflow data on the floor, and verifies the quantitative
bounds that control the steady state and the decay of perturbations.
"""

from vpgrav.model import (
    BoundaryDatum,
    ConditionReport,
    Params,
    PhasePoint,
    check_conditions,
    evaluate_weight,
    kinetic_distance,
)
from vpgrav.grids import Distribution, SpatialGrid, VelocityGrid, interpolate, moment_density, moment_flux
from vpgrav.poisson import Field, field_derivatives, flux_potential, green_selftest, solve_dirichlet
from vpgrav.characteristics import (
    ForceField,
    backward_exit,
    exit_derivatives,
    flow_with_jacobian,
    forward_exit,
    integrate_flow,
    velocity_lemma_check,
)
from vpgrav.steady import (
    SteadyIterate,
    SteadySolution,
    evaluate_h_backtrace,
    grad_h,
    picard_iterate,
    regularity_diagnostics,
    solve_steady,
    uniqueness_probe,
)
from vpgrav.dynamic import (
    DecayReport,
    DynamicState,
    InitialPerturbation,
    duhamel_step,
    evolve,
    lambda_infinity,
    weight_ratio_check,
)
from vpgrav.config import ConfigError, RunConfig, parse_config, parse_config_text
from vpgrav.snapshot import Snapshot, SnapshotError, read_snapshot, write_snapshot
from vpgrav.verify import CheckSpec, VerifyReport, run_battery

__version__ = "0.1.0"

__all__ = [
    "BoundaryDatum",
    "CheckSpec",
    "ConditionReport",
    "ConfigError",
    "DecayReport",
    "Distribution",
    "DynamicState",
    "Field",
    "ForceField",
    "InitialPerturbation",
    "Params",
    "PhasePoint",
    "RunConfig",
    "Snapshot",
    "SnapshotError",
    "SpatialGrid",
    "SteadyIterate",
    "SteadySolution",
    "VelocityGrid",
    "VerifyReport",
    "backward_exit",
    "check_conditions",
    "duhamel_step",
    "evaluate_h_backtrace",
    "evaluate_weight",
    "evolve",
    "exit_derivatives",
    "field_derivatives",
    "flow_with_jacobian",
    "flux_potential",
    "forward_exit",
    "grad_h",
    "green_selftest",
    "integrate_flow",
    "interpolate",
    "kinetic_distance",
    "lambda_infinity",
    "moment_density",
    "moment_flux",
    "parse_config",
    "parse_config_text",
    "picard_iterate",
    "read_snapshot",
    "regularity_diagnostics",
    "run_battery",
    "solve_dirichlet",
    "solve_steady",
    "uniqueness_probe",
    "velocity_lemma_check",
    "weight_ratio_check",
    "write_snapshot",
]
