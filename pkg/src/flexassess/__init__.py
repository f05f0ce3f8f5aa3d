"""Toolkit for assessing and exploiting the demand-response flexibility of a
building's thermal inertia under polytopic forecast uncertainty.

The package is organized bottom-up:

- :mod:`flexassess.lpcore` -- LP substrate and brute-force polytope oracles
- :mod:`flexassess.thermal` -- discrete-time thermal models and identification
- :mod:`flexassess.constraints` -- polytopic set builders (flexibility,
  forecast-error, comfort, input sets)
- :mod:`flexassess.robust` -- the robust flexibility assessment: affine
  policies, dual reformulation, bisection, worst-case verification
- :mod:`flexassess.control` -- nominal scheduling, DR request handling, and
  the fast tracking controller
- :mod:`flexassess.sim` -- closed-loop scenario simulation and metrics
- :mod:`flexassess.cli` -- batch command-line entry point
"""

from .lpcore import (
    LinearProgram,
    LpSolution,
    Polytope,
    solve_lp,
    enumerate_box_vertices,
    max_over_polytope,
)
from .thermal import (
    ThermalModel,
    LiftedModel,
    TruthModel,
    lift_dynamics,
    simulate_step,
    identify_model,
)
from .constraints import (
    FlexibilitySet,
    DisturbanceUncertainty,
    OperatingConstraints,
    build_flexibility_polytope,
    build_placement,
    build_operating_constraints,
)
from .robust import (
    AffinePolicy,
    RobustProgram,
    FlexibilityAssessment,
    assemble_reformulation,
    assess_flexibility,
    verify_robust_feasibility,
)
from .control import (
    NominalSchedule,
    DRRequest,
    compute_nominal_schedule,
    apply_dr_request,
    tracking_control_step,
)
from .sim import (
    ExogenousSeries,
    ScenarioConfig,
    SimulationReport,
    load_series,
    pv_available,
    run_scenario,
    run_baseline,
    scenario_preset,
)

__version__ = "0.1.0"
