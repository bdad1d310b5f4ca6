"""Passive thermal cloak design by bilinear optimal control of the heat equation."""

from .analysis import (
    EigenField,
    efficiency,
    efficiency_series,
    eigen_field,
    mte,
    prolongate_controls,
    spacetime_norm,
)
from .adjoint import eval_cost, eval_gradient, solve_adjoint_steady, solve_adjoint_transient
from .assembly import (
    ControlTensor,
    Operators,
    ProblemData,
    apply_dirichlet,
    assemble_control_tensor,
    assemble_load,
    assemble_mass,
    assemble_robin,
    assemble_stiffness,
    build_operators,
    contract,
)
from .config import ConfigError, ScenarioConfig, build_problem, load_config, parse_config
from .fields import ControlField, GradientTriple, Trajectory
from .forward import (
    SolverError,
    solve_reference_steady,
    solve_reference_transient,
    solve_state_steady,
    solve_transient,
    step_theta,
)
from .mesh import (
    MeshError,
    RegionError,
    RegionTags,
    RestrictionMap,
    TopologyError,
    TriMesh,
    build_square_mesh,
    mask_obstacle,
    refine_uniform,
    tag_regions,
)
from .optimizer import (
    ConstraintValues,
    OptimizeOptions,
    OptimizeReport,
    barrier_value_and_gradient,
    eval_constraints,
    optimize,
)
from .problem import CloakProblem, gradient_check

__version__ = "0.1.0"
