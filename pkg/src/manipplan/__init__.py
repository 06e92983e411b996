"""manipplan: singularity-avoiding trajectory optimization for serial
manipulators, solved as MAP inference over a Gaussian-process trajectory
prior on a factor graph."""

from .collision import CollisionParams, SdfGrid, build_box_sdf, hinge_cost, load_sdf, save_sdf, sdf_query
from .factor_graph import (
    FactorGraph,
    FactorKind,
    OptimizeReport,
    SolverMethod,
    SolverSettings,
    build_graph,
    optimize,
    total_cost,
)
from .gp_prior import (
    GpPriorParams,
    SupportTrajectory,
    TrajectoryState,
    gp_prior_error,
    init_trajectory,
    interpolate,
)
from .kinematics import (
    DhLink,
    KinematicChain,
    Pose,
    forward_kinematics,
    geometric_jacobian,
    jacobian_partials,
    load_chain,
    planar_chain,
)
from .manipulability import (
    ManipulabilityEllipsoid,
    SingularityCostParams,
    classify_configuration,
    ellipsoid,
    likelihood,
    manipulability,
    manipulability_gradient,
    singularity_cost,
)
from .scenario import (
    Scenario,
    load_scenario,
    run_comparison,
    run_interp_sweep,
    run_scenario,
)

__version__ = "0.1.0"
