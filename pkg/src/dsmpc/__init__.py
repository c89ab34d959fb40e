"""Distributed stochastic MPC with data-driven constraint tightening."""

from .disturbance import DisturbanceSpec, ScenarioBank, conditional_samples, generate_bank
from .errors import (
    ConfigError,
    DimensionMismatch,
    DsmpcError,
    InfeasibleProblem,
    NotConverged,
    UnboundedProblem,
    UnsupportedModel,
)
from .errorsim import (
    ErrorBank,
    ErrorCovariances,
    TubeController,
    closed_loop_error_matrix,
    propagate_error_covariance,
    simulate_error_bank,
    tube_feedback,
)
from .mpc import (
    ControllerState,
    CostSpec,
    DistributedStochasticMpc,
    ErrorPrediction,
    assemble_qp,
    expected_cost_terms,
    mpc_step,
)
from .network import (
    ConstraintSet,
    HalfSpace,
    NetworkModel,
    SubsystemModel,
    gersgorin_stable,
    load_network,
    validate_network,
)
from .admm import AdmmParameters, AgentSubproblem, partition_problem, solve_admm
from .benchmark import BenchmarkSpec, build_datacenter_benchmark
from .harness import (
    TrajectoryLog,
    closed_loop_run,
    monte_carlo_runs,
    violation_report,
)
from .qp import QpProblem
from .solver import SolveReport, solve_centralized
from .tightening import (
    TighteningTable,
    analytic_table,
    analytic_tightening,
    discard_count,
    tighten_all,
    tighten_halfspace,
)

__version__ = "0.1.0"
