"""Path-dependent Hamilton-Jacobi / differential-game numerics at desk scale."""

from .errors import (
    AuditError,
    ConfigurationError,
    ContractError,
    DomainError,
    EvaluationError,
    LatticeCoverageError,
    ParameterError,
    PdhjError,
    SolverError,
    UsageError,
)
from .evolution import (
    AuditReport,
    DelayDynamics,
    OperatorSpec,
    SolveReport,
    audit_hypotheses,
    build_p_laplacian,
    make_linear_operator,
    sample_reachable_set,
    solve_delay_evolution,
)
from .game import (
    ControlGrid,
    FeedbackStrategy,
    GameSpec,
    GuaranteeEstimate,
    HamiltonianEval,
    StateLattice,
    StrategyTrace,
    ValueTable,
    audit_hamiltonian_lipschitz,
    dp_value,
    estimate_guaranteed_result,
    extremal_shift_strategy,
    hamiltonian,
    measurable_selection,
    run_feedback_game,
)
from .minimax import (
    ResidualReport,
    StabilityReport,
    ViscosityReport,
    minimax_residual,
    stability_experiment,
    viscosity_residual,
    viscosity_scan,
)
from .pathcore import Path, StateSpace, TimeGrid, d_infinity, kappa_constant, stop_path, sup_norm
from .upsilon import (
    ChainRuleReport,
    LyapunovParams,
    NuEval,
    PenaltyEval,
    UpsilonEval,
    lyapunov_nu,
    penalty_psi,
    upsilon,
    verify_chain_rule,
)

__version__ = "0.1.0"
