"""Asynchronous Gibbs sampling on simulated and threaded clusters."""

from .core import (
    ConditionalError,
    GaussianScalar,
    GaussianVector,
    InverseGamma,
    InverseWishart,
    ParameterState,
    PointMass,
    ProposalDescriptor,
    SupportError,
    TargetModel,
    UpdateMessage,
    log_joint_ratio,
    proposal_log_density,
    sample_full_conditional,
    worker_rng,
)
from .engine import (
    APPROXIMATE,
    EXACT,
    ConfigError,
    NetworkConfig,
    Outcome,
    RunResult,
    WorkerConfig,
    exact_acceptance_prob,
    make_workers,
    process_update,
    random_scan_gibbs,
    run_jacobi,
    run_simulated,
    run_threaded,
    worker_step,
)
from .gaussian import (
    GaussianTarget,
    build_exponential_target,
    build_jacobi_target,
    conditional_block,
    jacobi_step,
)

__version__ = "0.1.0"
