"""Equilibrium repositioning and shift-scheduling policies for taxi fleets.

The game: a fleet of selfish taxis repositioning between zones over a
day, with flexible shifts (free start time, bounded working hours, a
bounded number of breaks). Two solvers compute approximate symmetric
equilibria: exact fictitious play with a backward-induction best
response, and a fast simulation-based best response that completes
partially observed policies by imputation.
"""

from .evaluation import (
    ExperimentPlan,
    ResultTable,
    RevenueStats,
    best_policy_per_day,
    compare_methods,
    distance_vs_simulations,
    evaluate_policy,
    occupancy_distance,
    synthetic_month,
    train_policy,
)
from .exact import (
    ConvergenceReport,
    CountModel,
    FpConfig,
    agent_count_probability,
    exact_best_response,
    exploitability,
    policy_occupancy,
    policy_value,
    run_fp,
)
from .imputation import (
    ImputationProblem,
    ImputationResult,
    ImputerConfig,
    impute,
    impute_mf,
    impute_mice,
    impute_missforest,
    impute_supervised,
)
from .io import (
    SynthConfig,
    TripRecord,
    build_flows,
    generate_synthetic,
    load_instance,
    load_occupancy,
    load_policy,
    save_instance,
    save_occupancy,
    save_policy,
)
from .model import (
    AugmentedState,
    FleetInstance,
    expected_reward,
    sample_transition,
    transition_row,
    validate_instance,
)
from .policy import (
    OccupancyMatrix,
    PartialOccupancy,
    Policy,
    feasible_actions,
    uniform_start_policy,
)
from .simulation import (
    SbrConfig,
    Trajectory,
    run_sbr,
    sbr_step,
    simulate,
    top_k_weighted_path,
)

__version__ = "0.1.0"
