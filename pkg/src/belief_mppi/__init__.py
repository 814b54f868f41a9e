"""Sampling-based stochastic MPC toolkit: MPPI, Shield-MPPI and
belief-space stochastic MPPI, with a race-car simulator and Monte-Carlo
experiment harness."""

from .belief import (
    AugmentedBeliefState,
    BeliefState,
    CovSubset,
    DEFAULT_SUBSET,
    DegenerateSamples,
    DimensionMismatch,
    LinearBeliefContext,
    UntrackedComponent,
    VehicleBeliefContext,
    augment,
    lateral_std,
    propagate_linear,
    propagate_mc,
    propagate_mc_batch,
    propagate_particles_batch,
)
from .constraints import (
    ChanceConstraintSpec,
    Constraint,
    InvalidBudget,
    InvalidProbability,
    SafetyParams,
    allocate_budget,
    backoff_cantelli,
    backoff_gaussian,
    heuristic_h,
    heuristic_h_i,
    safety_cost,
    safety_residual,
    track_constraints,
    track_dcbf,
)
from .controllers import (
    AllRolloutsInvalid,
    ControlBounds,
    ControlPlan,
    Controller,
    CostSpec,
    MppiConfig,
    RolloutBatch,
    mppi_update,
    rollout_bss,
    rollout_mppi,
    rollout_smppi,
    sample_controls,
)
from .dynamics import (
    ControlInput,
    CurvilinearSingularity,
    FactorizationFailure,
    NoiseModel,
    OpenLoop,
    Track,
    TrackFrame,
    VehicleParams,
    VehicleState,
    curvature,
    load_track,
    make_test_track,
    sample_noise,
    save_track,
    step,
    tire_forces,
)
from .sim import (
    AggregateReport,
    ConfigInvalid,
    ExperimentConfig,
    RunRecord,
    default_experiment,
    monte_carlo,
    run_closed_loop,
    stadium_track,
    sweep,
)
from .streams import substream

__version__ = "0.1.0"
