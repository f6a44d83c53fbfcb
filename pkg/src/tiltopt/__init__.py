"""Optimal beam-tilt patterns for estimating electron-optical aberrations."""

from .aberrations import (
    AberrationBasis,
    AberrationIndex,
    AberrationVector,
    TiltPolynomialTable,
    build_tilt_polynomial_table,
    enumerate_basis,
    observation_matrix,
    observation_matrix_gradient,
    phase_plate_grid,
    tilt_transform,
    wave_aberration_phase,
)
from .em import EmResult, EmSettings, em_fit, em_fit_batch, em_fit_records, em_mstep
from .estimation import (
    FilterResult,
    FilterState,
    IllConditionedScheduleError,
    SingularInnovationError,
    batch_posterior_cov,
    batch_posterior_cov_lifted,
    covariance_trajectory,
    innovation_log_likelihood,
    kf_predict,
    kf_update,
    rts_smooth,
    run_filter,
)
from .schedule import (
    ScheduleObjective,
    ScheduleResult,
    SolverSettings,
    TiltSequence,
    from_polar,
    lissajous_pattern,
    optimize_horizon,
    random_pattern,
    receding_horizon,
    schedule_cost,
    schedule_gradient,
    sequence_cost_trajectory,
    solve_local,
    to_polar,
)
from .statespace import (
    LinearModel,
    ModelConfig,
    build_model,
    default_config,
    ramp_bounds,
    simulate_trajectory,
)

__version__ = "0.1.0"
