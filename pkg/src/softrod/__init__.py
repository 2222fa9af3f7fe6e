"""Soft rod dynamics, geometric tracking control, and Lie-group state estimation."""

from .control import (
    DesiredTrajectory,
    GainProfile,
    TrackingBasinReport,
    TrackingErrors,
    TrajectoryPoint,
    check_tracking_basin,
    check_trajectory_consistency,
    feedforward_transform,
    lyapunov_value,
    tracking_errors,
    virtual_inputs,
)
from .discretize import (
    CflReport,
    DerivativeOperator,
    GridTooSmall,
    IntegratorConfig,
    check_cfl,
    d2_ds2,
    d_ds,
    step,
    step_coupled,
)
from .estimate import (
    CovarianceBlowup,
    EstimatorState,
    KalmanGain,
    LinearizedOperator,
    NoiseModel,
    ekf_step,
    filter_update,
    kalman_gain,
    linearize_dynamics,
    observation_matrix,
    reconstruct_strains,
    regularized_gain,
    riccati_step,
)
from .geometry import (
    NearPiRotation,
    NotSkewSymmetric,
    SingularMatrix,
    axial,
    c_matrix,
    exp_so3,
    hat,
    log_so3,
    project_so3,
    rotation_error,
    vee,
)
from .harness import (
    MetricsRecord,
    RunConfig,
    RunResult,
    Snapshot,
    SwingTrajectory,
    emit_csv,
    load_config,
    make_swing_trajectory,
    run_closed_loop,
)
from .rod import (
    Grid,
    NonFiniteState,
    RodParams,
    RodState,
    StateRates,
    Wrench,
    dynamics_rhs,
    internal_loads,
    make_initial_state,
    strain_profile,
    strains,
)

__version__ = "0.1.0"
