"""Discrete dynamic bicycle model that stays well defined down to zero speed,
with stability analysis, a nonlinear MPC and reproducible experiment runners."""

from .integrate import (
    StepConfig,
    Trajectory,
    integrate_rk4_reference,
    is_divergent,
    rollout,
    step_backward_variant,
    step_forward_euler_dyn,
    step_forward_euler_kin,
)
from .models import (
    TABLE_I,
    ControlInput,
    DomainError,
    DynState,
    KinState,
    TireForces,
    ValidationError,
    VehicleParams,
    dyn_rhs,
    kin_rhs,
    tire_forces,
)
from .mpc import (
    DynamicPredictor,
    InfeasibleWarning,
    KinematicPredictor,
    MpcConfig,
    MpcSolution,
    ReferenceWindow,
    build_reference_window,
    constraint_violations,
    ocp_cost,
    solve_step,
    solve_step_kinematic,
)
from .scenarios import (
    ComparisonReport,
    OpenLoopSpec,
    StopAndGoSpec,
    run_condition_figure,
    run_speed_sweep,
    run_step_steer,
    run_stop_and_go,
    run_timing_benchmark,
)
from .stability import (
    JacobianBlocks,
    PropagationAudit,
    SweepReport,
    condition_sweep,
    jacobian_blocks,
    propagation_audit,
    spectral_norm_2x2,
)

__version__ = "0.1.0"
