"""Trajectory optimization for discrete-time systems with state delays.

The solver extends differential dynamic programming to dynamics that
depend on the k+1 most recent states, with feedback gains per delay
slot, an iLQG variant, a delayed recurrent network for system
identification, and experiment drivers around a reactor benchmark and a
pendulum swing-up task.
"""

from .core import (
    CostModel,
    CurrentStateQuadraticCost,
    DelayWindow,
    DynamicsModel,
    QuadraticCost,
    Trajectory,
    rollout,
    total_cost,
    window_at,
)
from .deriv import (
    DerivativeBundle,
    DerivativeReport,
    check_derivatives,
    compute_bundle,
    fd_cost,
    fd_dynamics_first,
    fd_dynamics_second,
)
from .models import (
    AugmentedModel,
    CstrModel,
    LinearDelayedModel,
    PendulumModel,
    Problem,
    augment,
    make_cstr_problem,
    observe_position,
)
from .solver import (
    MODE_FULL,
    MODE_ILQG,
    Diverged,
    GainSchedule,
    NotPositiveDefinite,
    SolveResult,
    SolverConfig,
    backward_pass,
    compute_gains,
    compute_q,
    forward_pass,
    solve,
    terminal_value,
    update_value,
)
from .harness import (
    EnsembleStats,
    NoiseConfig,
    TransferResult,
    cross_apply,
    simulate_noisy,
    transfer_to_real,
)
from .neural import (
    AdamState,
    DatasetConfig,
    DelayedNetwork,
    NetConfig,
    PendulumAngleCost,
    SequenceDataset,
    TrainConfig,
    adam_step,
    bptt_gradient,
    generate_pendulum_dataset,
    load_network,
    make_pendulum_ddp_problem,
    net_forward,
    net_jacobians,
    save_network,
    train,
    wrap_angle,
)

__version__ = "0.1.0"
