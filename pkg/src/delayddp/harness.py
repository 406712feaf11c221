"""Experiment drivers around solved trajectories.

Covers the noise-robustness study (replaying a solution with and without
feedback gains under Wiener disturbances), cross-application of controls
between plants with different delays, and transfer of network-planned
controls to the real pendulum with visible-current-only gains.

Replays apply the control law around the solved nominal:

    u_hat_i = u*_i + sum_j K_j(i) (x_hat_{i-j} - x*_{i-j})

The open-loop correction term is absent because the solved nominal
already absorbed it; with zero noise and zero model error the feedback
terms vanish and the replay reproduces the nominal exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CostModel, DelayWindow, DynamicsModel, Trajectory, rollout, total_cost
from .models import PendulumModel, observe_position
from .neural import wrap_angle
from .solver import GainSchedule, SolveResult

__all__ = [
    "NoiseConfig",
    "EnsembleStats",
    "simulate_noisy",
    "cross_apply",
    "transfer_to_real",
    "TransferResult",
]

DIVERGENCE_GUARD = 1e8


@dataclass
class NoiseConfig:
    """Wiener disturbance settings: sigma is the variance rate, so each
    state receives independent N(0, sqrt(sigma*dt)) noise per step."""

    sigma: float = 0.01
    dt: float = 0.05
    samples: int = 100
    seed: int = 0

    @property
    def step_std(self) -> float:
        return float(np.sqrt(self.sigma * self.dt))


@dataclass
class EnsembleStats:
    """Per-timestep, per-state statistics over the non-divergent samples."""

    mean: np.ndarray     # (N, n)
    stderr: np.ndarray   # (N, n)
    minimum: np.ndarray  # (N, n)
    maximum: np.ndarray  # (N, n)
    divergence_count: int
    samples_used: int


def _replay_control(nominal: Trajectory, gains: GainSchedule | None, window, i):
    u = nominal.controls[i].copy()
    if gains is not None:
        dev = window.states - nominal.window_at(i).states
        u = u + np.einsum("jma,ja->m", gains.feedback[i], dev)
    return u


def simulate_noisy(
    model: DynamicsModel,
    nominal: Trajectory,
    gains: GainSchedule | None,
    noise: NoiseConfig,
):
    """Roll noisy replays of a solved trajectory.

    Returns (EnsembleStats, samples, diverged) where samples has shape
    (samples, N, n) with NaN rows after a sample trips the divergence
    guard, and diverged flags those samples. Divergent samples are
    excluded from the statistics but kept in the raw array. Each sample
    draws from its own stream spawned off the master seed, so results
    are reproducible regardless of evaluation order.
    """
    N, n = nominal.states.shape
    std = noise.step_std
    samples = np.full((noise.samples, N, n), np.nan)
    diverged = np.zeros(noise.samples, dtype=bool)
    streams = np.random.SeedSequence(noise.seed).spawn(noise.samples)
    for s in range(noise.samples):
        rng = np.random.default_rng(streams[s])
        window = nominal.initial_window
        for i in range(N):
            u = _replay_control(nominal, gains, window, i)
            x = np.asarray(model.step(window, u), dtype=float).ravel()
            if noise.sigma > 0:
                x = x + rng.normal(0.0, std, size=n)
            if not np.all(np.isfinite(x)) or np.abs(x).max() > DIVERGENCE_GUARD:
                diverged[s] = True
                break
            samples[s, i] = x
            window = window.shifted(x)

    good = samples[~diverged]
    if good.shape[0] > 0:
        mean = good.mean(axis=0)
        if good.shape[0] > 1:
            stderr = good.std(axis=0, ddof=1) / np.sqrt(good.shape[0])
        else:
            stderr = np.zeros_like(mean)
        lo = good.min(axis=0)
        hi = good.max(axis=0)
    else:
        mean = np.full((N, n), np.nan)
        stderr = np.full((N, n), np.nan)
        lo = np.full((N, n), np.nan)
        hi = np.full((N, n), np.nan)
    stats = EnsembleStats(mean=mean, stderr=stderr, minimum=lo, maximum=hi,
                          divergence_count=int(diverged.sum()),
                          samples_used=int((~diverged).sum()))
    return stats, samples, diverged


def cross_apply(
    source_solution: SolveResult,
    target_model: DynamicsModel,
    target_cost: CostModel,
    use_gains: bool = False,
):
    """Replay a solution's controls on another plant.

    The target starts from its own constant initial window built from
    the source's newest initial state. With use_gains the feedback terms
    act on deviations from the source nominal over the overlapping
    window slots.
    """
    source = source_solution.trajectory
    if source.m != target_model.m:
        raise ValueError("control dimension mismatch between source and target")
    if source.n != target_model.n:
        raise ValueError("state dimension mismatch between source and target")
    initial = DelayWindow.constant(source.initial_window.current, target_model.k)
    if not use_gains:
        traj = rollout(target_model, initial, source.controls)
        return traj, total_cost(target_cost, traj)

    k_common = min(source.k, target_model.k)
    N = source.N
    states = np.empty((N, source.n))
    controls = np.empty_like(source.controls)
    window = initial
    for i in range(N):
        dev = window.states[: k_common + 1] - source.window_at(i).states[: k_common + 1]
        u = source.controls[i] + np.einsum(
            "jma,ja->m", source_solution.gains.feedback[i][: k_common + 1], dev
        )
        x = np.asarray(target_model.step(window, u), dtype=float).ravel()
        states[i] = x
        controls[i] = u
        window = window.shifted(x)
    traj = Trajectory(initial, states, controls)
    return traj, total_cost(target_cost, traj)


@dataclass
class TransferResult:
    states: np.ndarray        # (N, 2) real (theta, omega) trajectory
    controls: np.ndarray      # (N, m) applied controls
    angles: np.ndarray        # (N,) wrapped angle to upright
    final_angle_error: float


def transfer_to_real(
    net_solution: SolveResult,
    real_model: PendulumModel,
    gain_policy: str = "visible-current-only",
    n_visible: int = 2,
    visible_scale: float = 0.8,
) -> TransferResult:
    """Apply a network-planned control to the real pendulum.

    With gain_policy="visible-current-only" the feedback uses only the
    current-timestep gain columns for the visible coordinates; all
    hidden-state columns are discarded (the real system has no such
    states to measure). Deviations compare the scaled real observation
    against the plan's visible coordinates.
    """
    if gain_policy not in ("none", "visible-current-only"):
        raise ValueError(f"unknown gain policy {gain_policy!r}")
    plan = net_solution.trajectory
    N = plan.N
    state = np.array([np.pi, 0.0])
    states = np.empty((N, 2))
    controls = np.empty_like(plan.controls)
    for i in range(N):
        u = plan.controls[i].copy()
        if gain_policy == "visible-current-only":
            K_vis = net_solution.gains.feedback[i][0][:, :n_visible]
            obs = visible_scale * observe_position(state)
            dev = obs - plan.window_at(i).states[0, :n_visible]
            u = u + K_vis @ dev
        state = np.asarray(
            real_model.step(DelayWindow(state[None, :]), u), dtype=float
        ).ravel()
        states[i] = state
        controls[i] = u
    angles = wrap_angle(states[:, 0])
    return TransferResult(states=states, controls=controls, angles=angles,
                          final_angle_error=float(abs(angles[-1])))
