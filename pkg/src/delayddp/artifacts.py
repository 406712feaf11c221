"""Readers and writers for the experiment artifact files.

All schemas are stable; downstream figure scripts and the acceptance
tests parse them.

trajectory.csv   t, x_1..x_n, u_1..u_m
                 one row per timestep 0..N; the terminal row leaves the
                 control columns empty; t = i*dt when dt is configured,
                 else the step index.
gains.csv        t, k_1..k_m, then K_0..K_k row-major
                 (columns K{j}_{r}{c} for gain matrix row r, column c).
result.json      cost_history, mu_history, alpha_history, converged,
                 status, iterations, per-iteration expected/actual
                 reduction, and timing (timing is excluded from
                 determinism comparisons).
ensemble.csv     t, state, mean, stderr, min, max
samples.csv      sample, t, x_1..x_n  (NaN after a sample diverges)
loss_curve.csv   epoch, train_loss, val_one_step (val empty off-schedule)
transfer.csv     t, theta, omega, angle_error, u_1..u_m
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .core import DelayWindow, Trajectory
from .harness import EnsembleStats, TransferResult
from .solver import GainSchedule, SolveResult

__all__ = [
    "write_trajectory_csv",
    "read_trajectory_csv",
    "write_gains_csv",
    "write_result_json",
    "write_ensemble_csv",
    "write_samples_csv",
    "write_loss_csv",
    "write_transfer_csv",
    "write_json",
]


def _fmt(x: float) -> str:
    return repr(float(x))


def write_trajectory_csv(path, trajectory: Trajectory, dt: float | None = None) -> None:
    n, m = trajectory.n, trajectory.m
    header = ["t"] + [f"x_{i + 1}" for i in range(n)] + [f"u_{i + 1}" for i in range(m)]
    x0 = trajectory.initial_window.current
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(trajectory.N + 1):
            t = i * dt if dt is not None else i
            x = x0 if i == 0 else trajectory.states[i - 1]
            if i < trajectory.N:
                u = [_fmt(v) for v in trajectory.controls[i]]
            else:
                u = [""] * m
            writer.writerow([_fmt(t)] + [_fmt(v) for v in x] + u)


def read_trajectory_csv(path):
    """Returns (t, states, controls); the terminal control row is dropped."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    n = sum(1 for name in header if name.startswith("x_"))
    m = sum(1 for name in header if name.startswith("u_"))
    data = rows[1:]
    t = np.array([float(r[0]) for r in data])
    states = np.array([[float(v) for v in r[1 : 1 + n]] for r in data])
    controls = np.array(
        [[float(v) for v in r[1 + n : 1 + n + m]] for r in data[:-1]]
    )
    return t, states, controls


def write_gains_csv(path, gains: GainSchedule, dt: float | None = None) -> None:
    N = len(gains)
    kp1, m, n = gains.feedback.shape[1:]
    header = ["t"] + [f"k_{i + 1}" for i in range(m)]
    for j in range(kp1):
        header += [f"K{j}_{r}{c}" for r in range(m) for c in range(n)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(N):
            t = i * dt if dt is not None else i
            row = [_fmt(t)] + [_fmt(v) for v in gains.open_loop[i]]
            for j in range(kp1):
                row += [_fmt(v) for v in gains.feedback[i, j].ravel()]
            writer.writerow(row)


def write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_result_json(path, result: SolveResult, extra: dict | None = None) -> None:
    payload = {
        "cost_history": [float(c) for c in result.cost_history],
        "mu_history": [float(v) for v in result.mu_history],
        "alpha_history": [float(v) for v in result.alpha_history],
        "converged": bool(result.converged),
        "status": result.status,
        "iterations": int(result.iterations_used),
        "iteration_log": [
            {
                "iteration": r.iteration,
                "cost": float(r.cost),
                "mu": float(r.mu),
                "alpha": float(r.alpha),
                "accepted": bool(r.accepted),
                "expected_reduction": float(r.expected_reduction),
                "actual_reduction": float(r.actual_reduction),
            }
            for r in result.iteration_log
        ],
        "timing": {"solve_seconds": float(result.solve_seconds)},
    }
    payload.update(extra or {})
    write_json(path, payload)


def write_ensemble_csv(path, stats: EnsembleStats, dt: float | None = None) -> None:
    N, n = stats.mean.shape
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "state", "mean", "stderr", "min", "max"])
        for i in range(N):
            t = i * dt if dt is not None else i
            for s in range(n):
                writer.writerow([
                    _fmt(t), s + 1, _fmt(stats.mean[i, s]), _fmt(stats.stderr[i, s]),
                    _fmt(stats.minimum[i, s]), _fmt(stats.maximum[i, s]),
                ])


def write_samples_csv(path, samples: np.ndarray, dt: float | None = None) -> None:
    S, N, n = samples.shape
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", "t"] + [f"x_{i + 1}" for i in range(n)])
        for s in range(S):
            for i in range(N):
                t = i * dt if dt is not None else i
                writer.writerow([s, _fmt(t)] + [_fmt(v) for v in samples[s, i]])


def write_loss_csv(path, train_losses, val_points) -> None:
    val_map = {int(e): float(v) for e, v in val_points}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_one_step"])
        for epoch, loss in enumerate(train_losses):
            val = _fmt(val_map[epoch]) if epoch in val_map else ""
            writer.writerow([epoch, _fmt(loss), val])


def write_transfer_csv(path, transfer: TransferResult, dt: float | None = None) -> None:
    N = transfer.states.shape[0]
    m = transfer.controls.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "theta", "omega", "angle_error"]
                        + [f"u_{i + 1}" for i in range(m)])
        for i in range(N):
            t = i * dt if dt is not None else i
            writer.writerow([
                _fmt(t), _fmt(transfer.states[i, 0]), _fmt(transfer.states[i, 1]),
                _fmt(abs(transfer.angles[i])),
            ] + [_fmt(v) for v in transfer.controls[i]])
