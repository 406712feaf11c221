"""Delayed recurrent network for system identification, trained by BPTT.

The network maps a window of k+1 augmented states plus the current
control to the next augmented state through nested tanh blocks:

    x_{i+1} = tanh(W_u u_i + b_u + sum_j tanh(W_j x_{i-j} + b_j))

An augmented state is [visible, hidden]: the visible part is what the
real system exposes (pendulum bob position here), the hidden part is
free capacity the network may use to carry latent information such as
velocity. Training rolls the network closed loop over a recorded
sequence (its own outputs feed the window) and backpropagates the
squared error of the visible coordinates only, so hidden trajectories
are unconstrained.

The network implements the DynamicsModel interface over augmented
states, so the delayed solver consumes it unchanged; first derivatives
are analytic, second derivatives (full-DDP mode only) fall back to
finite differences.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import CostModel, DelayWindow, DynamicsModel
from .models import PendulumModel, Problem, observe_position
from .solver import MODE_ILQG, SolverConfig

__all__ = [
    "DelayedNetwork",
    "NetConfig",
    "SequenceDataset",
    "DatasetConfig",
    "AdamState",
    "TrainConfig",
    "TrainReport",
    "net_forward",
    "net_jacobians",
    "bptt_gradient",
    "adam_step",
    "generate_pendulum_dataset",
    "train",
    "one_step_error",
    "persistence_error",
    "PendulumAngleCost",
    "wrap_angle",
    "make_pendulum_ddp_problem",
    "save_network",
    "load_network",
]

logger = logging.getLogger(__name__)


@dataclass
class NetConfig:
    n_visible: int = 2
    n_hidden: int = 30
    m: int = 1
    k: int = 3
    seed: int = 0


class DelayedNetwork(DynamicsModel):
    """Nested-tanh delayed network over augmented states.

    Parameters: W_u (a, m), b_u (a,), W (k+1, a, a), b (k+1, a) with
    a = n_visible + n_hidden. Outputs lie componentwise in (-1, 1).
    """

    def __init__(self, n_visible: int, n_hidden: int, m: int, k: int,
                 W_u, b_u, W, b):
        self.n_visible = n_visible
        self.n_hidden = n_hidden
        self.m = m
        self.k = k
        self.n = n_visible + n_hidden
        a = self.n
        self.W_u = np.asarray(W_u, dtype=float).reshape(a, m)
        self.b_u = np.asarray(b_u, dtype=float).reshape(a)
        self.W = np.asarray(W, dtype=float).reshape(k + 1, a, a)
        self.b = np.asarray(b, dtype=float).reshape(k + 1, a)

    @property
    def a(self) -> int:
        return self.n

    @classmethod
    def initialize(cls, config: NetConfig) -> "DelayedNetwork":
        """Uniform +-1/sqrt(fan_in) weights, zero biases."""
        rng = np.random.default_rng(config.seed)
        a = config.n_visible + config.n_hidden
        s_u = 1.0 / np.sqrt(max(config.m, 1))
        s_x = 1.0 / np.sqrt(a)
        W_u = rng.uniform(-s_u, s_u, size=(a, config.m))
        W = rng.uniform(-s_x, s_x, size=(config.k + 1, a, a))
        return cls(config.n_visible, config.n_hidden, config.m, config.k,
                   W_u, np.zeros(a), W, np.zeros((config.k + 1, a)))

    def params(self) -> dict[str, np.ndarray]:
        out = {"W_u": self.W_u, "b_u": self.b_u}
        for j in range(self.k + 1):
            out[f"W_{j}"] = self.W[j]
            out[f"b_{j}"] = self.b[j]
        return out

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        self.W_u = np.asarray(params["W_u"], dtype=float)
        self.b_u = np.asarray(params["b_u"], dtype=float)
        for j in range(self.k + 1):
            self.W[j] = params[f"W_{j}"]
            self.b[j] = params[f"b_{j}"]

    # DynamicsModel interface
    def step(self, window: DelayWindow, u) -> np.ndarray:
        return net_forward(self, window, u)

    def jacobians(self, window: DelayWindow, u):
        return net_jacobians(self, window, u)


def net_forward(net: DelayedNetwork, window: DelayWindow, u) -> np.ndarray:
    """One step of the nested-tanh map."""
    u = np.asarray(u, dtype=float).reshape(net.m)
    s = net.W_u @ u + net.b_u
    for j in range(net.k + 1):
        s = s + np.tanh(net.W[j] @ window.states[j] + net.b[j])
    return np.tanh(s)


def net_jacobians(net: DelayedNetwork, window: DelayWindow, u):
    """Analytic Jacobians of the step with respect to each window slot
    and the control (chain rule through both tanh layers)."""
    u = np.asarray(u, dtype=float).reshape(net.m)
    a = net.a
    inner = np.empty((net.k + 1, a))
    s = net.W_u @ u + net.b_u
    for j in range(net.k + 1):
        inner[j] = np.tanh(net.W[j] @ window.states[j] + net.b[j])
        s = s + inner[j]
    d_out = 1.0 - np.tanh(s) ** 2
    f_x = np.empty((net.k + 1, a, a))
    for j in range(net.k + 1):
        f_x[j] = d_out[:, None] * ((1.0 - inner[j] ** 2)[:, None] * net.W[j])
    f_u = d_out[:, None] * net.W_u
    return f_x, f_u


def _zero_grads(net: DelayedNetwork) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(p) for name, p in net.params().items()}


def _bptt_batch(net: DelayedNetwork, visible, controls, loss_mask, hidden_init=0.0):
    """Closed-loop rollout + exact reverse-mode gradients, batched.

    visible: (B, k+T+1, n_visible) with rows 0..k seeding the window;
    controls: (B, T, m); loss_mask: (T,) of 0/1 step weights; hidden_init
    fills the hidden slots of the seed windows. Returns (grads summed
    over the batch, total loss).
    """
    k = net.k
    a = net.a
    nv = net.n_visible
    B, _, m = controls.shape
    T = controls.shape[1]

    X = np.zeros((B, T + k + 1, a))
    X[:, : k + 1, :nv] = visible[:, : k + 1]
    X[:, : k + 1, nv:] = hidden_init
    inner = np.empty((T, k + 1, B, a))
    for t in range(T):
        s = controls[:, t] @ net.W_u.T + net.b_u
        for j in range(k + 1):
            inner[t, j] = np.tanh(X[:, k + t - j] @ net.W[j].T + net.b[j])
            s = s + inner[t, j]
        X[:, k + t + 1] = np.tanh(s)

    err = X[:, k + 1 :, :nv] - visible[:, k + 1 :]
    weighted = err * loss_mask[None, :, None]
    loss = float(np.sum(weighted * err))

    grads = _zero_grads(net)
    G = np.zeros((B, T + k + 1, a))
    G[:, k + 1 :, :nv] = 2.0 * weighted
    for t in range(T - 1, -1, -1):
        out = X[:, k + t + 1]
        gs = (1.0 - out ** 2) * G[:, k + t + 1]
        grads["W_u"] += gs.T @ controls[:, t]
        grads["b_u"] += gs.sum(axis=0)
        for j in range(k + 1):
            gi = gs * (1.0 - inner[t, j] ** 2)
            grads[f"W_{j}"] += gi.T @ X[:, k + t - j]
            grads[f"b_{j}"] += gi.sum(axis=0)
            G[:, k + t - j] += gi @ net.W[j]
    return grads, loss


def bptt_gradient(net: DelayedNetwork, visible, controls, loss_mask=None):
    """Gradients of the closed-loop squared visible error over one sequence.

    visible: (k+T+1, n_visible), controls: (T, m); loss_mask optionally
    zeroes the contribution of individual prediction steps.
    """
    visible = np.asarray(visible, dtype=float)
    controls = np.atleast_2d(np.asarray(controls, dtype=float))
    T = controls.shape[0]
    if visible.shape[0] != T + net.k + 1:
        raise ValueError(
            f"visible series must have length T+k+1={T + net.k + 1}, got {visible.shape[0]}"
        )
    mask = np.ones(T) if loss_mask is None else np.asarray(loss_mask, dtype=float)
    grads, loss = _bptt_batch(net, visible[None], controls[None], mask)
    return grads, loss


@dataclass
class AdamState:
    """First/second moment accumulators for a dict of parameters."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """One bias-corrected Adam update; mutates params in place."""
    state.step_count += 1
    t = state.step_count
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        m_hat = state.m[name] / (1 - state.beta1 ** t)
        v_hat = state.v[name] / (1 - state.beta2 ** t)
        params[name] -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


@dataclass
class DatasetConfig:
    n_trajectories: int = 4000
    steps: int = 50            # 1 s at 20 ms
    dt: float = 0.02
    k: int = 3
    # slow pendulum with a strong motor: the torque range clears the
    # direct-lift threshold m*g*l by a wide margin, so one-second
    # trajectories from rest cover the whole circle including the
    # upright region the planner must trust
    gravity: float = 2.0
    damping: float = 0.05
    u_max: float = 12.0
    sinusoid_fraction: float = 0.5
    freq_range: tuple = (0.5, 3.0)
    # unit-circle observations are multiplied by this before storage; keeps
    # the visible data inside [-1, 1] but away from the tanh saturation
    # rails where output precision collapses
    visible_scale: float = 0.8
    # uniform random inputs are held for this many steps; per-step dither
    # barely moves the pendulum and teaches the model nothing
    uniform_hold: int = 5
    amp_min_fraction: float = 0.3
    # fraction of sinusoid trajectories biased to slow pushes with
    # amplitude straddling the lift threshold; these barely crest the top
    # and are the main source of slow data near upright
    slow_lift_fraction: float = 0.3
    slow_freq_range: tuple = (0.2, 0.6)
    slow_amp_range: tuple = (0.2, 0.4)
    seed: int = 0


@dataclass
class SequenceDataset:
    """Recorded pendulum observation sequences.

    visible[s] has k+T+1 rows: the first k+1 seed the window (constant,
    the trajectories start at rest), the rest are targets; controls[s, t]
    drives the transition t -> t+1. All visible entries lie in [-1, 1]:
    they are unit-circle bob positions multiplied by visible_scale.
    """

    visible: np.ndarray   # (S, k+T+1, n_visible)
    controls: np.ndarray  # (S, T, m)
    k: int
    dt: float
    u_max: float
    visible_scale: float = 1.0
    gravity: float = 2.0
    damping: float = 0.05
    control_range: tuple = (0.0, 0.0)

    @property
    def n_sequences(self) -> int:
        return self.visible.shape[0]

    @property
    def T(self) -> int:
        return self.controls.shape[1]


def generate_pendulum_dataset(config: DatasetConfig | None = None) -> SequenceDataset:
    """Simulate torque-perturbed swings from the hanging rest position.

    Half of the inputs are sinusoids with random frequency, phase and
    amplitude, the other half are per-step uniform random torques;
    recorded data are the bob positions only (no velocities).
    """
    config = config or DatasetConfig()
    rng = np.random.default_rng(config.seed)
    model = PendulumModel(dt=config.dt, gravity=config.gravity, damping=config.damping)
    S, T, k = config.n_trajectories, config.steps, config.k
    visible = np.empty((S, T + k + 1, 2))
    controls = np.empty((S, T, 1))
    times = np.arange(T) * config.dt
    n_sin = int(round(config.sinusoid_fraction * S))
    scale = config.visible_scale
    for s in range(S):
        if s < n_sin:
            if rng.uniform() < config.slow_lift_fraction:
                freq = rng.uniform(*config.slow_freq_range)
                amp = config.u_max * rng.uniform(*config.slow_amp_range)
            else:
                freq = rng.uniform(*config.freq_range)
                amp = rng.uniform(config.amp_min_fraction * config.u_max, config.u_max)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            u = amp * np.sin(2.0 * np.pi * freq * times + phase)
        else:
            n_holds = -(-T // config.uniform_hold)
            u = np.repeat(rng.uniform(-config.u_max, config.u_max, size=n_holds),
                          config.uniform_hold)[:T]
        controls[s, :, 0] = u
        state = np.array([np.pi, 0.0])
        obs0 = scale * observe_position(state)
        visible[s, : k + 1] = obs0
        for t in range(T):
            state = model.step(DelayWindow(state[None, :]), u[t : t + 1])
            visible[s, k + 1 + t] = scale * observe_position(state)
    return SequenceDataset(
        visible=visible, controls=controls, k=k, dt=config.dt, u_max=config.u_max,
        visible_scale=scale, gravity=config.gravity, damping=config.damping,
        control_range=(float(controls.min()), float(controls.max())),
    )


def persistence_error(visible: np.ndarray, k: int) -> float:
    """Mean squared one-step error of predicting "next = current"."""
    prev = visible[:, k:-1]
    nxt = visible[:, k + 1 :]
    return float(np.mean((nxt - prev) ** 2))


def one_step_error(net: DelayedNetwork, visible: np.ndarray, controls: np.ndarray,
                   hidden_init: float = 0.0) -> float:
    """Mean squared one-step visible prediction error.

    The visible slots of the window are teacher-forced from the data;
    hidden slots carry the network's own hidden rollout (the data has no
    hidden states to force).
    """
    k, a, nv = net.k, net.a, net.n_visible
    B, _, _ = controls.shape
    T = controls.shape[1]
    X = np.zeros((B, T + k + 1, a))
    X[:, : k + 1, :nv] = visible[:, : k + 1]
    X[:, : k + 1, nv:] = hidden_init
    total = 0.0
    for t in range(T):
        s = controls[:, t] @ net.W_u.T + net.b_u
        for j in range(k + 1):
            s = s + np.tanh(X[:, k + t - j] @ net.W[j].T + net.b[j])
        pred = np.tanh(s)
        total += float(np.sum((pred[:, :nv] - visible[:, k + 1 + t]) ** 2))
        X[:, k + t + 1, :nv] = visible[:, k + 1 + t]
        X[:, k + t + 1, nv:] = pred[:, nv:]
    return total / (B * T * nv)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 1e-3
    lr_final: float | None = 1e-4   # exponential decay target; None = constant
    clip_norm: float = 10.0
    val_fraction: float = 0.1
    hidden_init: float = 0.0        # fill value for hidden seed slots
    seed: int = 0
    log_every: int = 20


@dataclass
class TrainReport:
    train_losses: list          # mean per-step per-coordinate loss, per epoch
    val_one_step: list          # (epoch, error) samples
    persistence_one_step: float
    final_val_one_step: float
    control_range: tuple
    n_train: int
    n_val: int


def _clip_global(grads: dict, max_norm: float) -> dict:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return grads


def train(
    dataset: SequenceDataset,
    net_config: NetConfig | None = None,
    train_config: TrainConfig | None = None,
) -> tuple[DelayedNetwork, TrainReport]:
    """Mini-batch closed-loop BPTT with Adam over the recorded sequences."""
    net_config = net_config or NetConfig(k=dataset.k)
    train_config = train_config or TrainConfig()
    if net_config.k != dataset.k:
        raise ValueError("network delay order must match the dataset")
    net = DelayedNetwork.initialize(net_config)
    params = net.params()
    adam = AdamState(lr=train_config.lr)
    rng = np.random.default_rng(train_config.seed)

    S = dataset.n_sequences
    order = rng.permutation(S)
    n_val = max(1, int(round(train_config.val_fraction * S)))
    val_idx = order[:n_val]
    train_idx = order[n_val:]
    vis_val, ctrl_val = dataset.visible[val_idx], dataset.controls[val_idx]
    mask = np.ones(dataset.T)
    per_step = dataset.T * net_config.n_visible

    pers = persistence_error(vis_val, dataset.k)
    report = TrainReport(
        train_losses=[], val_one_step=[], persistence_one_step=pers,
        final_val_one_step=np.inf, control_range=dataset.control_range,
        n_train=len(train_idx), n_val=n_val,
    )

    bs = train_config.batch_size
    for epoch in range(train_config.epochs):
        if train_config.lr_final is not None and train_config.epochs > 1:
            frac = epoch / (train_config.epochs - 1)
            adam.lr = train_config.lr * (train_config.lr_final / train_config.lr) ** frac
        perm = rng.permutation(train_idx)
        epoch_loss = 0.0
        for start in range(0, len(perm), bs):
            idx = perm[start : start + bs]
            grads, loss = _bptt_batch(
                net, dataset.visible[idx], dataset.controls[idx], mask,
                hidden_init=train_config.hidden_init,
            )
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite training loss at epoch {epoch}; "
                    "try a smaller learning rate or stronger clipping"
                )
            for g in grads.values():
                g /= len(idx)
            _clip_global(grads, train_config.clip_norm)
            adam_step(adam, params, grads)
            net.set_params(params)
            epoch_loss += loss
        report.train_losses.append(epoch_loss / (len(perm) * per_step))
        if epoch % train_config.log_every == 0 or epoch == train_config.epochs - 1:
            val_err = one_step_error(net, vis_val, ctrl_val,
                                     hidden_init=train_config.hidden_init)
            report.val_one_step.append((epoch, val_err))
            logger.info("epoch %d: train %.3e, val one-step %.3e (persistence %.3e)",
                        epoch, report.train_losses[-1], val_err, pers)
    report.final_val_one_step = one_step_error(net, vis_val, ctrl_val,
                                               hidden_init=train_config.hidden_init)
    return net, report


def wrap_angle(theta) -> np.ndarray:
    """Map angles into (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(theta), 2.0 * np.pi)


class PendulumAngleCost(CostModel):
    """Squared angular distance of the observed bob position from upright.

    The angle comes from atan2 applied to the first two (visible)
    coordinates of the newest window slot; a small quadratic control
    cost keeps the plan inside the training input range. Derivatives are
    analytic so the angle-wrap branch is handled deterministically.
    """

    def __init__(self, control_weight: float = 0.01, n_visible: int = 2):
        self.control_weight = control_weight
        self.n_visible = n_visible

    def _angle(self, window: DelayWindow) -> float:
        x, y = window.states[0, 0], window.states[0, 1]
        return float(np.arctan2(x, -y))

    def running(self, i, window, u):
        u = np.asarray(u, dtype=float)
        return self._angle(window) ** 2 + self.control_weight * float(u @ u)

    def terminal(self, window):
        return self._angle(window) ** 2

    def _angle_derivs(self, window: DelayWindow):
        x, y = window.states[0, 0], window.states[0, 1]
        r2 = x * x + y * y
        theta = np.arctan2(x, -y)
        g = np.array([-y / r2, x / r2])
        H = np.array([[2 * x * y, y * y - x * x],
                      [y * y - x * x, -2 * x * y]]) / (r2 * r2)
        grad = 2.0 * theta * g
        hess = 2.0 * np.outer(g, g) + 2.0 * theta * H
        return grad, hess

    def _state_gradient(self, window):
        L_x = np.zeros_like(window.states)
        grad, _ = self._angle_derivs(window)
        L_x[0, :2] = grad
        return L_x

    def _state_hessian(self, window):
        kp1, n = window.states.shape
        L_xx = np.zeros((kp1, kp1, n, n))
        _, hess = self._angle_derivs(window)
        L_xx[0, 0, :2, :2] = hess
        return L_xx

    def running_gradients(self, i, window, u):
        u = np.asarray(u, dtype=float)
        return self._state_gradient(window), 2.0 * self.control_weight * u

    def running_hessians(self, i, window, u):
        kp1, n = window.states.shape
        m = np.asarray(u).size
        return (
            self._state_hessian(window),
            np.zeros((kp1, n, m)),
            2.0 * self.control_weight * np.eye(m),
        )

    def terminal_gradients(self, window):
        return self._state_gradient(window)

    def terminal_hessians(self, window):
        return self._state_hessian(window)


def make_pendulum_ddp_problem(
    net: DelayedNetwork,
    horizon: int = 100,
    control_weight: float = 0.05,
    dt: float = 0.02,
    max_iterations: int = 30,
    convergence_tol: float = 1e-4,
    visible_scale: float = 0.8,
) -> Problem:
    """Swing-up planning problem on the learned network.

    The initial window holds k+1 copies of the hanging observation
    (scaled as during training) with zero hidden states, matching how
    training sequences are seeded. The angle cost is scale-invariant.
    """
    hanging = np.zeros(net.a)
    hanging[:2] = visible_scale * observe_position(np.array([np.pi, 0.0]))
    initial_window = DelayWindow.constant(hanging, net.k)
    cost = PendulumAngleCost(control_weight=control_weight, n_visible=net.n_visible)
    config = SolverConfig(
        mode=MODE_ILQG,
        max_iterations=max_iterations,
        convergence_tol=convergence_tol,
    )
    return Problem(model=net, cost=cost, initial_window=initial_window,
                   u_init=np.zeros((horizon, net.m)), config=config, dt=dt,
                   name="pendulum-net")


CHECKPOINT_VERSION = 1


def save_network(path, net: DelayedNetwork, extra: dict | None = None) -> None:
    """Checkpoint container: dims, weights row-major, and any metadata."""
    payload = {
        "version": np.array(CHECKPOINT_VERSION),
        "n_visible": np.array(net.n_visible),
        "n_hidden": np.array(net.n_hidden),
        "m": np.array(net.m),
        "k": np.array(net.k),
        "W_u": net.W_u,
        "b_u": net.b_u,
        "W": net.W,
        "b": net.b,
    }
    for name, value in (extra or {}).items():
        payload[f"meta_{name}"] = np.asarray(value)
    np.savez(path, **payload)


def load_network(path) -> tuple[DelayedNetwork, dict]:
    data = np.load(path)
    if int(data["version"]) != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {int(data['version'])}")
    net = DelayedNetwork(
        int(data["n_visible"]), int(data["n_hidden"]), int(data["m"]), int(data["k"]),
        data["W_u"], data["b_u"], data["W"], data["b"],
    )
    meta = {key[5:]: data[key] for key in data.files if key.startswith("meta_")}
    return net, meta


def save_dataset(path, dataset: SequenceDataset) -> None:
    np.savez(
        path,
        version=np.array(CHECKPOINT_VERSION),
        visible=dataset.visible,
        controls=dataset.controls,
        k=np.array(dataset.k),
        dt=np.array(dataset.dt),
        u_max=np.array(dataset.u_max),
        visible_scale=np.array(dataset.visible_scale),
        gravity=np.array(dataset.gravity),
        damping=np.array(dataset.damping),
        control_range=np.asarray(dataset.control_range),
    )


def load_dataset(path) -> SequenceDataset:
    data = np.load(path)
    return SequenceDataset(
        visible=data["visible"], controls=data["controls"], k=int(data["k"]),
        dt=float(data["dt"]), u_max=float(data["u_max"]),
        visible_scale=float(data["visible_scale"]),
        gravity=float(data["gravity"]), damping=float(data["damping"]),
        control_range=tuple(data["control_range"]),
    )
