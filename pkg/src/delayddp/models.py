"""Concrete delayed dynamical systems and problem builders.

Includes the two-stage stirred tank reactor benchmark (a transport delay
couples the stages), a torque-driven pendulum used as ground truth for
system identification, linear delayed test fixtures, and the stacked
"augmented state" reformulation that reduces any delayed system to a
delay-free one -- the verification oracle for the delayed solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import CostModel, DelayWindow, DynamicsModel, QuadraticCost
from .solver import MODE_ILQG, SolverConfig

__all__ = [
    "CstrModel",
    "PendulumModel",
    "LinearDelayedModel",
    "AugmentedModel",
    "augment",
    "observe_position",
    "Problem",
    "make_cstr_problem",
    "make_linear_lq_problem",
    "RealPendulumSwingupCost",
]


class CstrModel(DynamicsModel):
    """Two-stage continuously stirred tank reactor, Euler-discretized.

    States are (c1, T1, c2, T2): normalized concentration and temperature
    of each stage. The second stage is fed by the first through a
    transport delay tau, so the dynamics read the window slot k = tau/dt
    in addition to the current state. Exponential reaction-rate terms
    make the open-loop plant unstable; overflow in them propagates as
    non-finite states and is caught by the forward-pass guard.
    """

    n = 4
    m = 2

    def __init__(self, tau: float = 0.5, dt: float = 0.05):
        k = round(tau / dt)
        if abs(k * dt - tau) > 1e-9:
            raise ValueError(f"tau={tau} is not a multiple of dt={dt}")
        self.tau = tau
        self.dt = dt
        self.k = k

    @staticmethod
    def _rates(x: np.ndarray):
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            r1 = (x[0] + 0.5) * np.exp(25.0 * x[1] / (x[1] + 2.0))
            r2 = (x[2] + 0.25) * np.exp(25.0 * x[3] / (x[3] + 2.0))
        return r1, r2

    def _ode_rhs(self, x: np.ndarray, x_delayed: np.ndarray, u: np.ndarray) -> np.ndarray:
        r1, r2 = self._rates(x)
        return np.array([
            0.5 - x[0] - r1,
            -2.0 * (x[1] + 0.25) - u[0] * (x[1] + 0.25) + r1,
            x_delayed[0] - x[2] - r2 + 0.25,
            x_delayed[1] - 2.0 * x[3] - u[1] * (x[3] + 0.25) + r2 - 0.25,
        ])

    def step(self, window: DelayWindow, u: np.ndarray) -> np.ndarray:
        x = window.states[0]
        x_delayed = window.states[self.k]
        return x + self.dt * self._ode_rhs(x, np.asarray(x_delayed), np.asarray(u, dtype=float))

    def jacobians(self, window: DelayWindow, u: np.ndarray):
        x = window.states[0]
        u = np.asarray(u, dtype=float)
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            e1 = np.exp(25.0 * x[1] / (x[1] + 2.0))
            e2 = np.exp(25.0 * x[3] / (x[3] + 2.0))
            dr1_dx1 = e1
            dr1_dx2 = (x[0] + 0.5) * e1 * 50.0 / (x[1] + 2.0) ** 2
            dr2_dx3 = e2
            dr2_dx4 = (x[2] + 0.25) * e2 * 50.0 / (x[3] + 2.0) ** 2
        g_x = np.array([
            [-1.0 - dr1_dx1, -dr1_dx2, 0.0, 0.0],
            [dr1_dx1, -2.0 - u[0] + dr1_dx2, 0.0, 0.0],
            [0.0, 0.0, -1.0 - dr2_dx3, -dr2_dx4],
            [0.0, 0.0, dr2_dx3, -2.0 - u[1] + dr2_dx4],
        ])
        g_delayed = np.zeros((4, 4))
        g_delayed[2, 0] = 1.0
        g_delayed[3, 1] = 1.0
        g_u = np.array([
            [0.0, 0.0],
            [-(x[1] + 0.25), 0.0],
            [0.0, 0.0],
            [0.0, -(x[3] + 0.25)],
        ])
        f_x = np.zeros((self.k + 1, 4, 4))
        f_x[0] = np.eye(4) + self.dt * g_x
        f_x[self.k] += self.dt * g_delayed
        f_u = self.dt * g_u
        return f_x, f_u


class PendulumModel(DynamicsModel):
    """Torque-driven pendulum, semi-implicit Euler, state (theta, omega).

    theta = 0 is upright (unstable), theta = pi hanging (stable):

        omega' = omega + dt * (u - damping*omega + m g l sin(theta)) / (m l^2)
        theta' = theta + dt * omega'

    Semi-implicit integration keeps the energy of the undriven pendulum
    bounded.
    """

    n = 2
    m = 1
    k = 0

    def __init__(self, mass: float = 1.0, length: float = 1.0, gravity: float = 9.81,
                 damping: float = 0.05, dt: float = 0.02):
        self.mass = mass
        self.length = length
        self.gravity = gravity
        self.damping = damping
        self.dt = dt

    def step(self, window: DelayWindow, u: np.ndarray) -> np.ndarray:
        theta, omega = window.states[0]
        ml2 = self.mass * self.length ** 2
        torque = float(np.asarray(u).ravel()[0])
        acc = (torque - self.damping * omega
               + self.mass * self.gravity * self.length * np.sin(theta)) / ml2
        omega_new = omega + self.dt * acc
        theta_new = theta + self.dt * omega_new
        return np.array([theta_new, omega_new])

    def jacobians(self, window: DelayWindow, u: np.ndarray):
        theta = window.states[0, 0]
        ml2 = self.mass * self.length ** 2
        da_dth = self.mass * self.gravity * self.length * np.cos(theta) / ml2
        da_dom = -self.damping / ml2
        dom = np.array([self.dt * da_dth, 1.0 + self.dt * da_dom])
        dth = np.array([1.0, 0.0]) + self.dt * dom
        f_x = np.array([[dth, dom]])
        f_u = np.array([[self.dt * self.dt / ml2], [self.dt / ml2]])
        return f_x, f_u

    def hessians(self, window: DelayWindow, u: np.ndarray):
        theta = window.states[0, 0]
        ml2 = self.mass * self.length ** 2
        d2a = -self.mass * self.gravity * self.length * np.sin(theta) / ml2
        f_xx = np.zeros((1, 1, 2, 2, 2))
        f_xx[0, 0, 1, 0, 0] = self.dt * d2a           # omega' wrt theta, theta
        f_xx[0, 0, 0, 0, 0] = self.dt * self.dt * d2a  # theta' inherits via omega'
        f_xu = np.zeros((1, 2, 2, 1))
        f_uu = np.zeros((2, 1, 1))
        return f_xx, f_xu, f_uu


def observe_position(state) -> np.ndarray:
    """Bob coordinates (sin(theta), -cos(theta)); on the unit circle, so
    already inside [-1, 1]^2. Hanging maps to (0, 1), upright to (0, -1)."""
    theta = np.asarray(state, dtype=float).ravel()[0]
    return np.array([np.sin(theta), -np.cos(theta)])


class LinearDelayedModel(DynamicsModel):
    """x_{i+1} = sum_j A_j x_{i-j} + B u_i; exact derivatives, zero Hessians."""

    def __init__(self, A, B):
        self.A = np.asarray(A, dtype=float)
        if self.A.ndim != 3 or self.A.shape[1] != self.A.shape[2]:
            raise ValueError("A must be a (k+1, n, n) stack")
        self.B = np.asarray(B, dtype=float)
        if self.B.shape[0] != self.A.shape[1]:
            raise ValueError("B rows must match the state dimension")
        self.k = self.A.shape[0] - 1
        self.n = self.A.shape[1]
        self.m = self.B.shape[1]

    def step(self, window: DelayWindow, u: np.ndarray) -> np.ndarray:
        return (
            np.einsum("jab,jb->a", self.A, window.states)
            + self.B @ np.asarray(u, dtype=float)
        )

    def jacobians(self, window, u):
        return self.A.copy(), self.B.copy()

    def hessians(self, window, u):
        kp1, n = self.k + 1, self.n
        return (
            np.zeros((kp1, kp1, n, n, n)),
            np.zeros((kp1, n, n, self.m)),
            np.zeros((n, self.m, self.m)),
        )


class AugmentedModel(DynamicsModel):
    """Delay-free reformulation over the stacked state z = (x_i, ..., x_{i-k}).

    The top block of the step is the wrapped model's output; the lower
    blocks shift. Rollouts of the augmented model reproduce the delayed
    rollouts exactly, state for state, so classic solvers applied to it
    serve as oracles for the delayed ones.
    """

    def __init__(self, inner: DynamicsModel):
        self.inner = inner
        self.inner_n = inner.n
        self.inner_k = inner.k
        self.n = inner.n * (inner.k + 1)
        self.m = inner.m
        self.k = 0

    def split(self, z: np.ndarray) -> DelayWindow:
        """View a stacked state as the wrapped model's delay window."""
        return DelayWindow(np.asarray(z, dtype=float).reshape(self.inner_k + 1, self.inner_n))

    def stack(self, window: DelayWindow) -> np.ndarray:
        return window.stacked()

    def step(self, window: DelayWindow, u: np.ndarray) -> np.ndarray:
        z = window.states[0]
        inner_window = self.split(z)
        x_next = np.asarray(self.inner.step(inner_window, u), dtype=float).ravel()
        return np.concatenate([x_next, z[: self.inner_n * self.inner_k]])

    def jacobians(self, window: DelayWindow, u: np.ndarray):
        z = window.states[0]
        inner_window = self.split(z)
        out = self.inner.jacobians(inner_window, u)
        if out is None:
            from .deriv import fd_dynamics_first

            fx_in, fu_in = fd_dynamics_first(self.inner, inner_window, u)
        else:
            fx_in, fu_in = (np.asarray(a, dtype=float) for a in out)
        n, kin = self.inner_n, self.inner_k
        A = np.zeros((self.n, self.n))
        A[:n] = fx_in.transpose(1, 0, 2).reshape(n, self.n)
        for j in range(kin):
            A[(j + 1) * n: (j + 2) * n, j * n: (j + 1) * n] = np.eye(n)
        B = np.zeros((self.n, self.m))
        B[:n] = fu_in
        return A[None, :, :], B


def augment(model: DynamicsModel) -> AugmentedModel:
    """Stack a delayed model into a delay-free one (the reduction oracle)."""
    return AugmentedModel(model)


@dataclass
class Problem:
    """A ready-to-solve experiment setup."""

    model: DynamicsModel
    cost: object
    initial_window: DelayWindow
    u_init: np.ndarray
    config: SolverConfig
    dt: float | None = None
    name: str = ""


CSTR_X0 = np.array([0.15, -0.03, 0.1, 0.0])


def make_cstr_problem(
    tau: float = 0.5,
    dt: float = 0.05,
    horizon: int = 100,
    fixed_alpha: float | None = 0.4,
    mode: str = MODE_ILQG,
    max_iterations: int = 20,
    mu_init: float = 0.0,
) -> Problem:
    """Reactor regulation task: drive all four states to zero over a
    horizon of `horizon` steps (5 s at the defaults).

    The constant pre-horizon condition fills every window slot with the
    same initial state. Cost weights P = I4 over the whole delay history
    and R = 0.1 I2 on the controls; the default schedule pins alpha = 0.4
    with no regularization and first-order dynamics only.
    """
    model = CstrModel(tau=tau, dt=dt)
    cost = QuadraticCost(P=np.eye(4), R=0.1 * np.eye(2))
    initial_window = DelayWindow.constant(CSTR_X0, model.k)
    u_init = np.zeros((horizon, model.m))
    config = SolverConfig(
        mode=mode,
        max_iterations=max_iterations,
        mu_init=mu_init,
        fixed_alpha=fixed_alpha,
    )
    label = "cstr" if tau > 0 else "cstr-nodelay"
    return Problem(model=model, cost=cost, initial_window=initial_window,
                   u_init=u_init, config=config, dt=dt, name=label)


def make_linear_lq_problem(
    seed: int = 0,
    n: int = 2,
    m: int = 1,
    delay: int = 1,
    horizon: int = 20,
    mode: str = MODE_ILQG,
) -> Problem:
    """Seeded random delayed LQ regulation problem (stable dynamics)."""
    rng = np.random.default_rng(seed)
    A = rng.normal(0.0, 0.3 / (delay + 1), size=(delay + 1, n, n))
    B = rng.normal(0.0, 1.0, size=(n, m))
    model = LinearDelayedModel(A, B)
    cost = QuadraticCost(P=np.eye(n), R=0.5 * np.eye(m))
    initial_window = DelayWindow(rng.normal(0.0, 1.0, size=(delay + 1, n)))
    config = SolverConfig(mode=mode, max_iterations=10, mu_init=0.0,
                          alpha_sequence=np.array([1.0]))
    return Problem(model=model, cost=cost, initial_window=initial_window,
                   u_init=np.zeros((horizon, m)), config=config, dt=None,
                   name="linear-lq")


class RealPendulumSwingupCost(CostModel):
    """Swing-up cost on the true (theta, omega) pendulum state: squared
    wrapped angle to upright plus a small control cost. Used for the
    reference solution computed directly on the simulator."""

    def __init__(self, control_weight: float = 0.05):
        self.control_weight = control_weight

    @staticmethod
    def _wrapped(theta: float) -> float:
        return float(np.pi - np.mod(np.pi - theta, 2.0 * np.pi))

    def running(self, i, window, u):
        u = np.asarray(u, dtype=float)
        return self._wrapped(window.states[0, 0]) ** 2 + self.control_weight * float(u @ u)

    def terminal(self, window):
        return self._wrapped(window.states[0, 0]) ** 2

    def running_gradients(self, i, window, u):
        L_x = np.zeros_like(window.states)
        L_x[0, 0] = 2.0 * self._wrapped(window.states[0, 0])
        return L_x, 2.0 * self.control_weight * np.asarray(u, dtype=float)

    def running_hessians(self, i, window, u):
        kp1, n = window.states.shape
        m = np.asarray(u).size
        L_xx = np.zeros((kp1, kp1, n, n))
        L_xx[0, 0, 0, 0] = 2.0
        return L_xx, np.zeros((kp1, n, m)), 2.0 * self.control_weight * np.eye(m)

    def terminal_gradients(self, window):
        L_x = np.zeros_like(window.states)
        L_x[0, 0] = 2.0 * self._wrapped(window.states[0, 0])
        return L_x

    def terminal_hessians(self, window):
        kp1, n = window.states.shape
        L_xx = np.zeros((kp1, kp1, n, n))
        L_xx[0, 0, 0, 0] = 2.0
        return L_xx
