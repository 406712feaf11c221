"""Domain types for trajectory optimization on systems with state delays.

A delayed system of order k evolves as

    x_{i+1} = f(x_i, x_{i-1}, ..., x_{i-k}, u_i)

so the "state" seen by dynamics and cost is the window of the k+1 most
recent states. Window slots are indexed backward in time: slot 0 holds
the newest state, slot k the oldest. Pre-horizon states (time index
<= 0) are fixed constants supplied by the initial window; perturbations
of those slots are identically zero in every expansion built on top of
these types.

All containers here are immutable after construction (arrays are copied
and write-locked), so they can be shared freely across threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "DelayWindow",
    "Trajectory",
    "DynamicsModel",
    "CostModel",
    "QuadraticCost",
    "CurrentStateQuadraticCost",
    "window_at",
    "total_cost",
    "rollout",
]


def _locked(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class DelayWindow:
    """The k+1 most recent states, newest first.

    ``states`` has shape (k+1, n); row j holds x_{i-j}.
    """

    states: np.ndarray

    def __post_init__(self):
        arr = _locked(np.atleast_2d(self.states))
        if arr.ndim != 2:
            raise ValueError("window states must be a (k+1, n) array")
        object.__setattr__(self, "states", arr)

    @property
    def k(self) -> int:
        return self.states.shape[0] - 1

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def current(self) -> np.ndarray:
        """The newest state x_i (slot 0)."""
        return self.states[0]

    @classmethod
    def constant(cls, x, k: int) -> "DelayWindow":
        """Window with all k+1 slots equal to x (a constant pre-history)."""
        x = np.asarray(x, dtype=float).ravel()
        return cls(np.tile(x, (k + 1, 1)))

    def shifted(self, new_state) -> "DelayWindow":
        """Push a new state in at slot 0, dropping the oldest slot."""
        new_state = np.asarray(new_state, dtype=float).ravel()
        if new_state.shape[0] != self.n:
            raise ValueError(
                f"new state has length {new_state.shape[0]}, window holds length {self.n}"
            )
        return DelayWindow(np.vstack([new_state[None, :], self.states[:-1]]))

    def stacked(self) -> np.ndarray:
        """All slots concatenated newest-first into one length n*(k+1) vector."""
        return self.states.ravel().copy()


@dataclass(frozen=True)
class Trajectory:
    """A rollout over horizon N.

    ``initial_window`` fixes the states at times <= 0 (the constants
    x^0_{-j}); ``states`` holds x_1 .. x_N and ``controls`` holds
    u_0 .. u_{N-1}.
    """

    initial_window: DelayWindow
    states: np.ndarray
    controls: np.ndarray

    def __post_init__(self):
        states = _locked(np.atleast_2d(self.states))
        controls = _locked(np.atleast_2d(self.controls))
        if states.shape[0] != controls.shape[0]:
            raise ValueError(
                f"{states.shape[0]} states but {controls.shape[0]} controls"
            )
        if states.shape[1] != self.initial_window.n:
            raise ValueError("state dimension does not match the initial window")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "controls", controls)

    @property
    def N(self) -> int:
        return self.states.shape[0]

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def m(self) -> int:
        return self.controls.shape[1]

    @property
    def k(self) -> int:
        return self.initial_window.k

    def window_at(self, i: int) -> DelayWindow:
        """The delay window (x_i, ..., x_{i-k}); slots with time index <= 0
        read from the fixed initial window."""
        if not 0 <= i <= self.N:
            raise IndexError(f"time index {i} outside [0, {self.N}]")
        k = self.k
        rows = np.empty((k + 1, self.n))
        for j in range(k + 1):
            t = i - j
            if t >= 1:
                rows[j] = self.states[t - 1]
            else:
                rows[j] = self.initial_window.states[-t]
        return DelayWindow(rows)


def window_at(trajectory: Trajectory, i: int) -> DelayWindow:
    """Module-level alias for :meth:`Trajectory.window_at`."""
    return trajectory.window_at(i)


class DynamicsModel:
    """Discrete dynamics x_{i+1} = f(window, u).

    Subclasses set the dimensions ``n`` (state), ``m`` (control) and
    ``k`` (delay order) and implement :meth:`step`. ``jacobians`` and
    ``hessians`` may return analytic derivatives; returning None makes
    callers fall back to finite differences (see :mod:`delayddp.deriv`).
    """

    n: int
    m: int
    k: int

    def step(self, window: DelayWindow, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobians(self, window: DelayWindow, u: np.ndarray):
        """Optionally return (f_x, f_u) with f_x of shape (k+1, n, n) where
        f_x[j] is the Jacobian with respect to window slot j, and f_u of
        shape (n, m)."""
        return None

    def hessians(self, window: DelayWindow, u: np.ndarray):
        """Optionally return (f_xx, f_xu, f_uu); shapes (k+1, k+1, n, n, n),
        (k+1, n, n, m) and (n, m, m), with f_xx[j, l, p] the Hessian block
        of output component p with respect to slots j and l."""
        return None


class CostModel:
    """Stage and terminal costs over delay windows; both nonnegative."""

    def running(self, i: int, window: DelayWindow, u: np.ndarray) -> float:
        raise NotImplementedError

    def terminal(self, window: DelayWindow) -> float:
        raise NotImplementedError

    def running_gradients(self, i, window, u):
        """Optionally return (L_x, L_u), shapes (k+1, n) and (m,)."""
        return None

    def running_hessians(self, i, window, u):
        """Optionally return (L_xx, L_xu, L_uu), shapes (k+1, k+1, n, n),
        (k+1, n, m) and (m, m)."""
        return None

    def terminal_gradients(self, window):
        return None

    def terminal_hessians(self, window):
        return None


def _check_weight(M: np.ndarray, name: str) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square")
    if not np.allclose(M, M.T):
        raise ValueError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(M).min() < -1e-10 * max(1.0, np.abs(M).max()):
        raise ValueError(f"{name} must be positive semidefinite")
    return _locked(M)


class QuadraticCost(CostModel):
    """Quadratic cost summed over the whole delay window:

        running  = 1/2 sum_j x_{i-j}^T P x_{i-j} + 1/2 u^T R u
        terminal = 1/2 sum_j x_{N-j}^T P x_{N-j}
    """

    def __init__(self, P: np.ndarray, R: np.ndarray):
        self.P = _check_weight(P, "P")
        self.R = _check_weight(R, "R")

    def _state_term(self, window: DelayWindow) -> float:
        X = window.states
        return 0.5 * float(np.einsum("ja,ab,jb->", X, self.P, X))

    def running(self, i, window, u):
        u = np.asarray(u, dtype=float)
        return self._state_term(window) + 0.5 * float(u @ self.R @ u)

    def terminal(self, window):
        return self._state_term(window)

    def running_gradients(self, i, window, u):
        L_x = window.states @ self.P.T
        L_u = self.R @ np.asarray(u, dtype=float)
        return L_x, L_u

    def running_hessians(self, i, window, u):
        kp1, n = window.states.shape
        m = self.R.shape[0]
        L_xx = np.zeros((kp1, kp1, n, n))
        for j in range(kp1):
            L_xx[j, j] = self.P
        L_xu = np.zeros((kp1, n, m))
        return L_xx, L_xu, self.R.copy()

    def terminal_gradients(self, window):
        return window.states @ self.P.T

    def terminal_hessians(self, window):
        kp1, n = window.states.shape
        L_xx = np.zeros((kp1, kp1, n, n))
        for j in range(kp1):
            L_xx[j, j] = self.P
        return L_xx


class CurrentStateQuadraticCost(QuadraticCost):
    """Quadratic cost that penalizes only the newest window slot."""

    def _state_term(self, window):
        x = window.current
        return 0.5 * float(x @ self.P @ x)

    def running_gradients(self, i, window, u):
        L_x = np.zeros_like(window.states)
        L_x[0] = self.P @ window.current
        return L_x, self.R @ np.asarray(u, dtype=float)

    def running_hessians(self, i, window, u):
        kp1, n = window.states.shape
        L_xx = np.zeros((kp1, kp1, n, n))
        L_xx[0, 0] = self.P
        return L_xx, np.zeros((kp1, n, self.R.shape[0])), self.R.copy()

    def terminal_gradients(self, window):
        L_x = np.zeros_like(window.states)
        L_x[0] = self.P @ window.current
        return L_x

    def terminal_hessians(self, window):
        kp1, n = window.states.shape
        L_xx = np.zeros((kp1, kp1, n, n))
        L_xx[0, 0] = self.P
        return L_xx


def total_cost(cost: CostModel, trajectory: Trajectory) -> float:
    """Sum of running costs over i = 0..N-1 plus the terminal cost at N."""
    J = 0.0
    for i in range(trajectory.N):
        J += cost.running(i, trajectory.window_at(i), trajectory.controls[i])
    J += cost.terminal(trajectory.window_at(trajectory.N))
    return float(J)


def rollout(
    model: DynamicsModel, initial_window: DelayWindow, controls: np.ndarray
) -> Trajectory:
    """Integrate the dynamics forward from the initial window."""
    controls = np.atleast_2d(np.asarray(controls, dtype=float))
    N = controls.shape[0]
    states = np.empty((N, initial_window.n))
    window = initial_window
    for i in range(N):
        x_next = np.asarray(model.step(window, controls[i]), dtype=float).ravel()
        states[i] = x_next
        window = window.shifted(x_next)
    return Trajectory(initial_window, states, controls)
