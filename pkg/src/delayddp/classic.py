"""Classic (delay-free) DDP and finite-horizon LQR.

These solvers treat the state as a flat vector with no window structure.
They exist as independent verification oracles: any delayed problem can
be reduced to a delay-free one by stacking the window into one large
state (see :class:`delayddp.models.AugmentedModel`), and the solutions
here must agree with the delayed solver on the reduced problem. They are
written against that role -- plain textbook recursions, sharing no code
with :mod:`delayddp.solver`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .core import CostModel, DelayWindow, DynamicsModel, rollout, total_cost
from .deriv import compute_bundle, terminal_cost_derivatives

__all__ = ["lqr_solve", "LqrSolution", "ClassicDdp", "ClassicDdpResult"]


@dataclass
class LqrSolution:
    """Finite-horizon LQR solution for x' = A x + B u."""

    gains: np.ndarray          # (N, m, n); u_i = -gains[i] @ x_i
    cost_to_go: np.ndarray     # (N+1, n, n); optimal cost = 1/2 x0' S[0] x0
    states: np.ndarray         # (N+1, n) optimal rollout from x0
    controls: np.ndarray       # (N, m)
    cost: float


def lqr_solve(A, B, Q, R, Qf, N: int, x0) -> LqrSolution:
    """Riccati recursion for min 1/2 sum(x'Qx + u'Ru) + 1/2 x_N' Qf x_N."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    Qf = np.asarray(Qf, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    n = A.shape[0]
    m = B.shape[1]

    S = np.empty((N + 1, n, n))
    K = np.empty((N, m, n))
    S[N] = Qf
    for i in range(N - 1, -1, -1):
        BtS = B.T @ S[i + 1]
        K[i] = np.linalg.solve(R + BtS @ B, BtS @ A)
        Acl = A - B @ K[i]
        S[i] = Q + K[i].T @ R @ K[i] + Acl.T @ S[i + 1] @ Acl
        S[i] = 0.5 * (S[i] + S[i].T)

    xs = np.empty((N + 1, n))
    us = np.empty((N, m))
    xs[0] = x0
    J = 0.0
    for i in range(N):
        us[i] = -K[i] @ xs[i]
        J += 0.5 * (xs[i] @ Q @ xs[i] + us[i] @ R @ us[i])
        xs[i + 1] = A @ xs[i] + B @ us[i]
    J += 0.5 * xs[N] @ Qf @ xs[N]
    return LqrSolution(gains=K, cost_to_go=S, states=xs, controls=us, cost=float(J))


@dataclass
class ClassicDdpResult:
    states: np.ndarray        # (N+1, n) including x0
    controls: np.ndarray      # (N, m)
    open_loop: np.ndarray     # (N, m)
    feedback: np.ndarray      # (N, m, n)
    cost_history: list[float]
    converged: bool


class ClassicDdp:
    """Textbook DDP/iLQG for delay-free models (k must be 0).

    Models and costs use the shared interfaces; the window always holds a
    single slot here.
    """

    def __init__(self, model: DynamicsModel, cost: CostModel,
                 second_order: bool = True, mu: float = 0.0,
                 alphas=None, fd_eps: float = 1e-5):
        if model.k != 0:
            raise ValueError("classic DDP handles only delay-free models")
        self.model = model
        self.cost = cost
        self.second_order = second_order
        self.mu = mu
        self.alphas = np.asarray(alphas if alphas is not None else 0.5 ** np.arange(11))
        self.fd_eps = fd_eps

    def _derivs(self, xs, us):
        N = us.shape[0]
        out = []
        for i in range(N):
            w = DelayWindow(xs[i][None, :])
            out.append(compute_bundle(self.model, self.cost, i, w, us[i],
                                       second_order=self.second_order, eps=self.fd_eps))
        return out

    def backward(self, xs, us, mu: float | None = None):
        """One backward sweep; returns (open_loop, feedback, dv1, dv2)."""
        mu = self.mu if mu is None else mu
        N, m = us.shape
        n = xs.shape[1]
        bundles = self._derivs(xs, us)
        lNx, lNxx = terminal_cost_derivatives(self.cost, DelayWindow(xs[N][None, :]),
                                              eps=self.fd_eps)
        Vx = lNx[0]
        Vxx = lNxx[0, 0]
        ks = np.empty((N, m))
        Ks = np.empty((N, m, n))
        dv1 = 0.0
        dv2 = 0.0
        for i in range(N - 1, -1, -1):
            b = bundles[i]
            fx = b.f_x[0]
            fu = b.f_u
            Qx = b.L_x[0] + fx.T @ Vx
            Qu = b.L_u + fu.T @ Vx
            Qxx = b.L_xx[0, 0] + fx.T @ Vxx @ fx
            Qxu = b.L_xu[0] + fx.T @ Vxx @ fu
            Quu = b.L_uu + fu.T @ Vxx @ fu
            if b.second_order_dynamics_present:
                Qxx = Qxx + np.tensordot(Vx, b.f_xx[0, 0], axes=(0, 0))
                Qxu = Qxu + np.tensordot(Vx, b.f_xu[0], axes=(0, 0))
                Quu = Quu + np.tensordot(Vx, b.f_uu, axes=(0, 0))
            Quu_reg = 0.5 * (Quu + Quu.T) + mu * np.eye(m)
            try:
                cf = scipy.linalg.cho_factor(Quu_reg, lower=True)
            except np.linalg.LinAlgError:
                raise np.linalg.LinAlgError(f"Quu not positive definite at step {i}")
            ks[i] = -scipy.linalg.cho_solve(cf, Qu)
            Ks[i] = -scipy.linalg.cho_solve(cf, Qxu.T)
            Vx = Qx + Ks[i].T @ Quu_reg @ ks[i] + Ks[i].T @ Qu + Qxu @ ks[i]
            Vxx = Qxx + Qxu @ Ks[i] + Ks[i].T @ Qxu.T + Ks[i].T @ Quu_reg @ Ks[i]
            Vxx = 0.5 * (Vxx + Vxx.T)
            dv1 += float(ks[i] @ Qu)
            dv2 += 0.5 * float(ks[i] @ Quu_reg @ ks[i])
        return ks, Ks, dv1, dv2

    def _rollout_cost(self, x0, us):
        w0 = DelayWindow(x0[None, :])
        traj = rollout(self.model, w0, us)
        xs = np.vstack([x0[None, :], traj.states])
        return xs, total_cost(self.cost, traj)

    def solve(self, x0, u_init, max_iterations: int = 50,
              convergence_tol: float = 1e-9) -> ClassicDdpResult:
        x0 = np.asarray(x0, dtype=float)
        us = np.array(u_init, dtype=float)
        xs, J = self._rollout_cost(x0, us)
        history = [J]
        converged = False
        ks = np.zeros_like(us)
        Ks = np.zeros((us.shape[0], us.shape[1], xs.shape[1]))
        for _ in range(max_iterations):
            ks, Ks, dv1, dv2 = self.backward(xs, us)
            improved = False
            for alpha in self.alphas:
                xs_new = np.empty_like(xs)
                us_new = np.empty_like(us)
                xs_new[0] = xs[0]
                ok = True
                for i in range(us.shape[0]):
                    us_new[i] = us[i] + alpha * ks[i] + Ks[i] @ (xs_new[i] - xs[i])
                    w = DelayWindow(xs_new[i][None, :])
                    xs_new[i + 1] = self.model.step(w, us_new[i])
                    if not np.all(np.isfinite(xs_new[i + 1])):
                        ok = False
                        break
                if not ok:
                    continue
                from .core import Trajectory

                J_new = total_cost(
                    self.cost, Trajectory(DelayWindow(x0[None, :]), xs_new[1:], us_new)
                )
                if J_new < J:
                    xs, us, J = xs_new, us_new, J_new
                    history.append(J)
                    improved = True
                    break
            if not improved:
                break
            if len(history) >= 2 and abs(history[-2] - history[-1]) <= convergence_tol * max(
                1.0, abs(history[-2])
            ):
                converged = True
                break
        return ClassicDdpResult(states=xs, controls=us, open_loop=ks, feedback=Ks,
                                cost_history=history, converged=converged)
