"""Differential dynamic programming for systems with state delays.

The backward pass propagates a quadratic value model in all k+1 window
slots. With the shorthand V'_j for the gradient of the next-step value
with respect to its j-th argument (and V'_{j,l} for Hessian blocks), the
action-value coefficients at each timestep are, for j, l = 0..k:

    Q_{x^j}   = L_{x^j}  + f_{x^j}' V'_0  + [j<k] V'_{j+1}
    Q_u       = L_u      + f_u' V'_0
    Q_{x^j u} = L_{x^j u} + f_{x^j}' V'_{00} f_u + V'_0 . f_{x^j u}
                + [j<k] V'_{j+1,0} f_u
    Q_{uu}    = L_{uu}   + f_u' V'_{00} f_u + V'_0 . f_{uu}
    Q_{x^j x^l} = L_{x^j x^l} + f_{x^j}' V'_{00} f_{x^l} + V'_0 . f_{x^j x^l}
                + [j<k] V'_{j+1,0} f_{x^l} + [l<k] f_{x^j}' V'_{0,l+1}
                + [j<k][l<k] V'_{j+1,l+1}

where the dot is a contraction of the value gradient with the rank-3
dynamics Hessians; iLQG mode drops exactly those contraction terms.
Gains are k = -Quu_reg^{-1} Q_u and K_j = -Quu_reg^{-1} Q_{x^j u}' with
Quu_reg = Q_uu + mu*I, and the value recursion is

    V_j   = Q_{x^j} + K_j' Quu_reg k + K_j' Q_u + Q_{x^j u} k
    V_jl  = Q_{x^j x^l} + Q_{x^j u} K_l + K_j' Q_{u x^l} + K_j' Quu_reg K_l

seeded at the horizon by the terminal-cost derivatives. The forward pass
rolls u_hat_i = u_i + alpha*k(i) + sum_j K_j(i) (xhat_{i-j} - x_{i-j}),
with deviations of pre-horizon slots identically zero.

The outer loop follows the usual regularized scheme: on a failed
factorization the backward pass restarts with a larger mu (quadratically
scheduled through a factor delta), on success mu decays; the forward
pass backtracks alpha and accepts when the achieved reduction is at
least accept_ratio_min times the model's prediction
-(alpha * dV_linear + alpha^2 * dV_quad).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .core import CostModel, DelayWindow, DynamicsModel, Trajectory, rollout, total_cost
from .deriv import (
    DEFAULT_EPS,
    DerivativeBundle,
    compute_bundle,
    symmetrize_cost_grid,
    terminal_cost_derivatives,
)

__all__ = [
    "MODE_FULL",
    "MODE_ILQG",
    "NotPositiveDefinite",
    "Diverged",
    "QCoefficients",
    "ValueExpansion",
    "GainSchedule",
    "SolverConfig",
    "IterationRecord",
    "SolveResult",
    "compute_q",
    "compute_gains",
    "update_value",
    "terminal_value",
    "backward_pass",
    "forward_pass",
    "solve",
]

logger = logging.getLogger(__name__)

MODE_FULL = "full-ddp"
MODE_ILQG = "ilqg"


class NotPositiveDefinite(Exception):
    """Regularized control Hessian failed its SPD factorization."""

    def __init__(self, timestep: int):
        super().__init__(f"Quu_reg not positive definite at timestep {timestep}")
        self.timestep = timestep


class Diverged(Exception):
    """Forward rollout produced a non-finite or guard-exceeding state."""


@dataclass
class QCoefficients:
    """Quadratic expansion coefficients of the one-step action value."""

    Q_x: np.ndarray        # (k+1, n)
    Q_u: np.ndarray        # (m,)
    Q_xx: np.ndarray       # (k+1, k+1, n, n)
    Q_xu: np.ndarray       # (k+1, n, m)
    Q_uu: np.ndarray       # (m, m)
    Quu_reg: np.ndarray    # (m, m)


@dataclass
class ValueExpansion:
    """Quadratic local model of the value function over the delay window.

    dV_linear/dV_quad accumulate k'Q_u and 1/2 k'Quu_reg k along the
    backward sweep; the expected cost reduction of the next forward pass
    at step length alpha is -(alpha*dV_linear + alpha^2*dV_quad).
    """

    V_x: np.ndarray        # (k+1, n)
    V_xx: np.ndarray       # (k+1, k+1, n, n)
    dV_linear: float = 0.0
    dV_quad: float = 0.0


@dataclass
class GainSchedule:
    """Per-timestep open-loop and feedback gains."""

    open_loop: np.ndarray  # (N, m)
    feedback: np.ndarray   # (N, k+1, m, n)

    def __len__(self) -> int:
        return self.open_loop.shape[0]

    @property
    def k(self) -> int:
        return self.feedback.shape[1] - 1


def _default_alphas() -> np.ndarray:
    return 0.5 ** np.arange(11)


@dataclass
class SolverConfig:
    mode: str = MODE_ILQG
    max_iterations: int = 100
    mu_init: float = 0.0
    mu_min: float = 1e-6
    mu_max: float = 1e10
    mu_factor: float = 2.0
    alpha_sequence: np.ndarray = field(default_factory=_default_alphas)
    fixed_alpha: float | None = None
    accept_ratio_min: float = 1e-4
    convergence_tol: float = 1e-7
    gradient_tol: float = 1e-6
    divergence_guard: float = 1e8
    fd_eps: float = DEFAULT_EPS

    def __post_init__(self):
        if self.mode not in (MODE_FULL, MODE_ILQG):
            raise ValueError(f"unknown mode {self.mode!r}")
        alphas = np.asarray(self.alpha_sequence, dtype=float)
        if np.any(alphas <= 0) or np.any(alphas > 1):
            raise ValueError("every alpha must lie in (0, 1]")
        if self.fixed_alpha is not None and not 0 < self.fixed_alpha <= 1:
            raise ValueError("fixed_alpha must lie in (0, 1]")
        if self.mu_min <= 0:
            raise ValueError("mu_min must be positive")
        if not 0 <= self.accept_ratio_min < 1:
            raise ValueError("accept_ratio_min must lie in [0, 1)")
        self.alpha_sequence = alphas

    @property
    def alphas(self) -> np.ndarray:
        if self.fixed_alpha is not None:
            return np.array([self.fixed_alpha])
        return self.alpha_sequence


@dataclass
class IterationRecord:
    iteration: int
    cost: float
    mu: float
    alpha: float
    accepted: bool
    expected_reduction: float
    actual_reduction: float


@dataclass
class SolveResult:
    trajectory: Trajectory
    gains: GainSchedule
    cost_history: list[float]
    mu_history: list[float]
    alpha_history: list[float]
    converged: bool
    iterations_used: int
    status: str = "converged"
    iteration_log: list[IterationRecord] = field(default_factory=list)
    solve_seconds: float = 0.0


def compute_q(
    bundle: DerivativeBundle, v_next: ValueExpansion, mu: float, mode: str = MODE_FULL
) -> QCoefficients:
    """Assemble the Q coefficients at one timestep from the derivative
    bundle and the next step's value expansion."""
    f_x, f_u = bundle.f_x, bundle.f_u
    kp1, n, _ = f_x.shape
    m = f_u.shape[1]
    V0 = v_next.V_x[0]
    V00 = v_next.V_xx[0, 0]
    full = mode == MODE_FULL and bundle.second_order_dynamics_present

    Q_x = bundle.L_x + np.einsum("jpa,p->ja", f_x, V0)
    Q_x[:-1] += v_next.V_x[1:]

    Q_u = bundle.L_u + f_u.T @ V0

    # stack the slot Jacobians into one n x (k+1)n matrix so the heavy
    # product is a single GEMM
    G = f_x.transpose(1, 0, 2).reshape(n, kp1 * n)
    big = G.T @ V00 @ G
    Q_xx = bundle.L_xx + big.reshape(kp1, n, kp1, n).transpose(0, 2, 1, 3)
    Q_xx[:-1] += np.einsum("jaq,lqb->jlab", v_next.V_xx[1:, 0], f_x)
    Q_xx[:, :-1] += np.einsum("jpa,lpb->jlab", f_x, v_next.V_xx[0, 1:])
    Q_xx[:-1, :-1] += v_next.V_xx[1:, 1:]

    Q_xu = bundle.L_xu + np.einsum("jpa,pq,qb->jab", f_x, V00, f_u)
    Q_xu[:-1] += v_next.V_xx[1:, 0] @ f_u

    Q_uu = bundle.L_uu + f_u.T @ V00 @ f_u

    if full:
        Q_xx = Q_xx + np.einsum("p,jlpab->jlab", V0, bundle.f_xx)
        Q_xu = Q_xu + np.einsum("p,jpab->jab", V0, bundle.f_xu)
        Q_uu = Q_uu + np.tensordot(V0, bundle.f_uu, axes=(0, 0))

    Q_uu = 0.5 * (Q_uu + Q_uu.T)
    Quu_reg = Q_uu + mu * np.eye(m)
    for name, arr in (("Q_x", Q_x), ("Q_u", Q_u), ("Q_xx", Q_xx),
                      ("Q_xu", Q_xu), ("Q_uu", Q_uu)):
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite {name} block")
    return QCoefficients(Q_x=Q_x, Q_u=Q_u, Q_xx=Q_xx, Q_xu=Q_xu,
                         Q_uu=Q_uu, Quu_reg=Quu_reg)


def compute_gains(q: QCoefficients, timestep: int = -1):
    """Open-loop and feedback gains from a Q expansion.

    Positive definiteness of Quu_reg is decided by attempting a Cholesky
    factorization; failure raises :class:`NotPositiveDefinite` so the
    caller can raise mu and restart.
    """
    try:
        cf = scipy.linalg.cho_factor(q.Quu_reg, lower=True)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        raise NotPositiveDefinite(timestep)
    open_loop = -scipy.linalg.cho_solve(cf, q.Q_u)
    kp1, n, m = q.Q_xu.shape[0], q.Q_xu.shape[1], q.Q_xu.shape[2]
    rhs = q.Q_xu.transpose(2, 0, 1).reshape(m, kp1 * n)
    feedback = -scipy.linalg.cho_solve(cf, rhs).reshape(m, kp1, n).transpose(1, 0, 2)
    return open_loop, feedback


def update_value(q: QCoefficients, open_loop: np.ndarray, feedback: np.ndarray) -> ValueExpansion:
    """Back-propagate the value expansion through one timestep's gains.

    The returned dV accumulators hold only this step's contribution.
    """
    k_vec = open_loop
    K = feedback
    V_x = (
        q.Q_x
        + np.einsum("jma,m->ja", K, q.Quu_reg @ k_vec + q.Q_u)
        + np.einsum("jam,m->ja", q.Q_xu, k_vec)
    )
    V_xx = (
        q.Q_xx
        + np.einsum("jam,lmb->jlab", q.Q_xu, K)
        + np.einsum("jma,lbm->jlab", K, q.Q_xu)
        + np.einsum("jma,mq,lqb->jlab", K, q.Quu_reg, K)
    )
    V_xx = symmetrize_cost_grid(V_xx)
    return ValueExpansion(
        V_x=V_x,
        V_xx=V_xx,
        dV_linear=float(k_vec @ q.Q_u),
        dV_quad=0.5 * float(k_vec @ q.Quu_reg @ k_vec),
    )


def terminal_value(cost: CostModel, window: DelayWindow, eps: float = DEFAULT_EPS) -> ValueExpansion:
    """Boundary value expansion at the horizon: the terminal cost's own
    first and second derivatives, zero reduction accumulators."""
    L_x, L_xx = terminal_cost_derivatives(cost, window, eps)
    return ValueExpansion(V_x=np.asarray(L_x, dtype=float),
                          V_xx=symmetrize_cost_grid(np.asarray(L_xx, dtype=float)))


def backward_pass(
    bundles: list[DerivativeBundle],
    terminal: ValueExpansion,
    mu: float,
    mode: str = MODE_FULL,
):
    """Sweep i = N-1..0 chaining Q assembly, gains, and value updates.

    Returns (GainSchedule, dV_linear, dV_quad); raises
    :class:`NotPositiveDefinite` naming the failing timestep.
    """
    N = len(bundles)
    kp1, n = bundles[0].L_x.shape
    m = bundles[0].L_u.shape[0]
    open_loop = np.empty((N, m))
    feedback = np.empty((N, kp1, m, n))
    v = terminal
    dv1 = 0.0
    dv2 = 0.0
    for i in range(N - 1, -1, -1):
        q = compute_q(bundles[i], v, mu, mode)
        k_vec, K = compute_gains(q, timestep=i)
        open_loop[i] = k_vec
        feedback[i] = K
        v = update_value(q, k_vec, K)
        dv1 += v.dV_linear
        dv2 += v.dV_quad
    return GainSchedule(open_loop=open_loop, feedback=feedback), dv1, dv2


def forward_pass(
    model: DynamicsModel,
    cost: CostModel,
    nominal: Trajectory,
    gains: GainSchedule,
    alpha: float,
    divergence_guard: float = 1e8,
):
    """Roll out the new control law around the nominal trajectory.

    Deviations of slots whose time index is <= 0 are automatically zero
    because both trajectories share the fixed initial window. Raises
    :class:`Diverged` when a state goes non-finite or past the guard.
    """
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    N = nominal.N
    new_states = np.empty_like(nominal.states)
    new_controls = np.empty_like(nominal.controls)
    window = nominal.initial_window
    J = 0.0
    for i in range(N):
        old_window = nominal.window_at(i)
        dev = window.states - old_window.states
        u = (
            nominal.controls[i]
            + alpha * gains.open_loop[i]
            + np.einsum("jma,ja->m", gains.feedback[i], dev)
        )
        x_next = np.asarray(model.step(window, u), dtype=float).ravel()
        if not np.all(np.isfinite(x_next)) or np.abs(x_next).max() > divergence_guard:
            raise Diverged(f"state left the trust region at timestep {i}")
        J += cost.running(i, window, u)
        new_states[i] = x_next
        new_controls[i] = u
        window = window.shifted(x_next)
    J += cost.terminal(window)
    if not np.isfinite(J):
        raise Diverged("non-finite cost on the new trajectory")
    return Trajectory(nominal.initial_window, new_states, new_controls), float(J)


def _trajectory_bundles(model, cost, traj, mode, eps):
    second = mode == MODE_FULL
    return [
        compute_bundle(model, cost, i, traj.window_at(i), traj.controls[i],
                       second_order=second, eps=eps)
        for i in range(traj.N)
    ]


def _gradient_norm(gains: GainSchedule, controls: np.ndarray) -> float:
    """max_i |k(i)|_inf / (|u_i|_inf + 1), a scale-free stationarity proxy."""
    num = np.abs(gains.open_loop).max(axis=1)
    den = np.abs(controls).max(axis=1) + 1.0
    return float((num / den).max())


def solve(
    model: DynamicsModel,
    cost: CostModel,
    initial_window: DelayWindow,
    u_init: np.ndarray,
    config: SolverConfig | None = None,
) -> SolveResult:
    """Run the full iteration: derivatives, regularized backward pass,
    line-searched forward pass, until convergence or exhaustion."""
    config = config or SolverConfig()
    t0 = time.perf_counter()

    u_init = np.atleast_2d(np.asarray(u_init, dtype=float))
    nominal = rollout(model, initial_window, u_init)
    J = total_cost(cost, nominal)
    if not np.isfinite(J):
        raise Diverged("initial rollout has non-finite cost")

    mu = config.mu_init
    delta = 1.0
    cost_history = [J]
    mu_history: list[float] = []
    alpha_history: list[float] = []
    log: list[IterationRecord] = []
    gains = GainSchedule(
        open_loop=np.zeros_like(u_init),
        feedback=np.zeros((nominal.N, initial_window.k + 1, u_init.shape[1], initial_window.n)),
    )
    converged = False
    status = "max_iterations"
    iterations = 0

    def raise_mu():
        nonlocal mu, delta
        delta = max(delta * config.mu_factor, config.mu_factor)
        mu = min(max(mu * delta, config.mu_min * delta), config.mu_max)

    def lower_mu():
        nonlocal mu, delta
        delta = min(delta / config.mu_factor, 1.0 / config.mu_factor)
        mu = mu * delta
        if mu < config.mu_min:
            mu = 0.0

    for it in range(1, config.max_iterations + 1):
        iterations = it
        bundles = _trajectory_bundles(model, cost, nominal, config.mode, config.fd_eps)
        terminal = terminal_value(cost, nominal.window_at(nominal.N), config.fd_eps)

        while True:
            try:
                gains, dv1, dv2 = backward_pass(bundles, terminal, mu, config.mode)
                break
            except NotPositiveDefinite as err:
                logger.info("iter %d: backward pass failed at t=%d, raising mu from %.3e",
                            it, err.timestep, mu)
                if mu >= config.mu_max:
                    status = "line_search_failed"
                    return SolveResult(nominal, gains, cost_history, mu_history,
                                       alpha_history, False, iterations, status, log,
                                       time.perf_counter() - t0)
                raise_mu()

        # the open-loop gain is only a trustworthy stationarity measure when
        # regularization is not shrinking it
        if mu <= config.mu_min and _gradient_norm(gains, nominal.controls) < config.gradient_tol:
            converged = True
            status = "converged"
            mu_history.append(mu)
            alpha_history.append(0.0)
            logger.info("iter %d: stationary (gradient proxy below %.1e)",
                        it, config.gradient_tol)
            break

        accepted = False
        alpha_used = 0.0
        expected = 0.0
        actual = 0.0
        for alpha in config.alphas:
            expected = -(alpha * dv1 + alpha * alpha * dv2)
            try:
                candidate, J_new = forward_pass(model, cost, nominal, gains, alpha,
                                                config.divergence_guard)
            except Diverged:
                logger.info("iter %d: forward pass diverged at alpha=%.4f", it, alpha)
                continue
            actual = J - J_new
            ok = actual >= config.accept_ratio_min * expected if expected > 0 else actual > 0
            if ok:
                accepted = True
                alpha_used = alpha
                nominal = candidate
                J = J_new
                break

        log.append(IterationRecord(it, J, mu, alpha_used, accepted, expected, actual))
        logger.info(
            "iter %d: cost=%.6e mu=%.3e alpha=%.4f %s expected=%.3e actual=%.3e",
            it, J, mu, alpha_used, "accept" if accepted else "reject", expected, actual,
        )

        if accepted:
            cost_history.append(J)
            mu_history.append(mu)
            alpha_history.append(alpha_used)
            lower_mu()
            prev, curr = cost_history[-2], cost_history[-1]
            if abs(prev - curr) <= config.convergence_tol * max(1.0, abs(prev)):
                converged = True
                status = "converged"
                break
        else:
            if mu >= config.mu_max:
                status = "line_search_failed"
                break
            raise_mu()

    if converged:
        status = "converged"
    return SolveResult(
        trajectory=nominal,
        gains=gains,
        cost_history=cost_history,
        mu_history=mu_history,
        alpha_history=alpha_history,
        converged=converged,
        iterations_used=iterations,
        status=status,
        iteration_log=log,
        solve_seconds=time.perf_counter() - t0,
    )
