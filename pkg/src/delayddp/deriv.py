"""Per-timestep derivative bundles of dynamics and cost.

Derivatives come from central finite differences by default; models and
costs that provide analytic derivatives (see the hooks on
:class:`~delayddp.core.DynamicsModel` / :class:`~delayddp.core.CostModel`)
are used instead, and :func:`check_derivatives` compares the two routes.

Steps are scaled per coordinate as eps * max(1, |value|), balancing
truncation against roundoff in double precision. Second derivatives are
nested central differences of the first-derivative routine (analytic
when available), which is more accurate per evaluation than direct
second differences.

Array layout (k = delay order, n = state dim, m = control dim):

    f_x   (k+1, n, n)         f_x[j, p, a]       = d f_p / d x_{i-j}[a]
    f_u   (n, m)
    f_xx  (k+1, k+1, n, n, n) f_xx[j, l, p, a, b] = d2 f_p / d x_j[a] d x_l[b]
    f_xu  (k+1, n, n, m)
    f_uu  (n, m, m)
    L_x   (k+1, n)            L_u (m,)
    L_xx  (k+1, k+1, n, n)    L_xu (k+1, n, m)    L_uu (m, m)

Bundle computation is pure; timesteps can be evaluated in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import CostModel, DelayWindow, DynamicsModel

__all__ = [
    "DerivativeBundle",
    "DEFAULT_EPS",
    "fd_dynamics_first",
    "fd_dynamics_second",
    "fd_cost",
    "fd_terminal_cost",
    "dynamics_derivatives",
    "cost_derivatives",
    "terminal_cost_derivatives",
    "compute_bundle",
    "check_derivatives",
    "DerivativeReport",
]

DEFAULT_EPS = 1e-5


@dataclass
class DerivativeBundle:
    """First (and optionally second) derivatives of f and L at one timestep.

    Second-order dynamics slots are None in iLQG mode.
    """

    f_x: np.ndarray
    f_u: np.ndarray
    L_x: np.ndarray
    L_u: np.ndarray
    L_xx: np.ndarray
    L_xu: np.ndarray
    L_uu: np.ndarray
    f_xx: np.ndarray | None = None
    f_xu: np.ndarray | None = None
    f_uu: np.ndarray | None = None

    @property
    def second_order_dynamics_present(self) -> bool:
        return self.f_xx is not None

    @property
    def k(self) -> int:
        return self.f_x.shape[0] - 1


def _step_sizes(values: np.ndarray, eps: float) -> np.ndarray:
    return eps * np.maximum(1.0, np.abs(values))


def _bump_window(window: DelayWindow, j: int, c: int, h: float) -> DelayWindow:
    states = window.states.copy()
    states[j, c] += h
    return DelayWindow(states)


def fd_dynamics_first(model: DynamicsModel, window: DelayWindow, u, eps: float = DEFAULT_EPS):
    """Central-difference Jacobians (f_x, f_u) of model.step."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    u = np.asarray(u, dtype=float)
    kp1, n = window.states.shape
    m = u.shape[0]
    f_x = np.empty((kp1, n, n))
    hx = _step_sizes(window.states, eps)
    for j in range(kp1):
        for c in range(n):
            h = hx[j, c]
            fp = model.step(_bump_window(window, j, c, +h), u)
            fm = model.step(_bump_window(window, j, c, -h), u)
            f_x[j, :, c] = (np.asarray(fp) - np.asarray(fm)) / (2.0 * h)
    f_u = np.empty((n, m))
    hu = _step_sizes(u, eps)
    for c in range(m):
        du = np.zeros(m)
        du[c] = hu[c]
        fp = model.step(window, u + du)
        fm = model.step(window, u - du)
        f_u[:, c] = (np.asarray(fp) - np.asarray(fm)) / (2.0 * hu[c])
    return f_x, f_u


def _jacobian_fn(model: DynamicsModel, eps: float):
    def jac(window, u):
        out = model.jacobians(window, u)
        if out is None:
            return fd_dynamics_first(model, window, u, eps)
        f_x, f_u = out
        return np.asarray(f_x, dtype=float), np.asarray(f_u, dtype=float)

    return jac


def fd_dynamics_second(model: DynamicsModel, window: DelayWindow, u, eps: float = DEFAULT_EPS):
    """(f_xx, f_xu, f_uu) by differencing the first-derivative routine.

    The slot-pair symmetry f_xx[j, l, p] = f_xx[l, j, p].T is enforced by
    averaging.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    u = np.asarray(u, dtype=float)
    kp1, n = window.states.shape
    m = u.shape[0]
    jac = _jacobian_fn(model, eps)

    f_xx = np.empty((kp1, kp1, n, n, n))
    hx = _step_sizes(window.states, eps)
    for l in range(kp1):
        for b in range(n):
            h = hx[l, b]
            fx_p, _ = jac(_bump_window(window, l, b, +h), u)
            fx_m, _ = jac(_bump_window(window, l, b, -h), u)
            # d/dx_l[b] of f_x[j, p, a]
            f_xx[:, l, :, :, b] = (fx_p - fx_m) / (2.0 * h)

    # mixed blocks from the control side: d/du[c] of f_x[j, p, a]
    f_xu = np.empty((kp1, n, n, m))
    hu = _step_sizes(u, eps)
    for c in range(m):
        du = np.zeros(m)
        du[c] = hu[c]
        fx_p, _ = jac(window, u + du)
        fx_m, _ = jac(window, u - du)
        f_xu[:, :, :, c] = (fx_p - fx_m) / (2.0 * hu[c])

    f_uu = np.empty((n, m, m))
    for c in range(m):
        du = np.zeros(m)
        du[c] = hu[c]
        _, fu_p = jac(window, u + du)
        _, fu_m = jac(window, u - du)
        f_uu[:, :, c] = (fu_p - fu_m) / (2.0 * hu[c])

    f_xx = symmetrize_dynamics_grid(f_xx)
    f_uu = 0.5 * (f_uu + np.transpose(f_uu, (0, 2, 1)))
    return f_xx, f_xu, f_uu


def symmetrize_dynamics_grid(f_xx: np.ndarray) -> np.ndarray:
    """Average f_xx with its (j, l)-swapped, per-component transpose."""
    return 0.5 * (f_xx + np.transpose(f_xx, (1, 0, 2, 4, 3)))


def symmetrize_cost_grid(L_xx: np.ndarray) -> np.ndarray:
    return 0.5 * (L_xx + np.transpose(L_xx, (1, 0, 3, 2)))


def _scalar_gradient(fun, window: DelayWindow, u: np.ndarray, eps: float):
    kp1, n = window.states.shape
    m = u.shape[0]
    g_x = np.empty((kp1, n))
    hx = _step_sizes(window.states, eps)
    for j in range(kp1):
        for c in range(n):
            h = hx[j, c]
            g_x[j, c] = (
                fun(_bump_window(window, j, c, +h), u)
                - fun(_bump_window(window, j, c, -h), u)
            ) / (2.0 * h)
    g_u = np.empty(m)
    hu = _step_sizes(u, eps)
    for c in range(m):
        du = np.zeros(m)
        du[c] = hu[c]
        g_u[c] = (fun(window, u + du) - fun(window, u - du)) / (2.0 * hu[c])
    return g_x, g_u


def fd_cost(cost: CostModel, i: int, window: DelayWindow, u, eps: float = DEFAULT_EPS):
    """(L_x, L_u, L_xx, L_xu, L_uu) of the running cost by central differences."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    u = np.asarray(u, dtype=float)
    kp1, n = window.states.shape
    m = u.shape[0]

    def fun(w, uu):
        return float(cost.running(i, w, uu))

    def grad(w, uu):
        out = cost.running_gradients(i, w, uu)
        if out is None:
            return _scalar_gradient(fun, w, uu, eps)
        g_x, g_u = out
        return np.asarray(g_x, dtype=float), np.asarray(g_u, dtype=float)

    L_x, L_u = grad(window, u)

    L_xx = np.empty((kp1, kp1, n, n))
    L_xu = np.empty((kp1, n, m))
    hx = _step_sizes(window.states, eps)
    for l in range(kp1):
        for b in range(n):
            h = hx[l, b]
            gx_p, _ = grad(_bump_window(window, l, b, +h), u)
            gx_m, _ = grad(_bump_window(window, l, b, -h), u)
            L_xx[:, l, :, b] = (gx_p - gx_m) / (2.0 * h)
    hu = _step_sizes(u, eps)
    for c in range(m):
        du = np.zeros(m)
        du[c] = hu[c]
        gx_p, gu_p = grad(window, u + du)
        gx_m, gu_m = grad(window, u - du)
        L_xu[:, :, c] = (gx_p - gx_m) / (2.0 * hu[c])
        if c == 0:
            L_uu = np.empty((m, m))
        L_uu[:, c] = (gu_p - gu_m) / (2.0 * hu[c])

    L_xx = symmetrize_cost_grid(L_xx)
    L_uu = 0.5 * (L_uu + L_uu.T)
    return L_x, L_u, L_xx, L_xu, L_uu


def fd_terminal_cost(cost: CostModel, window: DelayWindow, eps: float = DEFAULT_EPS):
    """(L_x, L_xx) of the terminal cost by central differences."""
    kp1, n = window.states.shape

    def fun(w):
        return float(cost.terminal(w))

    def grad(w):
        out = cost.terminal_gradients(w)
        if out is None:
            g = np.empty((kp1, n))
            hx = _step_sizes(w.states, eps)
            for j in range(kp1):
                for c in range(n):
                    h = hx[j, c]
                    g[j, c] = (
                        fun(_bump_window(w, j, c, +h)) - fun(_bump_window(w, j, c, -h))
                    ) / (2.0 * h)
            return g
        return np.asarray(out, dtype=float)

    L_x = grad(window)
    L_xx = np.empty((kp1, kp1, n, n))
    hx = _step_sizes(window.states, eps)
    for l in range(kp1):
        for b in range(n):
            h = hx[l, b]
            gp = grad(_bump_window(window, l, b, +h))
            gm = grad(_bump_window(window, l, b, -h))
            L_xx[:, l, :, b] = (gp - gm) / (2.0 * h)
    return L_x, symmetrize_cost_grid(L_xx)


def dynamics_derivatives(
    model: DynamicsModel,
    window: DelayWindow,
    u,
    second_order: bool = False,
    eps: float = DEFAULT_EPS,
):
    """First (and optionally second) dynamics derivatives, analytic when the
    model provides them."""
    u = np.asarray(u, dtype=float)
    out = model.jacobians(window, u)
    if out is None:
        f_x, f_u = fd_dynamics_first(model, window, u, eps)
    else:
        f_x, f_u = (np.asarray(a, dtype=float) for a in out)
    if not second_order:
        return f_x, f_u, None, None, None
    out2 = model.hessians(window, u)
    if out2 is None:
        f_xx, f_xu, f_uu = fd_dynamics_second(model, window, u, eps)
    else:
        f_xx, f_xu, f_uu = (np.asarray(a, dtype=float) for a in out2)
    return f_x, f_u, f_xx, f_xu, f_uu


def cost_derivatives(cost: CostModel, i: int, window: DelayWindow, u, eps: float = DEFAULT_EPS):
    """Running-cost derivatives, analytic when the cost provides them."""
    u = np.asarray(u, dtype=float)
    grads = cost.running_gradients(i, window, u)
    hess = cost.running_hessians(i, window, u)
    if grads is None or hess is None:
        return fd_cost(cost, i, window, u, eps)
    L_x, L_u = (np.asarray(a, dtype=float) for a in grads)
    L_xx, L_xu, L_uu = (np.asarray(a, dtype=float) for a in hess)
    return L_x, L_u, L_xx, L_xu, L_uu


def terminal_cost_derivatives(cost: CostModel, window: DelayWindow, eps: float = DEFAULT_EPS):
    grads = cost.terminal_gradients(window)
    hess = cost.terminal_hessians(window)
    if grads is None or hess is None:
        return fd_terminal_cost(cost, window, eps)
    return np.asarray(grads, dtype=float), np.asarray(hess, dtype=float)


def compute_bundle(
    model: DynamicsModel,
    cost: CostModel,
    i: int,
    window: DelayWindow,
    u,
    second_order: bool = False,
    eps: float = DEFAULT_EPS,
) -> DerivativeBundle:
    """Assemble the full derivative bundle at one timestep."""
    f_x, f_u, f_xx, f_xu, f_uu = dynamics_derivatives(
        model, window, u, second_order=second_order, eps=eps
    )
    L_x, L_u, L_xx, L_xu, L_uu = cost_derivatives(cost, i, window, u, eps)
    bundle = DerivativeBundle(
        f_x=f_x, f_u=f_u, L_x=L_x, L_u=L_u, L_xx=L_xx, L_xu=L_xu, L_uu=L_uu,
        f_xx=f_xx, f_xu=f_xu, f_uu=f_uu,
    )
    for name in ("f_x", "f_u", "L_x", "L_u", "L_xx", "L_xu", "L_uu"):
        if not np.all(np.isfinite(getattr(bundle, name))):
            raise FloatingPointError(f"non-finite entries in {name} at timestep {i}")
    return bundle


def _block_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"block shapes differ: {a.shape} vs {b.shape}")
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom))


@dataclass
class DerivativeReport:
    """Per-block maximum relative errors between two derivative bundles."""

    errors: dict[str, float]
    rel_tol: float
    failed_blocks: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failed_blocks

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def as_table(self) -> str:
        width = max(len(name) for name in self.errors)
        lines = [f"{'block'.ljust(width)}  {'max rel err':>12}  status"]
        for name, err in self.errors.items():
            status = "FAIL" if name in self.failed_blocks else "ok"
            lines.append(f"{name.ljust(width)}  {err:12.3e}  {status}")
        return "\n".join(lines)


def check_derivatives(
    analytic: DerivativeBundle, numeric: DerivativeBundle, rel_tol: float
) -> DerivativeReport:
    """Compare two bundles entrywise: |a - b| / max(1, |a|, |b|) per block."""
    errors: dict[str, float] = {}
    kp1 = analytic.f_x.shape[0]
    for j in range(kp1):
        errors[f"f_x[{j}]"] = _block_error(analytic.f_x[j], numeric.f_x[j])
    errors["f_u"] = _block_error(analytic.f_u, numeric.f_u)
    for j in range(kp1):
        errors[f"L_x[{j}]"] = _block_error(analytic.L_x[j], numeric.L_x[j])
    errors["L_u"] = _block_error(analytic.L_u, numeric.L_u)
    errors["L_xx"] = _block_error(analytic.L_xx, numeric.L_xx)
    errors["L_xu"] = _block_error(analytic.L_xu, numeric.L_xu)
    errors["L_uu"] = _block_error(analytic.L_uu, numeric.L_uu)
    if analytic.second_order_dynamics_present and numeric.second_order_dynamics_present:
        errors["f_xx"] = _block_error(analytic.f_xx, numeric.f_xx)
        errors["f_xu"] = _block_error(analytic.f_xu, numeric.f_xu)
        errors["f_uu"] = _block_error(analytic.f_uu, numeric.f_uu)
    failed = [name for name, err in errors.items() if err > rel_tol]
    return DerivativeReport(errors=errors, rel_tol=rel_tol, failed_blocks=failed)
