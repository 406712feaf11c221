import numpy as np
import pytest
import sympy as sp

from delayddp import DelayWindow, QuadraticCost
from delayddp.core import DynamicsModel
from delayddp.deriv import (
    check_derivatives,
    compute_bundle,
    fd_cost,
    fd_dynamics_first,
    fd_dynamics_second,
    fd_terminal_cost,
    symmetrize_cost_grid,
    symmetrize_dynamics_grid,
)
from delayddp.models import CSTR_X0, CstrModel, LinearDelayedModel, augment


class ScalarQuadModel(DynamicsModel):
    """f = x^2 * u with n = m = 1, k = 0."""

    n = m = 1
    k = 0

    def step(self, window, u):
        return np.array([window.states[0, 0] ** 2 * u[0]])


class DelayedSquareModel(DynamicsModel):
    """f = x_{i-1}^2 with n = 1, k = 1."""

    n = m = 1
    k = 1

    def step(self, window, u):
        return np.array([window.states[1, 0] ** 2])


class ConstantModel(DynamicsModel):
    n = 2
    m = 1
    k = 1

    def step(self, window, u):
        return np.array([3.0, -1.0])


class SmoothToyModel(DynamicsModel):
    """Analytic nonlinearity for convergence-order checks."""

    n = 1
    m = 1
    k = 0

    def step(self, window, u):
        x = window.states[0, 0]
        return np.array([np.sin(1.3 * x) + np.exp(0.5 * x) * u[0]])


class TestDynamicsFirst:
    def test_linear_model_is_machine_exact(self):
        rng = np.random.default_rng(0)
        A = rng.normal(size=(2, 3, 3))
        B = rng.normal(size=(3, 2))
        model = LinearDelayedModel(A, B)
        w = DelayWindow(rng.normal(size=(2, 3)))
        f_x, f_u = fd_dynamics_first(model, w, rng.normal(size=2))
        assert np.allclose(f_x, A, atol=1e-8)
        assert np.allclose(f_u, B, atol=1e-8)

    def test_constant_model_has_zero_jacobians(self):
        model = ConstantModel()
        f_x, f_u = fd_dynamics_first(model, DelayWindow(np.ones((2, 2))), np.ones(1))
        assert np.allclose(f_x, 0) and np.allclose(f_u, 0)

    def test_rejects_nonpositive_eps(self):
        model = ConstantModel()
        with pytest.raises(ValueError):
            fd_dynamics_first(model, DelayWindow(np.ones((2, 2))), np.ones(1), eps=0)

    def test_cstr_jacobian_matches_symbolic_differentiation(self):
        # independent oracle: differentiate the reactor equations with sympy
        dt = 0.05
        x = sp.symbols("x0:4")
        xd = sp.symbols("xd0:2")
        u = sp.symbols("u0:2")
        r1 = (x[0] + sp.Rational(1, 2)) * sp.exp(25 * x[1] / (x[1] + 2))
        r2 = (x[2] + sp.Rational(1, 4)) * sp.exp(25 * x[3] / (x[3] + 2))
        g = sp.Matrix([
            sp.Rational(1, 2) - x[0] - r1,
            -2 * (x[1] + sp.Rational(1, 4)) - u[0] * (x[1] + sp.Rational(1, 4)) + r1,
            xd[0] - x[2] - r2 + sp.Rational(1, 4),
            xd[1] - 2 * x[3] - u[1] * (x[3] + sp.Rational(1, 4)) + r2 - sp.Rational(1, 4),
        ])
        f = sp.Matrix(x) + dt * g
        subs = {x[i]: CSTR_X0[i] for i in range(4)}
        subs.update({xd[0]: CSTR_X0[0], xd[1]: CSTR_X0[1], u[0]: 0.0, u[1]: 0.0})
        J_cur = np.array(f.jacobian(x).subs(subs), dtype=float)
        J_del4 = np.zeros((4, 4))
        J_del4[:, :2] = np.array(f.jacobian(xd).subs(subs), dtype=float)
        J_u = np.array(f.jacobian(u).subs(subs), dtype=float)

        model = CstrModel()
        w = DelayWindow.constant(CSTR_X0, model.k)
        f_x, f_u = fd_dynamics_first(model, w, np.zeros(2))
        assert np.abs(f_x[0] - J_cur).max() < 1e-6
        assert np.abs(f_x[model.k] - J_del4).max() < 1e-6
        assert np.abs(f_u - J_u).max() < 1e-6
        # the analytic jacobians the model ships must agree even tighter
        fa_x, fa_u = model.jacobians(w, np.zeros(2))
        assert np.abs(fa_x[0] - J_cur).max() < 1e-12
        assert np.abs(fa_x[model.k] - J_del4).max() < 1e-12
        assert np.abs(fa_u - J_u).max() < 1e-12
        # intermediate slots carry no dependence
        assert np.allclose(f_x[1 : model.k], 0, atol=1e-8)


class TestDynamicsSecond:
    def test_linear_model_has_zero_tensors(self):
        rng = np.random.default_rng(1)
        model = LinearDelayedModel(rng.normal(size=(2, 2, 2)), rng.normal(size=(2, 1)))
        w = DelayWindow(rng.normal(size=(2, 2)))
        f_xx, f_xu, f_uu = fd_dynamics_second(model, w, rng.normal(size=1))
        assert np.abs(f_xx).max() < 1e-6
        assert np.abs(f_xu).max() < 1e-6
        assert np.abs(f_uu).max() < 1e-6

    def test_scalar_quadratic_model(self):
        model = ScalarQuadModel()
        w = DelayWindow(np.array([[0.7]]))
        u = np.array([-1.3])
        f_xx, f_xu, f_uu = fd_dynamics_second(model, w, u)
        assert f_xx[0, 0, 0, 0, 0] == pytest.approx(2 * u[0], rel=1e-6)
        assert f_xu[0, 0, 0, 0] == pytest.approx(2 * 0.7, rel=1e-6)
        assert abs(f_uu[0, 0, 0]) < 1e-6

    def test_delayed_square_model(self):
        model = DelayedSquareModel()
        w = DelayWindow(np.array([[0.3], [0.9]]))
        f_xx, f_xu, f_uu = fd_dynamics_second(model, w, np.zeros(1))
        assert f_xx[1, 1, 0, 0, 0] == pytest.approx(2.0, rel=1e-6)
        assert abs(f_xx[0, 0, 0, 0, 0]) < 1e-6
        assert abs(f_xx[0, 1, 0, 0, 0]) < 1e-6
        assert np.abs(f_xu).max() < 1e-6

    def test_grid_symmetry_is_enforced(self):
        rng = np.random.default_rng(2)
        model = DelayedSquareModel()
        w = DelayWindow(rng.normal(size=(2, 1)))
        f_xx, _, f_uu = fd_dynamics_second(model, w, rng.normal(size=1))
        assert np.allclose(f_xx, np.transpose(f_xx, (1, 0, 2, 4, 3)))
        assert np.allclose(f_uu, np.transpose(f_uu, (0, 2, 1)))


class TestCostDerivatives:
    def test_quadratic_cost_blocks(self):
        rng = np.random.default_rng(3)
        P = np.diag([1.0, 3.0])
        R = np.diag([0.2])
        cost = QuadraticCost(P, R)

        class Hidden(QuadraticCost):
            # hide analytic derivatives to exercise the fd path
            def running_gradients(self, i, window, u):
                return None

            def running_hessians(self, i, window, u):
                return None

        hidden = Hidden(P, R)
        w = DelayWindow(rng.normal(size=(3, 2)))
        u = rng.normal(size=1)
        L_x, L_u, L_xx, L_xu, L_uu = fd_cost(hidden, 0, w, u)
        assert np.allclose(L_x, w.states @ P, atol=1e-7)
        assert np.allclose(L_u, R @ u, atol=1e-7)
        # Hessians difference the fd gradient, so roundoff noise is larger
        for j in range(3):
            for l in range(3):
                expected = P if j == l else np.zeros((2, 2))
                assert np.allclose(L_xx[j, l], expected, atol=1e-5)
        assert np.allclose(L_xu, 0, atol=1e-5)
        assert np.allclose(L_uu, R, atol=1e-5)

    def test_zero_cost_gives_zeros(self):
        class ZeroCost(QuadraticCost):
            def __init__(self):
                super().__init__(np.zeros((2, 2)), np.zeros((1, 1)))

        out = fd_cost(ZeroCost(), 0, DelayWindow(np.ones((2, 2))), np.ones(1))
        assert all(np.abs(a).max() < 1e-9 for a in out)

    def test_cstr_control_gradient_hand_value(self):
        cost = QuadraticCost(np.eye(4), 0.1 * np.eye(2))
        w = DelayWindow.constant(CSTR_X0, 10)
        u = np.array([0.1, 0.1])
        L_x, L_u, *_ = fd_cost(cost, 0, w, u)
        assert np.allclose(L_u, [0.01, 0.01], atol=1e-9)

    def test_terminal_derivatives(self):
        rng = np.random.default_rng(4)
        P = np.eye(2)
        cost = QuadraticCost(P, np.eye(1))
        w = DelayWindow(rng.normal(size=(2, 2)))
        L_x, L_xx = fd_terminal_cost(cost, w)
        assert np.allclose(L_x, w.states @ P)
        assert np.allclose(L_xx[0, 0], P) and np.allclose(L_xx[0, 1], 0)


class TestCheckDerivatives:
    def _bundle(self, seed=0):
        rng = np.random.default_rng(seed)
        model = LinearDelayedModel(rng.normal(size=(2, 2, 2)), rng.normal(size=(2, 1)))
        cost = QuadraticCost(np.eye(2), np.eye(1))
        w = DelayWindow(rng.normal(size=(2, 2)))
        return compute_bundle(model, cost, 0, w, rng.normal(size=1))

    def test_identical_bundles_pass_with_zero_error(self):
        b = self._bundle()
        report = check_derivatives(b, b, rel_tol=1e-12)
        assert report.passed
        assert report.max_error == 0.0

    def test_single_perturbed_entry_flags_its_block(self):
        a = self._bundle()
        b = self._bundle()
        b.f_x = a.f_x.copy()
        b.f_x[1, 0, 1] += 1e-3
        report = check_derivatives(a, b, rel_tol=1e-6)
        assert "f_x[1]" in report.failed_blocks
        assert "f_x[0]" not in report.failed_blocks

    def test_table_renders(self):
        b = self._bundle()
        table = check_derivatives(b, b, 1e-9).as_table()
        assert "f_u" in table and "ok" in table


class TestProperties:
    def test_central_difference_order_two_convergence(self):
        # halving eps shrinks the truncation error roughly 4x
        model = SmoothToyModel()
        w = DelayWindow(np.array([[0.4]]))
        u = np.array([0.6])
        exact = 1.3 * np.cos(1.3 * 0.4) + 0.5 * np.exp(0.5 * 0.4) * 0.6
        errs = []
        for eps in (2e-3, 1e-3, 5e-4):
            f_x, _ = fd_dynamics_first(model, w, u, eps=eps)
            errs.append(abs(f_x[0, 0, 0] - exact))
        for a, b in zip(errs, errs[1:]):
            assert 2.5 < a / b < 6.0

    def test_symmetrization_is_idempotent(self):
        rng = np.random.default_rng(5)
        grid = rng.normal(size=(3, 3, 2, 2))
        once = symmetrize_cost_grid(grid)
        assert np.allclose(once, symmetrize_cost_grid(once))
        sym = symmetrize_cost_grid(rng.normal(size=(2, 2, 3, 3)))
        assert np.array_equal(sym, symmetrize_cost_grid(sym))
        tensor = rng.normal(size=(2, 2, 1, 3, 3))
        once_t = symmetrize_dynamics_grid(tensor)
        assert np.allclose(once_t, symmetrize_dynamics_grid(once_t))

    def test_augmented_jacobian_top_strip_matches_delayed_blocks(self):
        rng = np.random.default_rng(6)
        model = LinearDelayedModel(rng.normal(size=(3, 2, 2)), rng.normal(size=(2, 1)))
        aug = augment(model)
        w = DelayWindow(rng.normal(size=(3, 2)))
        z = DelayWindow(w.stacked()[None, :])
        u = rng.normal(size=1)
        A_strip = fd_dynamics_first(aug, z, u)[0][0][:2]
        f_x, _ = fd_dynamics_first(model, w, u)
        expected = np.hstack([f_x[j] for j in range(3)])
        assert np.allclose(A_strip, expected, atol=1e-7)
