import numpy as np
import pytest

from delayddp import (
    CurrentStateQuadraticCost,
    DelayWindow,
    QuadraticCost,
    Trajectory,
    rollout,
    total_cost,
    window_at,
)
from delayddp.models import CSTR_X0, LinearDelayedModel, make_cstr_problem

# one explicit Euler step of the reactor equations from the published
# initial state with u = 0, evaluated by hand from the ODE right-hand
# sides (regression anchor, also recomputed in test_models)
CSTR_ONE_STEP = np.array([
    0.14529029335816177, -0.029790293358161777, 0.0975, 0.003499999999999998,
])
# window-summed quadratic cost of the uncontrolled 5 s rollout, computed
# by an independent inline evaluation of the same equations
CSTR_UNCONTROLLED_COST = 119.53415884525954


def random_trajectory(rng, n=2, m=1, k=2, N=6):
    return Trajectory(
        DelayWindow(rng.normal(size=(k + 1, n))),
        rng.normal(size=(N, n)),
        rng.normal(size=(N, m)),
    )


class TestDelayWindow:
    def test_shapes_and_properties(self):
        w = DelayWindow(np.arange(6.0).reshape(3, 2))
        assert w.k == 2 and w.n == 2
        assert np.array_equal(w.current, [0.0, 1.0])

    def test_shift_drops_oldest_and_preserves_order(self):
        w = DelayWindow(np.array([[1.0], [2.0], [3.0]]))
        shifted = w.shifted([9.0])
        assert np.array_equal(shifted.states, [[9.0], [1.0], [2.0]])

    def test_shift_rejects_wrong_length(self):
        w = DelayWindow(np.zeros((2, 3)))
        with pytest.raises(ValueError):
            w.shifted([1.0, 2.0])

    def test_constant_fills_all_slots(self):
        w = DelayWindow.constant([1.0, 2.0], k=3)
        assert w.states.shape == (4, 2)
        assert np.all(w.states == [1.0, 2.0])

    def test_states_are_write_locked(self):
        w = DelayWindow(np.zeros((2, 2)))
        with pytest.raises(ValueError):
            w.states[0, 0] = 1.0


class TestWindowAt:
    def test_index_zero_is_exactly_the_initial_window(self):
        rng = np.random.default_rng(0)
        traj = random_trajectory(rng)
        assert np.array_equal(window_at(traj, 0).states, traj.initial_window.states)

    def test_no_delay_degenerate_case(self):
        rng = np.random.default_rng(1)
        traj = random_trajectory(rng, k=0, N=6)
        w = traj.window_at(5)
        assert w.states.shape == (1, 2)
        assert np.array_equal(w.states[0], traj.states[4])

    def test_mixed_fixed_and_computed_boundary(self):
        rng = np.random.default_rng(2)
        traj = random_trajectory(rng, k=2, N=4)
        w = traj.window_at(1)
        assert np.array_equal(w.states[0], traj.states[0])          # x_1
        assert np.array_equal(w.states[1], traj.initial_window.states[0])  # x_0
        assert np.array_equal(w.states[2], traj.initial_window.states[1])  # x_-1

    def test_out_of_range(self):
        rng = np.random.default_rng(3)
        traj = random_trajectory(rng, N=4)
        with pytest.raises(IndexError):
            traj.window_at(5)
        with pytest.raises(IndexError):
            traj.window_at(-1)

    def test_rollout_window_consistency(self):
        # window_at(i), one step, shift-in == window_at(i+1) on a rollout
        rng = np.random.default_rng(4)
        model = LinearDelayedModel(rng.normal(0, 0.2, (3, 2, 2)), rng.normal(size=(2, 1)))
        w0 = DelayWindow(rng.normal(size=(3, 2)))
        controls = rng.normal(size=(8, 1))
        traj = rollout(model, w0, controls)
        for i in range(traj.N):
            w = traj.window_at(i)
            x_next = model.step(w, controls[i])
            assert np.array_equal(w.shifted(x_next).states, traj.window_at(i + 1).states)


class TestTotalCost:
    def test_zero_trajectory_costs_nothing(self):
        cost = QuadraticCost(np.eye(2), np.eye(1))
        traj = Trajectory(DelayWindow(np.zeros((2, 2))), np.zeros((5, 2)), np.zeros((5, 1)))
        assert total_cost(cost, traj) == 0.0

    def test_hand_evaluated_single_step(self):
        # N=1, k=0: 1/2*1 + 1/2*0.1*4 + 0 = 0.7
        cost = QuadraticCost(np.array([[1.0]]), np.array([[0.1]]))
        traj = Trajectory(DelayWindow(np.array([[1.0]])), np.array([[0.0]]), np.array([[2.0]]))
        assert total_cost(cost, traj) == pytest.approx(0.7, abs=1e-15)

    def test_cstr_uncontrolled_cost_is_finite_positive(self):
        prob = make_cstr_problem()
        traj = rollout(prob.model, prob.initial_window, prob.u_init)
        J = total_cost(prob.cost, traj)
        assert np.isfinite(J) and J > 0
        assert J == pytest.approx(CSTR_UNCONTROLLED_COST, rel=1e-12)

    def test_purity(self):
        rng = np.random.default_rng(5)
        cost = QuadraticCost(np.eye(2), np.eye(1))
        traj = random_trajectory(rng)
        assert total_cost(cost, traj) == total_cost(cost, traj)

    def test_window_cost_invariant_under_slot_reordering(self):
        rng = np.random.default_rng(6)
        cost = QuadraticCost(rng.normal(size=(2, 2)) @ np.eye(2) * 0 + np.eye(2), np.eye(1))
        states = rng.normal(size=(4, 2))
        u = rng.normal(size=1)
        w1 = DelayWindow(states)
        w2 = DelayWindow(states[::-1])
        assert cost.running(0, w1, u) == pytest.approx(cost.running(0, w2, u), rel=1e-14)


class TestQuadraticCost:
    def test_rejects_asymmetric_weight(self):
        with pytest.raises(ValueError):
            QuadraticCost(np.array([[1.0, 0.5], [0.0, 1.0]]), np.eye(1))

    def test_rejects_indefinite_weight(self):
        with pytest.raises(ValueError):
            QuadraticCost(np.array([[-1.0]]), np.eye(1))

    def test_analytic_gradients_match_definition(self):
        rng = np.random.default_rng(7)
        P = np.diag([1.0, 2.0])
        cost = QuadraticCost(P, 0.5 * np.eye(1))
        w = DelayWindow(rng.normal(size=(3, 2)))
        u = rng.normal(size=1)
        L_x, L_u = cost.running_gradients(0, w, u)
        assert np.allclose(L_x, w.states @ P)
        assert np.allclose(L_u, 0.5 * u)

    def test_current_slot_variant_ignores_history(self):
        rng = np.random.default_rng(8)
        cost = CurrentStateQuadraticCost(np.eye(2), np.eye(1))
        x = rng.normal(size=2)
        w1 = DelayWindow(np.vstack([x, rng.normal(size=(2, 2))]))
        w2 = DelayWindow(np.vstack([x, rng.normal(size=(2, 2))]))
        u = rng.normal(size=1)
        assert cost.running(0, w1, u) == pytest.approx(cost.running(0, w2, u))


def test_cstr_one_step_regression():
    prob = make_cstr_problem()
    x1 = prob.model.step(prob.initial_window, np.zeros(2))
    assert np.allclose(x1, CSTR_ONE_STEP, rtol=0, atol=1e-15)
