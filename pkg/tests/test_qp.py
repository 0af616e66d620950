"""QP solver tests: small analytic cases, infeasibility handling, and
equivalence against the exhaustive active-set enumeration oracle."""

import numpy as np
import pytest

from caccsim import qp
from caccsim.qp import QProblem
from qp_oracle import brute_force_objective, random_problem


class TestSimpleCases:
    def test_interior_optimum(self):
        # minimize (u - 1)^2 with -4 <= u <= 3
        problem = QProblem(quadratic=np.array([[2.0]]),
                           linear=np.array([-2.0]),
                           ineq_matrix=np.array([[1.0], [-1.0]]),
                           ineq_rhs=np.array([3.0, 4.0]))
        sol = qp.solve(problem)
        assert sol.x[0] == pytest.approx(1.0, abs=1e-9)
        assert sol.status == qp.STATUS_OPTIMAL
        assert sol.kkt_residual <= 1e-6

    def test_active_bound(self):
        # minimize u^2 with 2 <= u <= 3
        problem = QProblem(quadratic=np.array([[2.0]]),
                           linear=np.array([0.0]),
                           ineq_matrix=np.array([[1.0], [-1.0]]),
                           ineq_rhs=np.array([3.0, -2.0]))
        sol = qp.solve(problem)
        assert sol.x[0] == pytest.approx(2.0, abs=1e-9)
        assert sol.ineq_multipliers[1] > 0.0

    def test_equality_constrained(self):
        # minimize x'x subject to x0 + x1 = 2 -> (1, 1)
        problem = QProblem(quadratic=2.0 * np.eye(2),
                           linear=np.zeros(2),
                           ineq_matrix=np.zeros((0, 2)),
                           ineq_rhs=np.zeros(0),
                           eq_matrix=np.array([[1.0, 1.0]]),
                           eq_rhs=np.array([2.0]))
        sol = qp.solve(problem)
        assert np.allclose(sol.x, [1.0, 1.0], atol=1e-9)
        assert sol.kkt_residual <= 1e-6

    def test_infeasible_raises_without_relaxable(self):
        problem = QProblem(quadratic=np.array([[2.0]]),
                           linear=np.array([0.0]),
                           ineq_matrix=np.array([[1.0], [-1.0]]),
                           ineq_rhs=np.array([1.0, -2.0]))
        with pytest.raises(qp.QPInfeasibleError):
            qp.solve(problem)

    def test_infeasible_relaxed_when_marked(self):
        # x <= 1 (relaxable) conflicts with x >= 2 (hard): expect x near 2.
        problem = QProblem(quadratic=np.array([[2.0]]),
                           linear=np.array([0.0]),
                           ineq_matrix=np.array([[1.0], [-1.0]]),
                           ineq_rhs=np.array([1.0, -2.0]),
                           relaxable=np.array([True, False]))
        sol = qp.solve(problem)
        assert sol.status == qp.STATUS_RELAXED
        assert sol.x[0] == pytest.approx(2.0, abs=1e-4)

    def test_inconsistent_equalities_detected(self):
        problem = QProblem(quadratic=np.eye(2), linear=np.zeros(2),
                           ineq_matrix=np.zeros((0, 2)), ineq_rhs=np.zeros(0),
                           eq_matrix=np.array([[1.0, 0.0], [1.0, 0.0]]),
                           eq_rhs=np.array([1.0, 2.0]))
        with pytest.raises(qp.QPInfeasibleError):
            qp.solve(problem)


class TestOracleEquivalence:
    def test_matches_bruteforce_on_random_problems(self):
        rng = np.random.default_rng(2024)
        checked = 0
        while checked < 200:
            n = int(rng.integers(1, 9))
            m = int(rng.integers(1, 17))
            p_eq = int(rng.integers(0, max(1, n - 1) + 1)) if n > 1 else 0
            problem = random_problem(rng, n, m, p_eq)
            oracle = brute_force_objective(problem)
            if oracle is None:
                continue
            sol = qp.solve(problem)
            scale = 1.0 + abs(oracle)
            assert abs(sol.objective - oracle) <= 1e-6 * scale
            assert sol.kkt_residual <= 1e-6
            checked += 1

    def test_deterministic_repeat(self):
        rng = np.random.default_rng(5)
        problem = random_problem(rng, 6, 10, 2)
        a = qp.solve(problem)
        b = qp.solve(problem)
        assert np.array_equal(a.x, b.x)
        assert a.objective == b.objective


class TestKKTResiduals:
    def test_residuals_tight_on_random_problems(self):
        rng = np.random.default_rng(77)
        for _ in range(50):
            n = int(rng.integers(2, 9))
            m = int(rng.integers(2, 17))
            problem = random_problem(rng, n, m, 0)
            sol = qp.solve(problem)
            res = qp.kkt_residuals(problem, sol.x, sol.eq_multipliers,
                                   sol.ineq_multipliers)
            assert res.max() <= 1e-6

    def test_candidate_point_residuals(self):
        problem = QProblem(quadratic=np.array([[2.0]]),
                           linear=np.array([-2.0]),
                           ineq_matrix=np.array([[1.0]]),
                           ineq_rhs=np.array([3.0]))
        res = qp.kkt_residuals(problem, np.array([0.0]), np.zeros(0),
                               np.zeros(1))
        assert res.stationarity == pytest.approx(2.0)
        assert res.primal == 0.0
