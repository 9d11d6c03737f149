import numpy as np
import pytest

from src.Tools.exceptions import DegenerateData, FitInfeasible
from src.convex_backend import (
    INFEASIBLE,
    OPTIMAL,
    ConicProblem,
    fit_quadratic_upper_bound,
    min_volume_covering_ellipsoid,
    quadratic_values,
    solve_sdp,
    solver_options,
)
from src.Tools.config import Config
from src.shape_synthesis import input_containment_block, state_containment_block


class TestSolveSdp:
    def test_feasibility_problem(self):
        problem = ConicProblem("interval")
        q = problem.symmetric("q", 1)
        problem.add(q >= 1)
        problem.add_psd(2 * np.eye(1) - q)
        solution = solve_sdp(problem)
        assert solution.status == OPTIMAL
        assert 1 - 1e-6 <= solution["q"].item() <= 2 + 1e-6

    def test_logdet_attains_bound(self):
        problem = ConicProblem("logdet")
        E = problem.symmetric("E", 1)
        problem.add_psd(np.eye(1) - E, "bound")
        problem.maximize_logdet(E)
        solution = solve_sdp(problem)
        assert solution.optimal
        assert solution["E"].item() == pytest.approx(1.0, abs=1e-5)

    def test_scalar_safe_level(self):
        problem = ConicProblem("scalar")
        gamma = problem.scalar("gamma")
        Y = problem.matrix("Y", 1, 1)
        E = np.eye(1)
        problem.add(gamma <= 4)
        problem.add_nsd(2 * gamma * np.eye(1) + 2 * Y, "decrease")
        problem.add_psd(input_containment_block([1.0], 2.0, Y, E, gamma), "input")
        problem.maximize(gamma)
        solution = solve_sdp(problem)
        assert solution.optimal
        assert solution["gamma"].item() == pytest.approx(4.0, abs=1e-4)
        assert solution["Y"].item() == pytest.approx(-4.0, abs=1e-3)

    def test_infeasible(self):
        problem = ConicProblem("infeasible")
        q = problem.scalar("q")
        problem.add([q >= 2, q <= 1])
        assert solve_sdp(problem).status == INFEASIBLE

    def test_duplicate_variable_name(self):
        problem = ConicProblem()
        problem.scalar("a")
        with pytest.raises(ValueError):
            problem.scalar("a")

    def test_tolerances_reach_solvers(self, tmp_path):
        ini = tmp_path / "tol.ini"
        ini.write_text("[Solver Parameters]\nGAP_TOL = 1e-9\nSOLVER_FEAS_TOL = 1e-10\n", encoding="utf-8")
        config = Config(ini)
        assert solver_options("CLARABEL", config) == {"tol_gap_abs": 1e-9, "tol_gap_rel": 1e-9, "tol_feas": 1e-10}
        assert solver_options("SCS", config) == {"eps_abs": 1e-10, "eps_rel": 1e-9}
        assert solver_options("ECOS", config) == {}


class TestStateBlock:
    def test_block_encodes_support(self):
        # γ·aEaᵀ ≤ b²：E=1, b=2 时 γ 最大为 4
        problem = ConicProblem("state")
        gamma = problem.scalar("gamma")
        problem.add_psd(state_containment_block([1.0], 2.0, np.eye(1), gamma))
        problem.add(gamma <= 10)
        problem.maximize(gamma)
        assert solve_sdp(problem)["gamma"].item() == pytest.approx(4.0, abs=1e-4)


class TestQuadraticFit:
    def test_exact_interpolation(self):
        Q = fit_quadratic_upper_bound([[1.0], [2.0]], [1.0, 4.0])
        assert Q[0, 0] == pytest.approx(1.0, abs=1e-5)

    def test_zero_targets(self):
        Q = fit_quadratic_upper_bound([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]], [0.0, 0.0, 0.0])
        np.testing.assert_allclose(Q, np.zeros((2, 2)), atol=1e-6)

    def test_active_constraint(self):
        Q = fit_quadratic_upper_bound([[1.0], [2.0]], [1.0, 8.0])
        assert Q[0, 0] == pytest.approx(2.0, abs=1e-5)

    def test_zero_point_with_positive_target(self):
        with pytest.raises(FitInfeasible):
            fit_quadratic_upper_bound([[0.0]], [0.5])

    def test_upper_bound_holds_on_every_point(self):
        rng = np.random.default_rng(0)
        xs = rng.normal(size=(40, 2))
        ys = np.sin(3 * xs[:, 0]) + xs[:, 1] ** 2
        Q = fit_quadratic_upper_bound(xs, ys)
        assert np.all(ys <= quadratic_values(xs, Q) + 1e-8)
        np.testing.assert_allclose(Q, Q.T)


class TestCoveringEllipsoid:
    def test_square(self):
        points = [[1.0, 1.0], [-1.0, 1.0], [1.0, -1.0], [-1.0, -1.0]]
        np.testing.assert_allclose(min_volume_covering_ellipsoid(points), 0.5 * np.eye(2), atol=1e-4)

    def test_axis_points(self):
        points = [[2.0, 0.0], [-2.0, 0.0], [0.0, 1.0], [0.0, -1.0]]
        np.testing.assert_allclose(min_volume_covering_ellipsoid(points), np.diag([0.25, 1.0]), atol=1e-4)

    def test_degenerate(self):
        with pytest.raises(DegenerateData):
            min_volume_covering_ellipsoid([[1.0, 0.0], [-1.0, 0.0]])

    def test_scaling(self):
        points = np.random.default_rng(2).normal(size=(30, 2))
        A = min_volume_covering_ellipsoid(points)
        A2 = min_volume_covering_ellipsoid(2 * points)
        np.testing.assert_allclose(A2, A / 4, rtol=1e-3, atol=1e-5)
        assert np.max(quadratic_values(points, A)) <= 1.0 + 1e-9
