import math

import numpy as np
import pytest

from src.Tools.exceptions import NonFiniteState, OutsideSafeSet
from src.gp_bound import GpBoundConfig
from src.gp_regression import GpPrior
from src.lipschitz_bound import Interval
from src.runtime_sim import (
    ConstantPolicy,
    ExplorationSchedule,
    FilterConfig,
    LinearPolicy,
    RandomExplorationLearner,
    SignedDerivativeLearner,
    _select_new,
    explore,
    history_frame,
    safety_filter,
    simulate,
    step,
)
from src.safe_set_synthesis import SafeCertificate
from src.system_model import DataSet, LinearModel, NonlinearityOracle, Polytope, grid_points, zero_oracle
from tests.conftest import zero_bound

STABLE = LinearModel([[-1.0]], [[1.0]])
UNSTABLE = LinearModel([[1.0]], [[1.0]])


@pytest.fixture
def certificate():
    """xᵀx ≤ 4, K = −1, |x| ≤ 2, |u| ≤ 2"""
    interval = Interval(0.25, 4.0)
    return SafeCertificate(model=UNSTABLE, X=Polytope.box([2.0]), U=Polytope.box([2.0]), P=np.eye(1),
                           E=np.eye(1), gamma=4.0, Y=[[-4.0]], K=np.array([[-1.0]]), interval=interval,
                           bound=zero_bound(interval))


class TestIntegrator:
    def test_exponential_decay(self):
        x = np.array([1.0])
        for _ in range(100):
            x = step(STABLE, zero_oracle(1), x, [0.0], 0.01)
        assert x[0] == pytest.approx(math.exp(-1.0), abs=1e-8)

    def test_input_only(self):
        model = LinearModel([[0.0]], [[1.0]])
        assert step(model, zero_oracle(1), [0.3], [0.0], 0.1)[0] == pytest.approx(0.3)
        assert step(model, zero_oracle(1), [0.3], [2.0], 0.5)[0] == pytest.approx(1.3)

    def test_errors(self):
        with pytest.raises(ValueError):
            step(STABLE, zero_oracle(1), [1.0], [0.0], 0.0)
        blowup = NonlinearityOracle(fn=lambda x: x * np.inf, n=1)
        with pytest.raises(NonFiniteState):
            step(STABLE, blowup, [1.0], [0.0], 0.01)


class TestFilter:
    def test_interior_passes_desired_input(self, certificate):
        u, active = safety_filter([1.0], [0.7], certificate)
        assert not active
        np.testing.assert_allclose(u, [0.7])

    def test_boundary_shell_uses_safe_gain(self, certificate):
        u, active = safety_filter([1.99], [0.7], certificate)
        assert active
        np.testing.assert_allclose(u, [-1.99])

    def test_inadmissible_input_uses_safe_gain(self, certificate):
        u, active = safety_filter([1.0], [5.0], certificate)
        assert active
        np.testing.assert_allclose(u, [-1.0])

    def test_outside(self, certificate):
        with pytest.raises(OutsideSafeSet) as info:
            safety_filter([2.5], [0.0], certificate)
        assert info.value.level == pytest.approx(6.25)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            FilterConfig(boundary_fraction=0.0)
        with pytest.raises(ValueError):
            FilterConfig(hold_steps=0)
        assert FilterConfig().boundary_fraction == pytest.approx(0.02)


class TestSimulate:
    def test_quiet_run_never_intervenes(self, certificate):
        traj = simulate(STABLE, zero_oracle(1), certificate, ConstantPolicy([0.0]), [1.0], T=1.0, h=0.01)
        assert traj.steps == 100
        assert traj.activated_steps() == 0
        assert traj.episodes() == []
        assert traj.x[-1, 0] == pytest.approx(math.exp(-1.0), abs=1e-8)

    def test_aggressive_policy_is_overridden(self, certificate):
        traj = simulate(UNSTABLE, zero_oracle(1), certificate, ConstantPolicy([5.0]), [1.0], T=0.1, h=0.01)
        assert traj.activated_steps() == 10
        assert traj.episodes() == [(0, 10)]
        np.testing.assert_allclose(traj.x[:, 0], 1.0)
        assert traj.max_level(certificate.P) <= certificate.gamma

    def test_hold_steps(self, certificate):
        policy = lambda t, x: [5.0] if t < 0.005 else [0.0]
        traj = simulate(STABLE, zero_oracle(1), certificate, policy, [1.0], T=0.1, h=0.01,
                        cfg=FilterConfig(hold_steps=3))
        assert traj.episodes() == [(0, 3)]

    def test_start_outside(self, certificate):
        with pytest.raises(OutsideSafeSet):
            simulate(STABLE, zero_oracle(1), certificate, ConstantPolicy([0.0]), [3.0], T=0.1, h=0.01)

    def test_frame_and_csv(self, certificate, tmp_path):
        traj = simulate(STABLE, zero_oracle(1), certificate, LinearPolicy([[0.5]]), [1.0], T=0.05, h=0.01)
        frame = traj.to_frame()
        assert list(frame.columns) == ["t", "x1", "u1", "ubar1", "safety_active"]
        assert len(frame) == traj.steps + 1
        assert np.isnan(frame["u1"].iloc[-1])
        path = traj.to_csv(tmp_path / "trajectory.csv")
        assert path.read_text(encoding="utf-8").splitlines()[0] == "t,x1,u1,ubar1,safety_active"


class TestLearners:
    def test_signed_derivative_update(self):
        learner = SignedDerivativeLearner([[0.0]], [[1.0]], learning_rate=0.5, noise=0.0)
        assert learner(0.0, np.array([2.0]))[0] == pytest.approx(0.0)
        assert learner(0.05, np.array([2.0]))[0] == pytest.approx(-4.0)
        np.testing.assert_allclose(learner.K, [[-2.0]])

    def test_gain_is_clipped(self):
        learner = SignedDerivativeLearner([[0.0]], [[-1.0]], learning_rate=10.0, noise=0.0, k_max=3.0)
        learner(1.0, np.array([2.0]))
        np.testing.assert_allclose(learner.K, [[3.0]])

    def test_random_exploration_is_bounded(self):
        learner = RandomExplorationLearner([[-1.0]], amplitude=0.2, seed=1)
        values = np.array([learner(0.0, np.array([1.0]))[0] for _ in range(200)])
        assert np.all(np.abs(values + 1.0) <= 0.2)


class TestExploration:
    def test_select_new(self):
        existing = np.array([[0.0, 0.0]])
        candidates = np.array([[0.01, 0.0], [1.0, 0.0], [1.005, 0.0], [2.0, 0.0]])
        np.testing.assert_array_equal(_select_new(existing, candidates, 0.02), [1, 3])
        assert _select_new(existing, np.zeros((0, 2)), 0.02).size == 0

    def test_schedule_validation(self):
        with pytest.raises(ValueError):
            ExplorationSchedule(GpPrior.create(1), [Interval(0.5, 1.0)], stride=0)

    @pytest.mark.slow
    def test_explore_keeps_state_safe(self):
        xs = grid_points(-2.2, 2.2, 0.1, 1)
        data = DataSet(xs, np.zeros_like(xs))
        schedule = ExplorationSchedule(
            prior=GpPrior.create(1, 0.0, 0.01, 0.5),
            intervals=[Interval(3.0, 4.0)],
            recompute_period=0.2,
            stride=5,
            gp_config=GpBoundConfig(initial_samples=32, audit_samples=256, restarts=8, max_iterations=20),
            verify_samples=64,
        )
        learner = RandomExplorationLearner([[-1.0]], amplitude=0.5)
        traj, history = explore(UNSTABLE, zero_oracle(1), data, schedule, learner, [0.5], T=0.4, h=0.01,
                                P=np.eye(1), E=np.eye(1), X=Polytope.box([2.0]), U=Polytope.box([2.0]))
        assert len(history) == 3
        assert history[0].note == "initial"
        gammas = [entry.gamma for entry in history]
        assert all(b >= a for a, b in zip(gammas, gammas[1:]))
        assert traj.max_level(np.eye(1)) <= gammas[-1] * (1 + 1e-3)
        assert list(history_frame(history).columns) == ["t", "gamma", "volume"]
