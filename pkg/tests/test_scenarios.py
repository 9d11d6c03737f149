import json

import numpy as np
import pytest

import main
from src.Tools.exceptions import ConfigInvalid, UnknownScenario
from src.lipschitz_bound import Interval, Ring, estimate_lipschitz, ring_indices
from src.safe_set_synthesis import SafeCertificate
from src.scenarios import (
    BUILTIN_NAMES,
    ScenarioConfig,
    ScenarioPipeline,
    build_intervals,
    builtin_oracle,
    deep_merge,
    initial_state,
    load_scenario_config,
    polynomial_oracle,
    robust_baseline_1d,
    run_scenario,
    save_scenario_config,
)
from src.system_model import LinearModel, Polytope
from tests.conftest import zero_bound


def write_config(path, doc):
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


class TestBaseline:
    def test_large_disturbance_is_infeasible(self):
        verdict = robust_baseline_1d(8.0, (-2.0, 2.0), (-2.0, 2.0))
        assert not verdict.feasible
        assert str(verdict).startswith("Infeasible")

    def test_no_disturbance(self):
        verdict = robust_baseline_1d(0.0, (-2.0, 2.0), (-2.0, 2.0))
        assert verdict.feasible
        assert verdict.k_interval == pytest.approx((-1.0, -1.0))

    def test_wider_input_range(self):
        verdict = robust_baseline_1d(0.5, (-2.0, 2.0), (-3.0, 3.0))
        assert verdict.feasible
        assert verdict.k_interval == pytest.approx((-1.5, -1.25))

    def test_origin_must_be_interior(self):
        with pytest.raises(ValueError):
            robust_baseline_1d(1.0, (0.0, 2.0), (-2.0, 2.0))


class TestBuiltins:
    def test_motivating(self):
        system = builtin_oracle("motivating1d")
        assert system.oracle([2.0])[0] == pytest.approx(-8.0)
        assert system.model.n == 1 and system.U.rows == 2

    def test_illustrative(self):
        system = builtin_oracle("illustrative2d")
        np.testing.assert_allclose(system.oracle([1.0, 1.0]), [0.5, -1.15])
        assert system.reference["gamma"] == 1.0

    def test_convoy_saturation(self):
        system = builtin_oracle("convoy5")
        x = np.zeros(9)
        x[0] = 2.0
        rate = system.model.A @ x + system.oracle(x)
        assert rate[5] == pytest.approx(0.9)
        assert system.oracle.groups() == (((5,), (0, 5)), ((8,), (3, 8)))

    def test_convoy_gap_sign(self):
        A = builtin_oracle("convoy5").model.A
        np.testing.assert_array_equal(A[0, 4:6], [1.0, -1.0])
        local = A[np.ix_([0, 5], [0, 5])]
        assert np.linalg.eigvals(local).real.max() < 0
        flipped = local * np.array([[-1.0], [1.0]])
        assert np.linalg.eigvals(flipped).real.max() > 0

    def test_exploration_is_controllable(self):
        assert builtin_oracle("exploration2d").model.controllable

    def test_unknown(self):
        with pytest.raises(UnknownScenario):
            builtin_oracle("pendulum")

    def test_polynomial(self):
        terms = [[{"coef": 2.0, "powers": [1, 2]}], [{"coef": -1.0, "powers": [0, 3]}]]
        oracle = polynomial_oracle(terms, 2)
        np.testing.assert_allclose(oracle([2.0, 3.0]), [36.0, -27.0])
        with pytest.raises(ConfigInvalid):
            polynomial_oracle(terms[:1], 2)
        with pytest.raises(ConfigInvalid):
            polynomial_oracle([[{"coef": 1.0, "powers": [1]}], []], 2)


class TestConfig:
    def test_deep_merge(self):
        base = {"a": {"b": 1, "c": 2}, "l": [1, 2]}
        merged = deep_merge(base, {"a": {"c": 3}, "l": [5]})
        assert merged == {"a": {"b": 1, "c": 3}, "l": [5]}
        assert base["a"]["c"] == 2

    def test_builtin_names_resolve(self):
        for name in BUILTIN_NAMES:
            config = load_scenario_config(name)
            assert config.scenario == name
            assert config.oracle["name"] == name

    def test_override_and_round_trip(self, tmp_path):
        path = write_config(tmp_path / "cfg.json", {"scenario": "convoy5", "delta": 0.02, "seed": 3})
        config = load_scenario_config(path)
        assert config.delta == 0.02 and config.seed == 3
        assert config.bound_mode == "gp"
        assert config.gp_prior["active_dims"][5] == [0, 5]
        saved = save_scenario_config(config, tmp_path / "saved.json")
        assert load_scenario_config(saved).to_dict() == config.to_dict()

    def test_interval_schedules(self):
        convoy = build_intervals(load_scenario_config("convoy5"))
        assert len(convoy) == 8
        assert convoy[0].to_list() == pytest.approx([0.9, 1.0])
        exploration = build_intervals(load_scenario_config("exploration2d"))
        assert exploration[0].to_list() == pytest.approx([0.8, 0.9])

    def test_invalid_documents(self, tmp_path):
        doc = load_scenario_config("motivating1d").to_dict()
        with pytest.raises(ConfigInvalid):
            ScenarioConfig.from_dict({**doc, "bogus": 1})
        with pytest.raises(ConfigInvalid):
            ScenarioConfig.from_dict({**doc, "bound_mode": "magic"})
        with pytest.raises(ConfigInvalid):
            ScenarioConfig.from_dict({**doc, "constraints": {"x_box": [2.0, 2.0], "u_box": [2.0]}})
        with pytest.raises(UnknownScenario):
            load_scenario_config(write_config(tmp_path / "bad.json", {"scenario": "pendulum"}))
        with pytest.raises(ConfigInvalid):
            load_scenario_config(tmp_path / "missing.json")
        broken = tmp_path / "broken.json"
        broken.write_text("{not json", encoding="utf-8")
        with pytest.raises(ConfigInvalid):
            load_scenario_config(broken)

    def test_initial_state_scaling(self):
        interval = Interval(0.25, 4.0)
        cert = SafeCertificate(model=LinearModel([[1.0, 0.0], [0.0, 1.0]], [[1.0], [0.0]]),
                               X=Polytope.box([2.0, 2.0]), U=Polytope.box([2.0]), P=np.eye(2), E=np.eye(2),
                               gamma=4.0, Y=np.zeros((1, 2)), K=np.zeros((1, 2)), interval=interval,
                               bound=zero_bound(interval, 2))
        doc = {"x0": [3.0, 4.0], "x0_mode": "scale-to-boundary", "x0_fraction": 0.25}
        np.testing.assert_allclose(initial_state(doc, cert), [0.6, 0.8])
        np.testing.assert_allclose(initial_state({"x0": [3.0, 4.0]}, cert), [3.0, 4.0])
        with pytest.raises(ConfigInvalid):
            initial_state({"x0": [0.0, 0.0], "x0_mode": "scale-to-boundary"}, cert)


class TestRunScenario:
    def test_baseline_command(self, tmp_path):
        code = run_scenario(load_scenario_config("motivating1d"), "baseline-robust", tmp_path)
        assert code == 0
        report = (tmp_path / "report.txt").read_text(encoding="utf-8")
        assert "Infeasible" in report

    def test_unknown_command(self, tmp_path):
        assert run_scenario(load_scenario_config("motivating1d"), "plot", tmp_path) == 2

    def test_oracle_dimension_mismatch(self, tmp_path):
        doc = load_scenario_config("illustrative2d").to_dict()
        doc["oracle"] = {"name": "motivating1d"}
        code = run_scenario(ScenarioConfig.from_dict(doc), "shape", tmp_path)
        assert code == 2
        assert (tmp_path / "report.txt").is_file()

    def test_empty_dataset_fails_every_interval(self, tmp_path):
        path = write_config(tmp_path / "empty.json", {
            "scenario": "motivating1d",
            "dataset": {"source": "none"},
            "region": {"mode": "none"},
            "shape": {"constrain_to_region": False},
            "bound": {"L": 8.2, "max_halvings": 0},
        })
        code = run_scenario(load_scenario_config(path), "synthesize", tmp_path / "out")
        assert code == 1
        report = (tmp_path / "out" / "report.txt").read_text(encoding="utf-8")
        assert "AllIntervalsInfeasible" in report
        assert "EmptyRing" in report
        assert not (tmp_path / "out" / "certificate.json").exists()

    def test_data_point_outside_state_constraints(self, tmp_path):
        data = tmp_path / "data.csv"
        data.write_text("x1,d1\n1.0,-1.0\n2.5,-15.625\n", encoding="utf-8")
        path = write_config(tmp_path / "file.json", {"scenario": "motivating1d",
                                                     "dataset": {"source": "file", "path": str(data)}})
        code = run_scenario(load_scenario_config(path), "synthesize", tmp_path / "out")
        assert code == 1
        report = (tmp_path / "out" / "report.txt").read_text(encoding="utf-8")
        assert "PointOutsideConstraints" in report
        assert "第 3 行" in report

    def test_main_exit_codes(self, tmp_path):
        assert main.main(["baseline-robust", "--config", "motivating1d", "--out", str(tmp_path / "a")]) == 0
        missing = str(tmp_path / "missing.json")
        assert main.main(["synthesize", "--config", missing, "--out", str(tmp_path / "b")]) == 2

    @pytest.mark.slow
    def test_motivating_end_to_end(self, tmp_path):
        out = tmp_path / "motivating"
        assert run_scenario(load_scenario_config("motivating1d"), "synthesize", out) == 0
        doc = json.loads((out / "certificate.json").read_text(encoding="utf-8"))
        assert doc["P"] == [[pytest.approx(0.25, abs=1e-4)]]
        assert doc["gamma"] == pytest.approx(1.0, abs=1e-6)
        assert doc["verification"]["state_ok"] and doc["verification"]["input_ok"]
        assert doc["verification"]["vdot_max"] <= 1e-6

        override = write_config(tmp_path / "short.json", {"scenario": "motivating1d",
                                                         "simulation": {"T": 0.5, "x0": [1.5]}})
        assert run_scenario(load_scenario_config(override), "simulate", out) == 0
        assert (out / "trajectory.csv").is_file()
        assert "状态约束违反步数: 0" in (out / "report.txt").read_text(encoding="utf-8")

    @pytest.mark.slow
    def test_illustrative_synthesis(self, tmp_path):
        pipeline = ScenarioPipeline(load_scenario_config("illustrative2d"), tmp_path / "illustrative", verbose=False)
        shape = pipeline.shape()
        np.testing.assert_allclose(shape.P, [[0.7751, 0.1948], [0.1948, 0.6938]], rtol=0.02)

        interval = build_intervals(pipeline.config)[0]
        idx = ring_indices(pipeline.data, Ring(shape.P, interval, pipeline.config.delta))
        # 两倍最大斜率；xᵀPd(x) 在环上的梯度范数最大约 7.93
        assert 2 * 7.9 <= estimate_lipschitz(pipeline.data, shape.P, idx) <= 2 * 10.0

        cert = pipeline.certificate()
        assert cert.gamma == pytest.approx(1.0, abs=1e-6)
        assert cert.verification.state_ok and cert.verification.input_ok
        assert cert.verification.vdot_max <= 1e-6

    @pytest.mark.slow
    def test_gp_bound_reaches_at_least_lipschitz_level(self, tmp_path):
        doc = load_scenario_config("motivating1d").to_dict()
        lipschitz = ScenarioPipeline(ScenarioConfig.from_dict(doc), tmp_path / "lip", verbose=False).certificate()
        doc.update({"bound_mode": "gp",
                    "dataset": {"source": "grid", "planes": [{"low": -2.0, "high": 2.0, "count": 21}]},
                    "gp_prior": {"sigma_f": 8.0, "lengthscale": 0.5, "jitter": 1e-8},
                    "gp_bound": {"initial_samples": 32, "audit_samples": 256, "restarts": 8,
                                 "max_iterations": 20}})
        gp = ScenarioPipeline(ScenarioConfig.from_dict(doc), tmp_path / "gp", verbose=False).certificate()
        assert gp.bound.kind == "gp"
        assert gp.gamma >= lipschitz.gamma - 1e-6
