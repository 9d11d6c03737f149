import pytest

from src.Tools.config import Config
from src.Tools.exceptions import (
    AllIntervalsInfeasible,
    ConfigInvalid,
    DatasetError,
    MalformedRow,
    MaxIterationsExceeded,
    OutsideSafeSet,
    SafenvelopeError,
    SolverError,
)
from src.Tools.util.Colorful_Console import ColoredText, print_ok, print_warn


class TestConfig:
    def test_reads_values_from_env_file(self):
        config = Config()
        assert config.VERBOSE is False
        assert config.USE_THREADS is False
        assert config.AUDIT_SAMPLES == 2000

    def test_missing_keys_fall_back_to_defaults(self):
        config = Config()
        assert config.SOLVER == "CLARABEL"
        assert config.FEAS_TOL == pytest.approx(1e-7)
        assert config.SOLVER_FEAS_TOL == pytest.approx(1e-8)
        assert config.GAP_TOL == pytest.approx(1e-8)
        assert config.BOUNDARY_FRACTION == pytest.approx(0.02)

    def test_missing_file_uses_defaults(self, tmp_path):
        config = Config(tmp_path / "nowhere.ini")
        assert config.MAX_HALVINGS == 4
        assert config.VERBOSE is True

    def test_invalid_bool_rejected(self, tmp_path):
        ini = tmp_path / "bad.ini"
        ini.write_text("[Runtime Parameters]\nVERBOSE = yes\n", encoding="utf-8")
        with pytest.raises(ConfigInvalid):
            Config(ini)

    def test_invalid_number_rejected(self, tmp_path):
        ini = tmp_path / "bad.ini"
        ini.write_text("[Synthesis Parameters]\nCHUNK_SIZE = many\n", encoding="utf-8")
        with pytest.raises(ConfigInvalid):
            Config(ini)

    def test_same_path_is_cached(self, tmp_path):
        ini = tmp_path / "cached.ini"
        ini.write_text("[Solver Parameters]\nSOLVER = SCS\n", encoding="utf-8")
        assert Config(ini).SOLVER == "SCS"
        ini.write_text("[Solver Parameters]\nSOLVER = CLARABEL\n", encoding="utf-8")
        assert Config(ini).SOLVER == "SCS"
        Config.clear_cache()
        assert Config(ini).SOLVER == "CLARABEL"


class TestExceptions:
    def test_hierarchy(self):
        assert issubclass(MalformedRow, DatasetError)
        assert issubclass(MalformedRow, ValueError)
        assert issubclass(SolverError, RuntimeError)
        assert issubclass(AllIntervalsInfeasible, SafenvelopeError)

    def test_payloads(self):
        err = MalformedRow(3, "列数不对")
        assert err.line_no == 3
        assert "第 3 行" in str(err)
        assert AllIntervalsInfeasible("x", ["a", "b"]).failures == ["a", "b"]
        assert MaxIterationsExceeded("x", bound=1.5).bound == 1.5
        outside = OutsideSafeSet(1.2, 1.0, 0.5)
        assert outside.level == 1.2 and outside.gamma == 1.0 and outside.t == 0.5


class TestConsole:
    def test_colors(self):
        assert ColoredText("a").red() == "\033[91ma\033[0m"
        assert ColoredText(3).green().startswith("\033[92m")

    def test_quiet_printing(self, capsys):
        print_ok("完成", verbose=False)
        print_warn("注意", verbose=False)
        assert capsys.readouterr().out == ""
        print_ok("完成")
        assert "✓ 完成" in capsys.readouterr().out
