import numpy as np
import pytest

from src.Tools.config import Config
from src.lipschitz_bound import Interval, QuadraticBound
from src.system_model import LinearModel, Polytope


@pytest.fixture(autouse=True)
def quiet_config(tmp_path, monkeypatch):
    """测试统一使用关闭输出、单线程的运行参数"""
    ini = tmp_path / "test.ini"
    ini.write_text(
        "[Synthesis Parameters]\n"
        "AUDIT_SAMPLES = 2000\n"
        "VERIFY_SAMPLES = 400\n"
        "ASSUMPTION_SAMPLES = 1000\n"
        "\n"
        "[Runtime Parameters]\n"
        "USE_THREADS = False\n"
        "VERBOSE = False\n",
        encoding="utf-8",
    )
    monkeypatch.setenv("SAFENVELOPE_CONFIG", str(ini))
    Config.clear_cache()
    yield
    Config.clear_cache()


@pytest.fixture
def scalar_system():
    """ẋ = x + u，|x| ≤ 2，|u| ≤ 2"""
    return LinearModel([[1.0]], [[1.0]]), Polytope.box([2.0]), Polytope.box([2.0])


def zero_bound(interval: Interval, n: int = 1) -> QuadraticBound:
    return QuadraticBound(Q=np.zeros((n, n)), interval=interval, kind="lipschitz", report={"L": 0.0})


def huge_bound(interval: Interval, n: int = 1) -> QuadraticBound:
    return QuadraticBound(Q=1e6 * np.eye(n), interval=interval, kind="lipschitz")
