import configparser
import os
from pathlib import Path

from .exceptions import ConfigInvalid

DEFAULT_CONFIG_PATH = Path(__file__).resolve().parents[2] / "config" / "dev.ini"

# section -> {key: (类型, 默认值)}
_SCHEMA = {
    "Solver Parameters": {
        "SOLVER": (str, "CLARABEL"),
        "FALLBACK_SOLVER": (str, "SCS"),
        "FEAS_TOL": (float, 1e-7),
        "GAP_TOL": (float, 1e-8),
        "SOLVER_FEAS_TOL": (float, 1e-8),
    },
    "Synthesis Parameters": {
        "CHUNK_SIZE": (int, 500),
        "MAX_HALVINGS": (int, 4),
        "ASSUMPTION_SAMPLES": (int, 4000),
        "AUDIT_SAMPLES": (int, 10000),
        "VERIFY_SAMPLES": (int, 1000),
    },
    "GP Parameters": {
        "JITTER": (float, 1e-10),
        "CONFIDENCE": (float, 3.0),
        "INITIAL_SAMPLES": (int, 200),
        "VIOLATION_TOL": (float, 1e-6),
        "MAX_ITERATIONS": (int, 200),
        "RESTARTS": (int, 64),
        "FD_STEP": (float, 1e-5),
        "FIT_MARGIN": (float, 1e-4),
        "GRID_BETA": (float, 2.0),
    },
    "Runtime Parameters": {
        "STEP": (float, 1e-3),
        "BOUNDARY_FRACTION": (float, 0.02),
        "HOLD_STEPS": (int, 1),
        "RECOMPUTE_PERIOD": (float, 0.2),
        "USE_THREADS": (bool, True),
        "MAX_WORKERS": (int, 2),
        "VERBOSE": (bool, True),
    },
}


class Config:
    """
    运行参数，从 config/dev.ini 读取

    同一路径只解析一次，结果缓存在类属性里；缺失的文件或键使用默认值。
    环境变量 SAFENVELOPE_CONFIG 可以指向另一个 ini 文件。
    """
    _cache = {}

    def __init__(self, path=None):
        path = path or os.environ.get("SAFENVELOPE_CONFIG") or DEFAULT_CONFIG_PATH
        self.config_path = Path(path)
        key = str(self.config_path.resolve())
        if key not in Config._cache:
            Config._cache[key] = self._load_config()
        for name, value in Config._cache[key].items():
            setattr(self, name, value)

    @classmethod
    def clear_cache(cls):
        cls._cache = {}

    def _load_config(self):
        parser = configparser.ConfigParser()
        parser.optionxform = str  # 键名保持大写
        if self.config_path.exists():
            parser.read(self.config_path, encoding="utf-8")

        values = {}
        for section, keys in _SCHEMA.items():
            params = parser[section] if parser.has_section(section) else {}
            for name, (kind, default) in keys.items():
                raw = params.get(name) if params else None
                if raw is None or str(raw).strip() == "":
                    values[name] = default
                    continue
                raw = str(raw).strip().strip('"')
                try:
                    if kind is bool:
                        if raw not in ("True", "False"):
                            raise ValueError(raw)
                        values[name] = raw == "True"
                    else:
                        values[name] = kind(raw)
                except ValueError:
                    raise ConfigInvalid(f"配置项 [{section}] {name} 的值无效: {raw}")
        return values
