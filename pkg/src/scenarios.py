#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
场景配置与流水线

场景配置是一个 JSON 文件（UTF-8，snake_case 键）。写了 "scenario" 时以 config/scenarios.yml
中同名的内置条目为底稿，JSON 中的键逐层覆盖。run_scenario 按命令执行流水线中的一段，
结果写入输出目录：certificate.json、trajectory.csv、history.csv、report.txt，
以及中间结果 shape.json、bounds.json。
"""

import copy
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import yaml

from .Tools.config import Config
from .Tools.exceptions import (
    AllIntervalsInfeasible,
    ConfigInvalid,
    SafenvelopeError,
    SynthesisError,
    UnknownScenario,
)
from .Tools.util.Colorful_Console import print_fail, print_ok, print_step, print_warn
from .gp_bound import (
    GpBoundConfig,
    bound_nonlinearity_envelope,
    bound_nonlinearity_gp,
    bound_nonlinearity_gp_grid,
    confidence_levels,
)
from .gp_regression import GpPrior, fit_gp
from .lipschitz_bound import (
    Interval,
    QuadraticBound,
    Ring,
    bound_nonlinearity_lipschitz,
    compute_bounds,
    estimate_lipschitz,
    make_intervals,
    ring_indices,
)
from .runtime_sim import (
    ConstantPolicy,
    ExplorationSchedule,
    FilterConfig,
    LinearPolicy,
    RandomExplorationLearner,
    SignedDerivativeLearner,
    explore,
    history_frame,
    simulate,
)
from .safe_set_synthesis import (
    SafeCertificate,
    load_certificate,
    save_certificate,
    sweep_intervals,
    verify_certificate,
)
from .shape_synthesis import ShapeResult, synthesize_shape
from .system_model import (
    DataRegion,
    DataSet,
    LinearModel,
    NonlinearityOracle,
    Polytope,
    data_region_from_data,
    grid_dataset,
    load_dataset,
)

SCENARIOS_PATH = Path(__file__).resolve().parents[1] / "config" / "scenarios.yml"

COMMANDS = ("shape", "bound-lipschitz", "bound-gp", "synthesize", "verify", "simulate", "explore",
            "baseline-robust")
BOUND_MODES = ("lipschitz", "gp", "gp-grid", "envelope")
BUILTIN_NAMES = ("motivating1d", "illustrative2d", "convoy5", "exploration2d")


# ---- 内置系统 ----

def _convoy_saturation(s, limit: float = 0.9):
    """第 2、5 辆车的局部控制律 max{min{s, 0.9}, −0.9}"""
    return np.clip(s, -limit, limit)


def _motivating(x):
    return -x ** 3


def _illustrative(x):
    out = np.empty_like(x)
    out[..., 0] = 0.5 * x[..., 0] ** 4
    out[..., 1] = 0.35 - 1.5 * x[..., 1] ** 3
    return out


def _convoy(x):
    out = np.zeros_like(x)
    s2 = x[..., 0] - x[..., 5]
    s5 = x[..., 3] - x[..., 8]
    out[..., 5] = _convoy_saturation(s2) - s2
    out[..., 8] = _convoy_saturation(s5) - s5
    return out


def _exploration(x):
    out = np.empty_like(x)
    out[..., 0] = 0.5 * x[..., 0] ** 2 * np.sin(6 * x[..., 0])
    out[..., 1] = -0.8 * x[..., 1] ** 3
    return out


_ORACLES: Dict[str, Tuple[Callable, int, Optional[tuple]]] = {
    "motivating1d": (_motivating, 1, None),
    "illustrative2d": (_illustrative, 2, None),
    "convoy5": (_convoy, 9, (((5,), (0, 5)), ((8,), (3, 8)))),
    "exploration2d": (_exploration, 2, None),
}


@dataclass(frozen=True)
class BuiltinSystem:
    model: LinearModel
    oracle: NonlinearityOracle
    X: Polytope
    U: Polytope
    reference: Dict[str, Any]


def load_catalogue(path: Optional[Union[str, Path]] = None) -> Dict[str, Dict]:
    """读取内置场景目录"""
    path = Path(path) if path else SCENARIOS_PATH
    try:
        with open(path, "r", encoding="utf-8") as f:
            catalogue = yaml.safe_load(f) or {}
    except FileNotFoundError:
        raise ConfigInvalid(f"场景目录不存在: {path}")
    except yaml.YAMLError as e:
        raise ConfigInvalid(f"场景目录 YAML 解析失败: {e}")
    return catalogue


def builtin_oracle(name: str) -> BuiltinSystem:
    """
    返回内置系统：线性模型、真实非线性、约束和参考常数

    Raises:
        UnknownScenario: 未知名字
    """
    if name not in _ORACLES:
        raise UnknownScenario(f"未知的内置场景: {name}, 可选: {', '.join(BUILTIN_NAMES)}")
    entry = load_catalogue()[name]
    fn, n, structure = _ORACLES[name]
    return BuiltinSystem(
        model=build_model(entry["model"]),
        oracle=NonlinearityOracle(fn=fn, n=n, name=name, structure=structure),
        X=build_constraints(entry["constraints"], "x"),
        U=build_constraints(entry["constraints"], "u"),
        reference=dict(entry.get("reference", {})),
    )


def polynomial_oracle(terms: List[List[Dict]], n: int, lipschitz: Optional[float] = None) -> NonlinearityOracle:
    """
    由多项式项构造 oracle

    Args:
        terms: 每个输出行一个列表，元素为 {"coef": c, "powers": [p_1, ..., p_n]}
        n: 状态维数
    """
    if len(terms) != n:
        raise ConfigInvalid(f"custom-polynomial 需要 {n} 行, 实际为 {len(terms)}")
    rows = []
    for r, row in enumerate(terms):
        parsed = []
        for term in row:
            powers = np.asarray(term.get("powers", []), dtype=int)
            if powers.shape != (n,) or np.any(powers < 0):
                raise ConfigInvalid(f"第 {r + 1} 行的 powers 必须是 {n} 个非负整数")
            parsed.append((float(term["coef"]), powers))
        rows.append(parsed)

    def fn(x):
        out = np.zeros_like(x)
        for r, row in enumerate(rows):
            for coef, powers in row:
                out[..., r] += coef * np.prod(x ** powers, axis=-1)
        return out

    return NonlinearityOracle(fn=fn, n=n, lipschitz=lipschitz, name="custom-polynomial")


# ---- 配置 ----

def deep_merge(base: Dict, override: Dict) -> Dict:
    """字典逐层合并，列表与标量整体替换"""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


@dataclass
class ScenarioConfig:
    """场景配置，各小节保持 JSON 结构，使用时再解析成对象"""
    model: Dict
    constraints: Dict
    oracle: Dict
    scenario: Optional[str] = None
    dataset: Dict = field(default_factory=dict)
    delta: float = 0.0
    region: Dict = field(default_factory=lambda: {"mode": "none"})
    bound_mode: str = "lipschitz"
    intervals: Dict = field(default_factory=lambda: {"gamma_bar": 1.0, "widths": [0.1]})
    bound: Dict = field(default_factory=dict)
    gp_prior: Dict = field(default_factory=dict)
    gp_bound: Dict = field(default_factory=dict)
    shape: Dict = field(default_factory=dict)
    filter: Dict = field(default_factory=dict)
    simulation: Dict = field(default_factory=dict)
    exploration: Dict = field(default_factory=dict)
    baseline: Dict = field(default_factory=dict)
    reference: Dict = field(default_factory=dict)
    seed: int = 0

    @classmethod
    def from_dict(cls, doc: Dict) -> "ScenarioConfig":
        if not isinstance(doc, dict):
            raise ConfigInvalid("场景配置必须是 JSON 对象")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigInvalid(f"未知的配置键: {', '.join(unknown)}")
        for key in ("model", "constraints", "oracle"):
            if key not in doc:
                raise ConfigInvalid(f"缺少配置项: {key}")
        config = cls(**copy.deepcopy(doc))
        config.validate()
        return config

    def to_dict(self) -> Dict:
        return {f.name: copy.deepcopy(getattr(self, f.name)) for f in fields(self)}

    def validate(self):
        if self.bound_mode not in BOUND_MODES:
            raise ConfigInvalid(f"bound_mode 必须是 {BOUND_MODES} 之一, 实际为 {self.bound_mode}")
        name = self.oracle.get("name")
        if name not in BUILTIN_NAMES + ("custom-polynomial",):
            raise UnknownScenario(f"未知的 oracle: {name}")
        model = build_model(self.model)
        X = build_constraints(self.constraints, "x")
        U = build_constraints(self.constraints, "u")
        if X.dim != model.n or U.dim != model.m:
            raise ConfigInvalid(f"约束维数与模型不一致: X {X.dim} / n {model.n}, U {U.dim} / m {model.m}")
        if self.delta < 0:
            raise ConfigInvalid(f"delta 不能为负, 实际为 {self.delta}")


def load_scenario_config(source: Union[str, Path]) -> ScenarioConfig:
    """
    读取场景配置

    Args:
        source: JSON 文件路径；不是文件但是内置场景名时直接使用内置条目

    Raises:
        ConfigInvalid: 文件不存在、JSON 不合法或内容不合法
        UnknownScenario: 引用了未知的内置场景
    """
    path = Path(source)
    if not path.is_file():
        if str(source) in BUILTIN_NAMES:
            doc = {"scenario": str(source)}
        else:
            raise ConfigInvalid(f"配置文件不存在: {source}")
    else:
        try:
            with open(path, "r", encoding="utf-8") as f:
                doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigInvalid(f"JSON 解析失败: {e}")
    if not isinstance(doc, dict):
        raise ConfigInvalid("场景配置必须是 JSON 对象")

    name = doc.get("scenario")
    if name is not None:
        catalogue = load_catalogue()
        if name not in catalogue:
            raise UnknownScenario(f"未知的内置场景: {name}")
        doc = deep_merge(catalogue[name], doc)
    return ScenarioConfig.from_dict(doc)


def save_scenario_config(config: ScenarioConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.to_dict(), f, ensure_ascii=False, indent=2)
    return path


# ---- 由配置构造对象 ----

def build_model(doc: Dict) -> LinearModel:
    try:
        return LinearModel(np.asarray(doc["A"], dtype=float), np.asarray(doc["B"], dtype=float))
    except KeyError as e:
        raise ConfigInvalid(f"model 缺少 {e}")
    except (ValueError, TypeError) as e:
        raise ConfigInvalid(f"model 不合法: {e}")


def build_constraints(doc: Dict, which: str) -> Polytope:
    """which 为 "x" 或 "u"；支持 {x_box, u_box} 或 {A_x, b_x, A_u, b_u}"""
    try:
        if f"{which}_box" in doc:
            return Polytope.box(doc[f"{which}_box"])
        return Polytope(np.asarray(doc[f"A_{which}"], dtype=float), np.asarray(doc[f"b_{which}"], dtype=float))
    except KeyError as e:
        raise ConfigInvalid(f"constraints 缺少 {e}")
    except (ValueError, TypeError) as e:
        raise ConfigInvalid(f"constraints 不合法: {e}")


def build_oracle(config: ScenarioConfig, n: int) -> NonlinearityOracle:
    name = config.oracle.get("name")
    if name == "custom-polynomial":
        return polynomial_oracle(config.oracle.get("terms", []), n, config.oracle.get("lipschitz"))
    oracle = builtin_oracle(name).oracle
    if oracle.n != n:
        raise ConfigInvalid(f"oracle {name} 是 {oracle.n} 维的, 模型是 {n} 维的")
    return oracle


def _ellipsoid_filter(plane: Dict, n: int) -> Optional[Callable[[np.ndarray], np.ndarray]]:
    """plane.inside 给出 M 时只保留 xᵀMx ≤ 1 的网格点"""
    if plane.get("inside") is None:
        return None
    M = np.asarray(plane["inside"], dtype=float)
    if M.shape != (n, n):
        raise ConfigInvalid(f"dataset.planes[].inside 必须是 {n}×{n} 矩阵")
    return lambda xs: np.einsum("ij,jk,ik->i", xs, M, xs) <= 1.0 + 1e-12


def build_dataset(config: ScenarioConfig, oracle: NonlinearityOracle, base_dir: Optional[Path] = None,
                  X: Optional[Polytope] = None) -> DataSet:
    doc = config.dataset
    source = doc.get("source", "grid")
    if source == "file":
        path = Path(doc["path"])
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        return load_dataset(path, X)
    if source == "none":
        return DataSet(np.zeros((0, oracle.n)), np.zeros((0, oracle.n)))
    if source != "grid":
        raise ConfigInvalid(f"dataset.source 必须是 grid/file/none, 实际为 {source}")

    data = None
    for plane in doc.get("planes", []):
        low, high = float(plane["low"]), float(plane["high"])
        if "count" in plane:
            count = int(plane["count"])
            if count < 2:
                raise ConfigInvalid("网格每个坐标至少需要 2 个点")
            spacing = (high - low) / (count - 1)
            high = low + spacing * (count - 1)
        else:
            spacing = float(plane["spacing"])
        part = grid_dataset(oracle, low, high, spacing, plane.get("dims"), _ellipsoid_filter(plane, oracle.n))
        data = part if data is None else data.append(part.xs, part.ds)
    if data is None:
        raise ConfigInvalid("dataset.planes 为空")
    return data


def build_region(config: ScenarioConfig, data: DataSet) -> Optional[DataRegion]:
    mode = config.region.get("mode", "none")
    if mode == "none":
        return None
    if mode == "covering":
        return data_region_from_data(data, config.delta)
    if mode == "explicit":
        return DataRegion(np.asarray(config.region["A_delta"], dtype=float), config.delta)
    raise ConfigInvalid(f"region.mode 必须是 none/covering/explicit, 实际为 {mode}")


def build_intervals(config: ScenarioConfig) -> List[Interval]:
    doc = config.intervals
    return make_intervals(float(doc.get("gamma_bar", 1.0)), doc.get("widths", [0.1]),
                          doc.get("count"), int(doc.get("start", 0)))


def build_gp_config(config: ScenarioConfig) -> GpBoundConfig:
    allowed = {f.name for f in fields(GpBoundConfig)}
    unknown = sorted(set(config.gp_bound) - allowed)
    if unknown:
        raise ConfigInvalid(f"gp_bound 中的未知键: {', '.join(unknown)}")
    options = dict(config.gp_bound)
    options.setdefault("seed", config.seed)
    try:
        return GpBoundConfig(**options)
    except ValueError as e:
        raise ConfigInvalid(f"gp_bound 不合法: {e}")


def build_prior(config: ScenarioConfig, n: int) -> GpPrior:
    try:
        return GpPrior.create(n, **config.gp_prior)
    except TypeError as e:
        raise ConfigInvalid(f"gp_prior 不合法: {e}")


def build_filter(config: ScenarioConfig) -> FilterConfig:
    try:
        return FilterConfig(**config.filter)
    except (TypeError, ValueError) as e:
        raise ConfigInvalid(f"filter 不合法: {e}")


def build_policy(doc: Dict, model: LinearModel, cert: Optional[SafeCertificate], seed: int,
                 K0: Optional[np.ndarray] = None):
    kind = doc.get("type", "zero")
    if kind == "zero":
        return ConstantPolicy(np.zeros(model.m))
    if kind == "constant":
        return ConstantPolicy(np.asarray(doc["u"], dtype=float))
    if kind == "linear":
        return LinearPolicy(np.asarray(doc["K"], dtype=float))
    if kind == "safe":
        return LinearPolicy(cert.K)
    start = np.asarray(doc["K"], dtype=float) if "K" in doc else (K0 if K0 is not None else cert.K)
    if kind == "random":
        return RandomExplorationLearner(start, doc.get("amplitude", 0.5), seed)
    if kind == "signed-derivative":
        return SignedDerivativeLearner(start, model.B, doc.get("learning_rate", 0.5), doc.get("noise", 0.5),
                                       doc.get("decay", 1.0), doc.get("update_period", 0.05), seed,
                                       doc.get("k_max", 10.0))
    raise ConfigInvalid(f"未知的策略类型: {kind}")


def initial_state(doc: Dict, cert: SafeCertificate) -> np.ndarray:
    """按 x0_mode 给出初始状态；scale-to-boundary 沿给定方向缩放到 x0_fraction·γ 的水平"""
    x0 = np.asarray(doc.get("x0", np.zeros(cert.P.shape[0])), dtype=float).reshape(-1)
    mode = doc.get("x0_mode", "as-given")
    if mode == "as-given":
        return x0
    if mode != "scale-to-boundary":
        raise ConfigInvalid(f"x0_mode 必须是 as-given 或 scale-to-boundary, 实际为 {mode}")
    level = cert.level(x0)
    if level <= 0:
        raise ConfigInvalid("scale-to-boundary 需要非零的 x0 方向")
    fraction = float(doc.get("x0_fraction", 1 - 1e-6))
    return x0 * np.sqrt(fraction * cert.gamma / level)


# ---- 鲁棒基线 ----

@dataclass(frozen=True)
class BaselineVerdict:
    feasible: bool
    k_interval: Tuple[float, float]

    def __str__(self):
        lo, hi = self.k_interval
        status = "Feasible" if self.feasible else "Infeasible"
        return f"{status}: k ∈ [{lo:.6g}, {hi:.6g}]"


def robust_baseline_1d(bound_w: float, X: Tuple[float, float], U: Tuple[float, float]) -> BaselineVerdict:
    """
    标量系统 ẋ = x + w + u，|w| ≤ bound_w，u = kx

    要求 X 的两个端点处 ẋ 指向内部（对所有 w），且 kx ∈ U 对整个 X 成立。
    返回可行的 k 区间；不可行时区间下端大于上端。
    """
    x_min, x_max = float(X[0]), float(X[1])
    u_min, u_max = float(U[0]), float(U[1])
    if not (x_min < 0 < x_max) or not (u_min <= 0 <= u_max) or bound_w < 0:
        raise ValueError("X 必须严格包含原点, U 必须包含原点, bound_w 不能为负")
    # (1+k)x_max + w ≤ 0 与 (1+k)x_min + w ≥ 0 对所有 |w| ≤ bound_w
    upper = [-1.0 - bound_w / x_max, -1.0 - bound_w / abs(x_min)]
    # u_min ≤ kx ≤ u_max 在 x = x_min、x_max 处
    upper += [u_max / x_max, u_min / x_min]
    lower = [u_min / x_max, u_max / x_min]
    lo, hi = max(lower), min(upper)
    return BaselineVerdict(feasible=lo <= hi, k_interval=(lo, hi))


# ---- 流水线 ----

class ScenarioPipeline:
    """
    按需构造流水线各阶段并缓存结果

    数据只在综合侧使用；oracle 只用于生成网格数据、仿真与校验。
    """

    def __init__(self, config: ScenarioConfig, out_dir: Union[str, Path], verbose: bool = True,
                 base_dir: Optional[Path] = None):
        self.config = config
        self.out_dir = Path(out_dir)
        self.verbose = verbose
        self.base_dir = base_dir
        self.model = build_model(config.model)
        self.X = build_constraints(config.constraints, "x")
        self.U = build_constraints(config.constraints, "u")
        self.oracle = build_oracle(config, self.model.n)
        self.report: List[str] = []
        self._data: Optional[DataSet] = None
        self._shape: Optional[ShapeResult] = None

    def log(self, line: str):
        self.report.append(line)

    @property
    def data(self) -> DataSet:
        if self._data is None:
            self._data = build_dataset(self.config, self.oracle, self.base_dir, self.X)
            self.log(f"数据点: {self._data.N}")
        return self._data

    def shape(self) -> ShapeResult:
        if self._shape is None:
            region = build_region(self.config, self.data)
            constrain = bool(self.config.shape.get("constrain_to_region", region is not None))
            self._shape = synthesize_shape(self.model, self.X, self.U, region, constrain, self.verbose)
            self.log(f"P = {np.round(self._shape.P, 6).tolist()}")
            self.log(f"K0 = {np.round(self._shape.K0, 6).tolist()}")
            self._write_json("shape.json", {"P": self._shape.P.tolist(), "E": self._shape.E.tolist(),
                                            "K0": self._shape.K0.tolist(),
                                            "logdet": self._shape.logdet_value})
        return self._shape

    def provider(self, mode: Optional[str] = None) -> Callable[[Interval], QuadraticBound]:
        mode = mode or self.config.bound_mode
        P = self.shape().P
        bound = self.config.bound
        data = self.data
        if mode == "lipschitz":
            return lambda iv: bound_nonlinearity_lipschitz(
                data, P, iv, self.config.delta, bound.get("L"), bound.get("chunk_size"),
                bound.get("check_assumption", True), verbose=self.verbose)
        if mode == "envelope":
            groups = bound.get("groups") or self.oracle.groups()
            groups = [(tuple(rows), tuple(coords)) for rows, coords in groups]
            lipschitz = bound.get("lipschitz_groups")
            if lipschitz is None or len(lipschitz) != len(groups):
                raise ConfigInvalid("envelope 模式需要与 groups 等长的 bound.lipschitz_groups")
            cfg = build_gp_config(self.config)
            return lambda iv: bound_nonlinearity_envelope(data, P, iv, lipschitz, groups, cfg, self.verbose)

        gp = fit_gp(data, build_prior(self.config, self.model.n))
        cfg = build_gp_config(self.config)
        one_sided, two_sided = confidence_levels(cfg.c)
        self.log(f"GP 置信系数 c={cfg.c}: 单侧 {one_sided:.5f}, 双侧 {two_sided:.5f}")
        if mode == "gp":
            return lambda iv: bound_nonlinearity_gp(gp, P, iv, cfg, self.verbose)
        if mode == "gp-grid":
            if "L" not in bound:
                raise ConfigInvalid("gp-grid 模式需要 bound.L")
            return lambda iv: bound_nonlinearity_gp_grid(gp, P, iv, cfg, float(bound["L"]),
                                                         bound.get("chunk_size"), self.verbose)
        raise ConfigInvalid(f"未知的 bound_mode: {mode}")

    def lipschitz_note(self, interval: Interval):
        """报告数据估计的 L̂ 与配置的 L"""
        P = self.shape().P
        try:
            idx = ring_indices(self.data, Ring(P, interval, self.config.delta))
            estimate = estimate_lipschitz(self.data, P, idx)
            self.log(f"区间 {interval}: L̂ = {estimate:.4g}, 配置 L = {self.config.bound.get('L')}")
        except SafenvelopeError as e:
            self.log(f"区间 {interval}: 无法估计 L̂ ({e})")

    def bounds(self, mode: str) -> Dict[Interval, QuadraticBound]:
        intervals = build_intervals(self.config)
        bounds, failures = compute_bounds(self.provider(mode), intervals, verbose=self.verbose)
        doc = []
        for interval in intervals:
            if interval in bounds:
                b = bounds[interval]
                doc.append({"interval": interval.to_list(), **b.to_dict(), "warnings": b.warnings})
                self.log(f"区间 {interval}: 上界求解成功, λ_min(Q) = {np.linalg.eigvalsh(b.Q).min():.4g}")
            else:
                doc.append({"interval": interval.to_list(), "error": failures[interval]})
                self.log(f"区间 {interval}: {failures[interval]}")
        self._write_json("bounds.json", doc)
        if not bounds:
            raise AllIntervalsInfeasible("所有区间的上界都求解失败", list(failures.values()))
        return bounds

    def certificate(self) -> SafeCertificate:
        shape = self.shape()
        intervals = build_intervals(self.config)
        if self.config.bound_mode == "lipschitz":
            self.lipschitz_note(intervals[0])
        max_halvings = self.config.bound.get("max_halvings")
        try:
            cert = sweep_intervals(self.model, shape.E, self.provider(), intervals, self.X, self.U,
                                   max_halvings, self.verbose)
        except AllIntervalsInfeasible as e:
            for failure in e.failures:
                self.log(f"失败: {failure}")
            raise
        cert.verification = verify_certificate(cert, self.oracle, seed=self.config.seed, verbose=self.verbose)
        for warning in cert.warnings:
            print_warn(warning, self.verbose)
        self.describe(cert)
        save_certificate(cert, self.out_dir / "certificate.json")
        return cert

    def existing_certificate(self) -> SafeCertificate:
        path = self.out_dir / "certificate.json"
        if path.is_file():
            print_step(f"读取已有证书: {path}", self.verbose)
            return load_certificate(path, self.model, self.X, self.U)
        return self.certificate()

    def describe(self, cert: SafeCertificate):
        self.log(f"γ* = {cert.gamma:.10g}")
        self.log(f"区间 = {cert.interval}")
        self.log(f"K = {np.round(cert.K, 6).tolist()}")
        self.log(f"上界类型 = {cert.bound.kind}")
        if cert.lmi_residuals:
            self.log("LMI 最小特征值: " + ", ".join(f"{k}={v:.3g}" for k, v in cert.lmi_residuals.items()))
        if cert.verification is not None:
            v = cert.verification
            self.log(f"校验: state_ok={v.state_ok}, input_ok={v.input_ok}, vdot_max={v.vdot_max:.4g}, "
                     f"samples={v.samples}")
        for warning in cert.warnings:
            self.log(f"警告: {warning}")

    def _write_json(self, name: str, doc):
        path = self.out_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(doc, f, ensure_ascii=False, indent=2)

    def write_report(self, command: str, status: str):
        path = self.out_dir / "report.txt"
        path.parent.mkdir(parents=True, exist_ok=True)
        header = [f"命令: {command}", f"场景: {self.config.scenario or self.config.oracle.get('name')}",
                  f"状态: {status}"]
        path.write_text("\n".join(header + self.report) + "\n", encoding="utf-8")

    # ---- 命令 ----

    def run_shape(self):
        self.shape()

    def run_bound(self, mode: str):
        self.bounds(mode)

    def run_synthesize(self):
        self.certificate()

    def run_verify(self):
        cert = self.existing_certificate()
        cert.verification = verify_certificate(cert, self.oracle, seed=self.config.seed, verbose=self.verbose)
        data_report = verify_certificate(cert, self.data, seed=self.config.seed, verbose=self.verbose)
        self.describe(cert)
        self.log(f"基于数据的校验: vdot_max={data_report.vdot_max:.4g}, passed={data_report.passed}")
        save_certificate(cert, self.out_dir / "certificate.json")
        if not cert.verification.passed:
            raise_verification(cert)

    def run_simulate(self):
        cert = self.existing_certificate()
        sim = self.config.simulation
        policy = build_policy(sim.get("policy", {}), self.model, cert, self.config.seed, self.shape().K0)
        x0 = initial_state(sim, cert)
        trajectory = simulate(self.model, self.oracle, cert, policy, x0, float(sim.get("T", 10.0)),
                              sim.get("h"), build_filter(self.config), self.verbose)
        trajectory.to_csv(self.out_dir / "trajectory.csv")
        inside = np.all(self.X.A_c @ trajectory.x.T <= self.X.b_c[:, None] + 1e-9, axis=0)
        self.log(f"x0 = {np.round(x0, 6).tolist()}")
        self.log(f"状态约束违反步数: {int(np.sum(~inside))}")
        self.log(f"最大水平 xᵀPx = {trajectory.max_level(cert.P):.6g} (γ = {cert.gamma:.6g})")
        self.log(f"安全控制律启用: {len(trajectory.episodes())} 段, {trajectory.activated_steps()} 步")

    def run_explore(self):
        shape = self.shape()
        doc = self.config.exploration
        prior = build_prior(self.config, self.model.n)
        schedule = ExplorationSchedule(
            prior=prior,
            intervals=build_intervals(self.config),
            recompute_period=doc.get("recompute_period"),
            stride=int(doc.get("stride", 10)),
            min_separation=float(doc.get("min_separation", 0.02)),
            gp_config=build_gp_config(self.config),
            max_halvings=int(doc.get("max_halvings", 0)),
            verify_samples=doc.get("verify_samples"),
        )
        gp = fit_gp(self.data, prior)
        initial = sweep_intervals(self.model, shape.E,
                                  lambda iv: bound_nonlinearity_gp(gp, shape.P, iv, schedule.gp_config, False),
                                  schedule.intervals, self.X, self.U, schedule.max_halvings, self.verbose)
        learner = build_policy(doc.get("learner", {"type": "safe"}), self.model, initial, self.config.seed,
                               shape.K0)
        sim = dict(self.config.simulation)
        sim.update({k: doc[k] for k in ("x0", "x0_mode", "x0_fraction") if k in doc})
        x0 = initial_state(sim, initial)
        trajectory, history = explore(self.model, self.oracle, self.data, schedule, learner, x0,
                                      float(doc.get("T", sim.get("T", 5.0))), sim.get("h"), shape.P, shape.E,
                                      self.X, self.U, build_filter(self.config), initial, self.verbose)
        trajectory.to_csv(self.out_dir / "trajectory.csv")
        history_frame(history).to_csv(self.out_dir / "history.csv", index=False, lineterminator="\n")
        final = history[-1].certificate
        self.describe(final)
        save_certificate(final, self.out_dir / "certificate.json")
        swaps = sum(1 for entry in history if entry.recomputed)
        self.log(f"重算 {len(history) - 1} 次, 替换证书 {swaps} 次")
        self.log(f"体积: {history[0].volume:.6g} → {history[-1].volume:.6g}")
        self.log(f"安全控制律启用: {len(trajectory.episodes())} 段, {trajectory.activated_steps()} 步")

    def run_baseline(self):
        doc = self.config.baseline
        if not doc:
            raise ConfigInvalid("baseline-robust 需要 baseline 配置")
        verdict = robust_baseline_1d(float(doc["bound_w"]), doc["x_range"], doc["u_range"])
        self.log(f"鲁棒基线 |w| ≤ {doc['bound_w']}: {verdict}")
        print_ok(str(verdict), self.verbose)


def raise_verification(cert: SafeCertificate):
    v = cert.verification
    raise SynthesisError(f"证书校验未通过: 状态违反行 {v.state_violations}, 输入违反行 {v.input_violations}, "
                         f"max V̇ = {v.vdot_max:.4g}")


def run_scenario(config: ScenarioConfig, command: str, out_dir: Union[str, Path], seed: Optional[int] = None,
                 verbose: Optional[bool] = None, base_dir: Optional[Path] = None) -> int:
    """
    执行一条命令并写出结果文件

    Args:
        config: 场景配置
        command: COMMANDS 之一
        out_dir: 输出目录
        seed: 覆盖配置中的随机种子
        verbose: 是否打印进度
        base_dir: 数据文件相对路径的基准目录

    Returns:
        退出码：0 成功，1 流水线错误，2 配置错误
    """
    verbose = Config().VERBOSE if verbose is None else verbose
    if command not in COMMANDS:
        print_fail(f"未知命令: {command}, 可选: {', '.join(COMMANDS)}", True)
        return 2
    if seed is not None:
        config = ScenarioConfig.from_dict({**config.to_dict(), "seed": int(seed)})
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    try:
        pipeline = ScenarioPipeline(config, out_dir, verbose, base_dir)
    except ConfigInvalid as e:
        print_fail(f"配置错误: {e}", True)
        (out_dir / "report.txt").write_text(f"命令: {command}\n状态: 配置错误\n{e}\n", encoding="utf-8")
        return 2

    handlers = {
        "shape": pipeline.run_shape,
        "bound-lipschitz": lambda: pipeline.run_bound("lipschitz"),
        "bound-gp": lambda: pipeline.run_bound("gp-grid" if config.bound_mode == "gp-grid" else "gp"),
        "synthesize": pipeline.run_synthesize,
        "verify": pipeline.run_verify,
        "simulate": pipeline.run_simulate,
        "explore": pipeline.run_explore,
        "baseline-robust": pipeline.run_baseline,
    }
    try:
        handlers[command]()
    except ConfigInvalid as e:
        pipeline.log(f"{type(e).__name__}: {e}")
        pipeline.write_report(command, "配置错误")
        print_fail(f"配置错误: {e}", True)
        return 2
    except SafenvelopeError as e:
        pipeline.log(f"{type(e).__name__}: {e}")
        pipeline.write_report(command, "失败")
        print_fail(f"{type(e).__name__}: {e}", True)
        return 1
    pipeline.write_report(command, "成功")
    print_ok(f"{command} 完成, 结果写入 {out_dir}", verbose)
    return 0
