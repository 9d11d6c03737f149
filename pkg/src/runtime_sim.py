#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
闭环仿真

安全滤波器：状态到达安全集边界壳层 xᵀPx ≥ (1−ε_b)γ，或期望输入 ū 不在 U 内时，
改用安全控制律 u_S = Kx，否则直接放行 ū。
积分用定步长 RK4（输入在一步内保持不变）。
探索模式下沿轨迹收集数据，定期重新拟合 GP、重算安全水平，成功且校验通过时才替换证书。
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree
from tqdm import tqdm

from .Tools.config import Config
from .Tools.exceptions import NonFiniteState, OutsideSafeSet, RecomputeInfeasible, SafenvelopeError
from .Tools.util.Colorful_Console import print_ok, print_step, print_warn
from .gp_bound import GpBoundConfig, bound_nonlinearity_gp
from .gp_regression import GpPrior, fit_gp
from .lipschitz_bound import Interval
from .safe_set_synthesis import (
    SafeCertificate,
    sweep_intervals,
    verify_certificate,
)
from .system_model import DataSet, LinearModel, NonlinearityOracle, Polytope, eval_dynamics, polytope_contains

Policy = Callable[[float, np.ndarray], np.ndarray]


@dataclass
class FilterConfig:
    """
    boundary_fraction: 边界壳层厚度 ε_b；hold_steps: 安全动作至少保持的步数；
    outside_tolerance: 滤波器入口的越界容差（相对 γ）；
    discretization_tolerance: 仿真中允许的离散化越界（相对 γ）
    """
    boundary_fraction: float = None
    hold_steps: int = None
    outside_tolerance: float = 1e-9
    discretization_tolerance: float = 1e-3

    def __post_init__(self):
        config = Config()
        if self.boundary_fraction is None:
            self.boundary_fraction = config.BOUNDARY_FRACTION
        if self.hold_steps is None:
            self.hold_steps = config.HOLD_STEPS
        if not 0 < self.boundary_fraction < 1:
            raise ValueError(f"boundary_fraction 必须在 (0, 1) 内, 实际为 {self.boundary_fraction}")
        if self.hold_steps < 1:
            raise ValueError(f"hold_steps 至少为 1, 实际为 {self.hold_steps}")


def safety_filter(x, ubar, cert: SafeCertificate, cfg: Optional[FilterConfig] = None,
                  tolerance: Optional[float] = None) -> Tuple[np.ndarray, bool]:
    """
    安全滤波器

    Args:
        x: 当前状态，须在安全集内
        ubar: 期望输入
        cert: 安全证书
        cfg: 滤波器参数
        tolerance: 越界容差，默认 cfg.outside_tolerance

    Returns:
        (实际输入, 是否启用了安全控制律)

    Raises:
        OutsideSafeSet: x 超出安全集加容差
    """
    cfg = cfg or FilterConfig()
    tolerance = cfg.outside_tolerance if tolerance is None else tolerance
    x = np.asarray(x, dtype=float).reshape(-1)
    ubar = np.asarray(ubar, dtype=float).reshape(-1)
    level = cert.level(x)
    if level > cert.gamma * (1 + tolerance):
        raise OutsideSafeSet(level, cert.gamma)
    if level >= (1 - cfg.boundary_fraction) * cert.gamma or not polytope_contains(cert.U, ubar):
        return cert.K @ x, True
    return ubar, False


def step(model: LinearModel, oracle: NonlinearityOracle, x, u, h: float) -> np.ndarray:
    """一步经典 RK4，u 在步内保持不变"""
    if not h > 0:
        raise ValueError(f"步长必须为正, 实际为 {h}")
    x = np.asarray(x, dtype=float).reshape(-1)

    def f(state):
        return eval_dynamics(model, oracle, state, u)

    with np.errstate(over="ignore", invalid="ignore"):
        k1 = f(x)
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        x_next = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(x_next)):
        raise NonFiniteState(f"积分得到非有限状态: {x_next}")
    return x_next


@dataclass
class Trajectory:
    """t、x 比 u、ubar、active 多一行（末状态）"""
    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    ubar: np.ndarray
    active: np.ndarray

    @property
    def steps(self) -> int:
        return self.u.shape[0]

    def episodes(self) -> List[Tuple[int, int]]:
        """安全控制律连续启用的区段 [起始步, 结束步)"""
        flags = np.concatenate([[False], np.asarray(self.active, dtype=bool), [False]])
        edges = np.flatnonzero(np.diff(flags.astype(int)))
        return [(int(a), int(b)) for a, b in zip(edges[::2], edges[1::2])]

    def activated_steps(self) -> int:
        return int(np.sum(self.active))

    def max_level(self, P) -> float:
        return float(np.max(np.einsum("ij,jk,ik->i", self.x, np.asarray(P), self.x)))

    def to_frame(self) -> pd.DataFrame:
        n, m = self.x.shape[1], self.u.shape[1]
        pad = np.full((1, m), np.nan)
        columns = {"t": self.t}
        for i in range(n):
            columns[f"x{i + 1}"] = self.x[:, i]
        u = np.vstack([self.u, pad])
        ubar = np.vstack([self.ubar, pad])
        for j in range(m):
            columns[f"u{j + 1}"] = u[:, j]
        for j in range(m):
            columns[f"ubar{j + 1}"] = ubar[:, j]
        columns["safety_active"] = np.append(np.asarray(self.active, dtype=int), 0)
        return pd.DataFrame(columns)

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, lineterminator="\n")
        return path


def _check_start(cert: SafeCertificate, x0: np.ndarray, tolerance: float):
    level = cert.level(x0)
    if level > cert.gamma * (1 + tolerance):
        raise OutsideSafeSet(level, cert.gamma, 0.0)


def simulate(model: LinearModel, oracle: NonlinearityOracle, cert: SafeCertificate, policy: Policy,
             x0, T: float, h: Optional[float] = None, cfg: Optional[FilterConfig] = None,
             verbose: Optional[bool] = None) -> Trajectory:
    """
    在安全滤波器下仿真 ⌈T/h⌉ 步

    Raises:
        OutsideSafeSet: 初始状态不在安全集内，或离散化越界超过容差
    """
    config = Config()
    verbose = config.VERBOSE if verbose is None else verbose
    h = config.STEP if h is None else h
    cfg = cfg or FilterConfig()
    x = np.asarray(x0, dtype=float).reshape(-1)
    _check_start(cert, x, cfg.outside_tolerance)
    steps = int(math.ceil(T / h - 1e-9))

    ts = np.arange(steps + 1) * h
    xs = np.zeros((steps + 1, model.n))
    us = np.zeros((steps, model.m))
    ubars = np.zeros((steps, model.m))
    active = np.zeros(steps, dtype=bool)
    xs[0] = x
    hold = 0
    for k in tqdm(range(steps), desc="仿真", unit="步", disable=not verbose, mininterval=1.0):
        ubar = np.asarray(policy(ts[k], x), dtype=float).reshape(-1)
        try:
            u, fired = safety_filter(x, ubar, cert, cfg, cfg.discretization_tolerance)
        except OutsideSafeSet as e:
            raise OutsideSafeSet(e.level, e.gamma, ts[k])
        if fired:
            hold = cfg.hold_steps
        elif hold > 0:
            u, fired = cert.K @ x, True
        hold = max(hold - 1, 0)
        x = step(model, oracle, x, u, h)
        xs[k + 1], us[k], ubars[k], active[k] = x, u, ubar, fired

    trajectory = Trajectory(ts, xs, us, ubars, active)
    print_ok(f"仿真完成: {steps} 步, 安全控制律启用 {len(trajectory.episodes())} 段 "
             f"({trajectory.activated_steps()} 步), 最大水平 {trajectory.max_level(cert.P):.6g} / γ={cert.gamma:.6g}",
             verbose)
    return trajectory


# ---- 策略 ----

@dataclass
class LinearPolicy:
    K: np.ndarray

    def __call__(self, t, x):
        return np.atleast_2d(self.K) @ np.asarray(x, dtype=float)


@dataclass
class ConstantPolicy:
    u: np.ndarray

    def __call__(self, t, x):
        return np.asarray(self.u, dtype=float).reshape(-1)


class RandomExplorationLearner:
    """在线性增益附近做有界均匀探索：ū = Kx + w，|w_i| ≤ amplitude"""

    def __init__(self, K, amplitude: float = 0.5, seed: int = 0):
        self.K = np.atleast_2d(np.asarray(K, dtype=float))
        self.amplitude = float(amplitude)
        self.rng = np.random.default_rng(seed)

    def __call__(self, t, x):
        noise = self.rng.uniform(-self.amplitude, self.amplitude, self.K.shape[0])
        return self.K @ np.asarray(x, dtype=float) + noise


class SignedDerivativeLearner:
    """
    策略梯度的简化替代

    代价 c(x) = ||x||²，沿输入导数符号 sign(B) 下降：
        K ← K − η·sign(B)ᵀxxᵀ
    每 update_period 秒更新一次，探索噪声按 exp(−decay·t) 衰减，增益逐元素截断到 ±k_max。
    """

    def __init__(self, K0, B, learning_rate: float = 0.5, noise: float = 0.5, decay: float = 1.0,
                 update_period: float = 0.05, seed: int = 0, k_max: float = 10.0):
        self.K = np.atleast_2d(np.asarray(K0, dtype=float)).copy()
        self.direction = np.sign(np.atleast_2d(np.asarray(B, dtype=float))).T
        self.learning_rate = learning_rate
        self.noise = noise
        self.decay = decay
        self.update_period = update_period
        self.k_max = k_max
        self.rng = np.random.default_rng(seed)
        self._last_update = 0.0

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        if t - self._last_update >= self.update_period - 1e-12:
            self.K = np.clip(self.K - self.learning_rate * self.direction @ np.outer(x, x), -self.k_max, self.k_max)
            self._last_update = t
        scale = self.noise * math.exp(-self.decay * t)
        return self.K @ x + scale * self.rng.standard_normal(self.K.shape[0])


# ---- 探索 ----

@dataclass
class ExplorationSchedule:
    """
    recompute_period: 重算周期（秒）；stride: 每隔多少步采一个数据点；
    min_separation: 新数据点与已有数据的最小距离，过近的点不加入 GP
    """
    prior: GpPrior
    intervals: Sequence[Interval]
    recompute_period: float = None
    stride: int = 10
    min_separation: float = 0.02
    gp_config: Optional[GpBoundConfig] = None
    max_halvings: int = 0
    verify_samples: Optional[int] = None

    def __post_init__(self):
        if self.recompute_period is None:
            self.recompute_period = Config().RECOMPUTE_PERIOD
        if self.stride < 1:
            raise ValueError(f"stride 至少为 1, 实际为 {self.stride}")


@dataclass
class HistoryEntry:
    t: float
    gamma: float
    volume: float
    certificate: SafeCertificate = field(repr=False)
    recomputed: bool = False
    note: str = ""


def history_frame(history: Sequence[HistoryEntry]) -> pd.DataFrame:
    return pd.DataFrame({"t": [e.t for e in history],
                         "gamma": [e.gamma for e in history],
                         "volume": [e.volume for e in history]})


def _select_new(existing: np.ndarray, candidates: np.ndarray, min_separation: float) -> np.ndarray:
    """贪心保留与已有数据及彼此距离都不小于 min_separation 的点"""
    if candidates.shape[0] == 0:
        return np.zeros(0, dtype=int)
    if existing.shape[0]:
        dist, _ = cKDTree(existing).query(candidates)
        order = np.flatnonzero(dist >= min_separation)
    else:
        order = np.arange(candidates.shape[0])
    chosen = []
    for k in order:
        if all(np.linalg.norm(candidates[k] - candidates[j]) >= min_separation for j in chosen):
            chosen.append(k)
    return np.asarray(chosen, dtype=int)


def explore(model: LinearModel, oracle: NonlinearityOracle, initial_data: DataSet,
            schedule: ExplorationSchedule, learner: Policy, x0, T: float, h: Optional[float],
            P, E, X: Polytope, U: Polytope, filter_cfg: Optional[FilterConfig] = None,
            initial_certificate: Optional[SafeCertificate] = None,
            verbose: Optional[bool] = None) -> Tuple[Trajectory, List[HistoryEntry]]:
    """
    学习器在安全滤波器下运行，同时收集数据并定期重算安全水平

    d 直接在访问过的状态上读取 oracle（无噪声测量）。
    新证书只有在综合成功、用 oracle 校验通过、γ 不减小且当前状态仍在新集合内时才替换旧证书；
    否则打印警告并继续使用旧证书。

    Returns:
        (轨迹, 每次重算的历史记录；第 0 条为初始证书)
    """
    config = Config()
    verbose = config.VERBOSE if verbose is None else verbose
    h = config.STEP if h is None else h
    filter_cfg = filter_cfg or FilterConfig()
    if schedule.recompute_period < h:
        raise ValueError(f"重算周期 {schedule.recompute_period} 小于步长 {h}")
    gp_cfg = schedule.gp_config or GpBoundConfig()

    data = initial_data
    gp = fit_gp(data, schedule.prior)

    def synthesize(model_gp):
        return sweep_intervals(model, E, lambda iv: bound_nonlinearity_gp(model_gp, P, iv, gp_cfg, verbose=False),
                               schedule.intervals, X, U, schedule.max_halvings, verbose=False)

    cert = initial_certificate
    if cert is None:
        print_step("探索: 由初始数据综合安全集", verbose)
        cert = synthesize(gp)
    cert.verification = cert.verification or verify_certificate(cert, oracle, schedule.verify_samples,
                                                                verbose=False)
    history = [HistoryEntry(0.0, cert.gamma, cert.volume, cert, False, "initial")]

    x = np.asarray(x0, dtype=float).reshape(-1)
    _check_start(cert, x, filter_cfg.outside_tolerance)
    steps = int(math.ceil(T / h - 1e-9))
    period = max(1, int(round(schedule.recompute_period / h)))
    ts = np.arange(steps + 1) * h
    xs = np.zeros((steps + 1, model.n))
    us = np.zeros((steps, model.m))
    ubars = np.zeros((steps, model.m))
    active = np.zeros(steps, dtype=bool)
    xs[0] = x
    buffer = []
    hold = 0

    for k in tqdm(range(steps), desc="探索", unit="步", disable=not verbose, mininterval=1.0):
        ubar = np.asarray(learner(ts[k], x), dtype=float).reshape(-1)
        try:
            u, fired = safety_filter(x, ubar, cert, filter_cfg, filter_cfg.discretization_tolerance)
        except OutsideSafeSet as e:
            raise OutsideSafeSet(e.level, e.gamma, ts[k])
        if fired:
            hold = filter_cfg.hold_steps
        elif hold > 0:
            u, fired = cert.K @ x, True
        hold = max(hold - 1, 0)
        x = step(model, oracle, x, u, h)
        xs[k + 1], us[k], ubars[k], active[k] = x, u, ubar, fired
        if (k + 1) % schedule.stride == 0:
            buffer.append(x.copy())

        if (k + 1) % period:
            continue
        t = ts[k + 1]
        candidates = np.asarray(buffer).reshape(-1, model.n)
        buffer = []
        chosen = _select_new(data.xs, candidates, schedule.min_separation)
        note = f"新增 {chosen.size} 个数据点"
        recomputed = False
        if chosen.size:
            new_xs = candidates[chosen]
            try:
                data = data.append(new_xs, oracle(new_xs))
                gp = fit_gp(data, schedule.prior)
                candidate = synthesize(gp)
                report = verify_certificate(candidate, oracle, schedule.verify_samples, verbose=False)
                candidate.verification = report
                if not report.passed:
                    raise RecomputeInfeasible(f"新证书校验未通过 (max V̇={report.vdot_max:.3g})")
                if candidate.gamma < cert.gamma - 1e-9:
                    note += f", 新水平 {candidate.gamma:.4g} 小于当前 {cert.gamma:.4g}, 保留旧证书"
                elif candidate.level(x) > candidate.gamma:
                    note += ", 当前状态不在新安全集内, 保留旧证书"
                else:
                    cert, recomputed = candidate, True
            except SafenvelopeError as e:
                note += f", 重算失败: {e}"
                print_warn(f"t={t:.3f}s 重算失败, 继续使用旧证书: {e}", verbose)
        history.append(HistoryEntry(float(t), cert.gamma, cert.volume, cert, recomputed, note))

    trajectory = Trajectory(ts, xs, us, ubars, active)
    print_ok(f"探索完成: 数据 {data.N} 个, γ 从 {history[0].gamma:.4g} 到 {cert.gamma:.4g}, "
             f"安全控制律启用 {len(trajectory.episodes())} 段", verbose)
    return trajectory, history
