#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
高概率二次上界

f(x) 是 xᵀPd(x) 在 GP 后验下的 c-σ 上分位数：
    f(x) = xᵀPμ(x) + c·√(Σ_i ((Pᵀx)_i σ_i(x))²)
迭代流程：
    1. 在环上取 N₀ 个 Sobol 点，拟合二次上界 G(X, Y)
    2. 多起点投影梯度上升搜索 f(x) − xᵀQx > ε 的违反点
    3. 有违反点就加入样本重新拟合；没有时再做一次大样本校验
直到没有违反点。另有网格化的凸替代方案，以及基于最近数据点的确定性包络。
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import ndtr

from .Tools.config import Config
from .Tools.exceptions import BadWidths, MaxIterationsExceeded
from .Tools.util.Colorful_Console import print_ok, print_step, print_warn
from .convex_backend import fit_quadratic_upper_bound, quadratic_values
from .gp_regression import GpModel
from .lipschitz_bound import (
    Interval,
    QuadraticBound,
    Ring,
    ring_sobol_points,
    solve_quadratic_bound,
)
from .system_model import DataSet

BatchFunction = Callable[[np.ndarray], np.ndarray]


@dataclass
class GpBoundConfig:
    c: float = None
    initial_samples: int = None
    violation_tol: float = None
    max_iterations: int = None
    restarts: int = None
    fd_step: float = None
    fit_margin: float = None
    audit_samples: int = None
    beta: float = None
    delta_grid: Optional[float] = None
    max_new_points: int = 8
    ascent_steps: int = 60
    seed: int = 0

    def __post_init__(self):
        config = Config()
        defaults = {
            "c": config.CONFIDENCE,
            "initial_samples": config.INITIAL_SAMPLES,
            "violation_tol": config.VIOLATION_TOL,
            "max_iterations": config.MAX_ITERATIONS,
            "restarts": config.RESTARTS,
            "fd_step": config.FD_STEP,
            "fit_margin": config.FIT_MARGIN,
            "audit_samples": config.AUDIT_SAMPLES,
            "beta": config.GRID_BETA,
        }
        for name, value in defaults.items():
            if getattr(self, name) is None:
                setattr(self, name, value)
        if self.c < 0:
            raise ValueError(f"置信系数 c 不能为负, 实际为 {self.c}")
        if self.beta < 0:
            raise ValueError(f"β 不能为负, 实际为 {self.beta}")

    def check_dimension(self, n: int):
        if self.initial_samples < n * (n + 1) // 2:
            raise ValueError(f"初始样本数 {self.initial_samples} 少于确定 {n} 维二次型所需的 {n * (n + 1) // 2}")


def confidence_levels(c: float) -> Tuple[float, float]:
    """c-σ 对应的 (单侧, 双侧) 概率"""
    return float(ndtr(c)), float(2.0 * ndtr(c) - 1.0)


def upper_confidence_many(model: GpModel, P, X, c: float) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    W = X @ np.asarray(P, dtype=float)
    mu, var = model.posterior_many(X)
    return np.sum(W * mu, axis=1) + c * np.sqrt(np.sum(W ** 2 * var, axis=1))


def upper_confidence_form(model: GpModel, P, x, c: float) -> float:
    """单点 f(x)"""
    return float(upper_confidence_many(model, P, np.asarray(x, dtype=float).reshape(1, -1), c)[0])


def as_batch(f: Callable, n: int) -> BatchFunction:
    """把逐点函数包装成批量函数；本身支持批量时原样返回"""
    try:
        trial = np.asarray(f(np.zeros((2, n)) + 1.0))
        if trial.shape == (2,):
            return f
    except (TypeError, ValueError, IndexError) as e:
        print_warn(f"函数不支持批量输入, 改为逐点调用: {e}", Config().VERBOSE)
    return lambda X: np.array([float(f(x)) for x in np.atleast_2d(X)])


def _project(X: np.ndarray, P: np.ndarray, interval: Interval) -> np.ndarray:
    """按 P 度量径向缩放回环带"""
    levels = np.einsum("ij,jk,ik->i", X, P, X)
    scale = np.ones_like(levels)
    high = levels > interval.gamma2
    low = (levels < interval.gamma1) & (levels > 0)
    scale[high] = np.sqrt(interval.gamma2 / levels[high])
    scale[low] = np.sqrt(interval.gamma1 / levels[low])
    return X * scale[:, None]


def find_violations(f: BatchFunction, Q, ring: Ring, restarts: int = 64, tol: float = 1e-6,
                    fd_step: float = 1e-5, steps: int = 60, limit: int = 8, seed: int = 0,
                    starts: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    多起点投影梯度上升搜索 g(x) = f(x) − xᵀQx 的正值

    Args:
        f: 批量函数 (M, n) -> (M,)
        Q: 当前上界矩阵
        ring: 环（只用其精确环带）
        restarts: 起点数，Sobol 取点
        tol: 违反阈值 ε_v
        fd_step: 中心差分步长
        steps: 每个起点的最大上升步数
        limit: 最多返回的违反点数
        seed: Sobol 种子
        starts: 额外起点

    Returns:
        (违反点, 对应 g 值)，按 g 从大到小；没有违反点时为空数组
    """
    P, interval = ring.P, ring.interval
    n = P.shape[0]
    Q = np.asarray(Q, dtype=float)
    X = ring_sobol_points(P, interval, restarts, seed)
    if starts is not None and len(starts):
        X = np.vstack([X, np.atleast_2d(starts)])

    def g(Z):
        return f(Z) - quadratic_values(Z, Q)

    values = g(X)
    scale = float(np.sqrt(interval.gamma2 / np.linalg.eigvalsh(P).min()))
    t = np.full(X.shape[0], 0.05 * scale)
    active = np.ones(X.shape[0], dtype=bool)
    eye = np.eye(n) * fd_step
    for _ in range(steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        Z = X[idx]
        shifted = np.concatenate([Z[:, None, :] + eye[None], Z[:, None, :] - eye[None]], axis=1)
        fv = f(shifted.reshape(-1, n)).reshape(idx.size, 2 * n)
        grad = (fv[:, :n] - fv[:, n:]) / (2 * fd_step) - 2.0 * Z @ Q
        norm = np.linalg.norm(grad, axis=1)
        moved = np.zeros(idx.size, dtype=bool)
        # 回溯：步长减半直到 g 增加
        for _ in range(20):
            todo = ~moved & (norm > 0) & (t[idx] > 1e-12 * scale)
            if not np.any(todo):
                break
            cand = _project(Z[todo] + (t[idx][todo] / norm[todo])[:, None] * grad[todo], P, interval)
            cand_val = g(cand)
            better = cand_val > values[idx][todo] + 1e-4 * t[idx][todo] * norm[todo] * 1e-3
            rows = np.flatnonzero(todo)
            for r, ok, point, val in zip(rows, better, cand, cand_val):
                k = idx[r]
                if ok:
                    X[k], values[k] = point, val
                    t[k] = min(t[k] * 1.5, 0.5 * scale)
                    moved[r] = True
                else:
                    t[k] *= 0.5
        active[idx[~moved]] = False

    order = np.argsort(-values)
    chosen: List[int] = []
    min_sep = 1e-3 * scale
    for k in order:
        if values[k] <= tol or len(chosen) >= limit:
            break
        if all(np.linalg.norm(X[k] - X[j]) > min_sep for j in chosen):
            chosen.append(k)
    return X[chosen], values[chosen]


def find_violation(f: Callable, Q, ring: Ring, restarts: int = 64, tol: float = 1e-6,
                   fd_step: float = 1e-5, seed: int = 0) -> Optional[np.ndarray]:
    """返回最强的违反点 x*（f(x*) − x*ᵀQx* > tol），找不到时返回 None"""
    batch = as_batch(f, ring.n)
    points, _ = find_violations(batch, Q, ring, restarts, tol, fd_step, limit=1, seed=seed)
    return points[0] if len(points) else None


def bound_upper_envelope(f: Callable, P, interval: Interval, cfg: GpBoundConfig,
                         verbose: Optional[bool] = None, label: str = "") -> Tuple[np.ndarray, Dict]:
    """
    迭代求 f 在环上的二次上界

    Returns:
        (Q, report)

    Raises:
        MaxIterationsExceeded: 迭代次数用尽，异常中带当前最好的 Q
    """
    verbose = Config().VERBOSE if verbose is None else verbose
    P = np.atleast_2d(np.asarray(P, dtype=float))
    n = P.shape[0]
    cfg.check_dimension(n)
    f = as_batch(f, n)
    ring = Ring(P, interval, 0.0)

    X = ring_sobol_points(P, interval, cfg.initial_samples, cfg.seed)
    Y = f(X)
    audit_points = ring_sobol_points(P, interval, cfg.audit_samples, cfg.seed + 1)
    audit_values = f(audit_points)
    Q = None
    history = []
    for iteration in range(1, cfg.max_iterations + 1):
        Q = fit_quadratic_upper_bound(X, Y + cfg.fit_margin)
        points, excess = find_violations(f, Q, ring, cfg.restarts, cfg.violation_tol, cfg.fd_step,
                                         cfg.ascent_steps, cfg.max_new_points, cfg.seed + iteration)
        source = "search"
        if len(points) == 0:
            audit_excess = audit_values - quadratic_values(audit_points, Q)
            worst = np.argsort(-audit_excess)[:cfg.max_new_points]
            worst = worst[audit_excess[worst] > cfg.violation_tol]
            if worst.size == 0:
                report = {
                    "iterations": iteration,
                    "samples": int(X.shape[0]),
                    "restarts": cfg.restarts,
                    "audit_samples": int(audit_points.shape[0]),
                    "audit_max_excess": float(np.max(audit_excess)),
                    "history": history,
                }
                print_ok(f"{label} 区间 {interval}: {iteration} 次迭代后无违反点", verbose)
                return Q, report
            points, excess, source = audit_points[worst], audit_excess[worst], "audit"
        history.append({"iteration": iteration, "added": int(len(points)), "max_excess": float(np.max(excess)),
                        "source": source})
        X = np.vstack([X, points])
        Y = np.concatenate([Y, f(points)])

    raise MaxIterationsExceeded(f"{label} 区间 {interval}: {cfg.max_iterations} 次迭代后仍有违反点",
                                bound=Q, report={"iterations": cfg.max_iterations, "samples": int(X.shape[0]),
                                                 "history": history})


def _search_warning(cfg: GpBoundConfig, report: Dict) -> str:
    return (f"违反点搜索是尽力而为的多起点局部搜索 (起点 {cfg.restarts} 个), "
            f"校验样本最大残差 {report['audit_max_excess']:.3g}")


def bound_nonlinearity_gp(model: GpModel, P, interval: Interval, cfg: Optional[GpBoundConfig] = None,
                          verbose: Optional[bool] = None) -> QuadraticBound:
    """
    在环上求 GP 上分位数 f 的二次上界 Q_GP

    Args:
        model: 拟合后的 GP
        P: 形状矩阵
        interval: 区间 Γ（GP 模式下 γ̄ = 1）
        cfg: 迭代参数
        verbose: 是否打印进度

    Returns:
        QuadraticBound(kind="gp")
    """
    cfg = cfg or GpBoundConfig()
    verbose = Config().VERBOSE if verbose is None else verbose
    P = np.atleast_2d(np.asarray(P, dtype=float))
    print_step(f"GP 上界: 区间 {interval}, c={cfg.c}, 数据 {model.N} 个", verbose)
    Q, report = bound_upper_envelope(lambda X: upper_confidence_many(model, P, X, cfg.c),
                                     P, interval, cfg, verbose, "GP")
    one_sided, two_sided = confidence_levels(cfg.c)
    report.update({"one_sided": one_sided, "two_sided": two_sided})
    return QuadraticBound(Q=Q, interval=interval, kind="gp", confidence=float(cfg.c),
                          fit_residual=report["audit_max_excess"], report=report,
                          warnings=[_search_warning(cfg, report)])


def ring_grid(P, interval: Interval, delta_grid: float, max_points: int = 1_000_000) -> np.ndarray:
    """覆盖半径不超过 δ_grid 的立方网格，只保留膨胀环 R(Γ) 内的点"""
    if delta_grid is None or not delta_grid > 0:
        raise BadWidths(f"网格分辨率必须为正, 实际为 {delta_grid}")
    P = np.atleast_2d(np.asarray(P, dtype=float))
    n = P.shape[0]
    spacing = 2.0 * delta_grid / np.sqrt(n)
    half = np.sqrt(interval.gamma2 * np.diag(np.linalg.inv(P))) + delta_grid
    counts = np.floor(2 * half / spacing).astype(int) + 1
    if np.prod(counts.astype(float)) > max_points:
        raise BadWidths(f"网格点数 {np.prod(counts.astype(float)):.3g} 超过上限 {max_points}")
    axes = [-h + spacing * np.arange(c) for h, c in zip(half, counts)]
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.column_stack([m.ravel() for m in mesh])
    return points[Ring(P, interval, delta_grid).members(points)]


def bound_nonlinearity_gp_grid(model: GpModel, P, interval: Interval, cfg: Optional[GpBoundConfig],
                               L: float, chunk_size: Optional[int] = None,
                               verbose: Optional[bool] = None) -> QuadraticBound:
    """
    网格化凸方案：在 R(Γ) 的离散网格上令
        p_k = x_kᵀPμ(x_k) + β Σ_i σ_i(x_k) + δ_grid·L
    再交给 S-procedure SDP 求解
    """
    cfg = cfg or GpBoundConfig()
    verbose = Config().VERBOSE if verbose is None else verbose
    P = np.atleast_2d(np.asarray(P, dtype=float))
    grid = ring_grid(P, interval, cfg.delta_grid)
    print_step(f"GP 网格上界: 区间 {interval}, 网格点 {grid.shape[0]} 个, β={cfg.beta}", verbose)
    mu, var = model.posterior_many(grid)
    targets = (np.einsum("ij,jk,ik->i", grid, P, mu)
               + cfg.beta * np.sum(np.sqrt(var), axis=1)
               + cfg.delta_grid * L)
    Q, report = solve_quadratic_bound(grid, targets, cfg.delta_grid, chunk_size, verbose, str(interval))
    report.update({"grid_points": int(grid.shape[0]), "L": float(L), "beta": float(cfg.beta),
                   "delta_grid": float(cfg.delta_grid)})
    return QuadraticBound(Q=Q, interval=interval, kind="gp-grid", confidence=float(cfg.beta),
                          fit_residual=report["fit_residual"], report=report)


def lipschitz_envelope(data: DataSet, P, lipschitz: Sequence[float],
                       groups: Sequence[Tuple[Sequence[int], Sequence[int]]]) -> BatchFunction:
    """
    基于最近数据点的确定性包络

    对每组 (输出行 r, 依赖坐标 c)，若 d_r 关于 x_c 的 Lipschitz 常数为 L_g，则
        Σ_r (xᵀP)_r d_r(x) ≤ (xᵀP)_rᵀ d_r(x_k) + ||(xᵀP)_r||·L_g·||x_c − x_{k,c}||
    其中 x_k 是在坐标 c 上离 x 最近的数据点。不属于任何组的行视为恒为 0。
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    if len(lipschitz) != len(groups):
        raise ValueError(f"需要 {len(groups)} 个 Lipschitz 常数, 实际为 {len(lipschitz)}")
    trees = []
    for rows, coords in groups:
        trees.append((list(rows), list(coords), cKDTree(data.xs[:, list(coords)])))

    def envelope(X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        W = X @ P
        total = np.zeros(X.shape[0])
        for (rows, coords, tree), L in zip(trees, lipschitz):
            dist, idx = tree.query(X[:, coords])
            weights = W[:, rows]
            total += np.sum(weights * data.ds[idx][:, rows], axis=1)
            total += np.linalg.norm(weights, axis=1) * L * dist
        return total

    return envelope


def bound_nonlinearity_envelope(data: DataSet, P, interval: Interval, lipschitz: Sequence[float],
                                groups, cfg: Optional[GpBoundConfig] = None,
                                verbose: Optional[bool] = None) -> QuadraticBound:
    """用同一迭代流程对确定性包络求二次上界"""
    cfg = cfg or GpBoundConfig()
    verbose = Config().VERBOSE if verbose is None else verbose
    P = np.atleast_2d(np.asarray(P, dtype=float))
    print_step(f"包络上界: 区间 {interval}, 数据 {data.N} 个, 分组 {len(groups)} 个", verbose)
    f = lipschitz_envelope(data, P, lipschitz, groups)
    Q, report = bound_upper_envelope(f, P, interval, cfg, verbose, "包络")
    if report["audit_max_excess"] > 0:
        print_warn(f"包络校验最大残差 {report['audit_max_excess']:.3g}", verbose)
    return QuadraticBound(Q=Q, interval=interval, kind="envelope", confidence=None,
                          fit_residual=report["audit_max_excess"], report=report,
                          warnings=[_search_warning(cfg, report)])
