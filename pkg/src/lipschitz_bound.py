#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
基于 Lipschitz 常数的二次上界

在水平集环 R(Γ) = {γ₁ ≤ xᵀPx ≤ γ₂} ⊕ B_δ 上求对称矩阵 Q，使得
    x̄ᵀP d(x̄) ≤ x̄ᵀQx̄   对环上所有 x̄ 成立。
对环内每个数据点 x_k，目标值 p_k = x_kᵀP d(x_k) + δL 覆盖其 δ 邻域，
邻域条件用 S-procedure 写成 (n+1)×(n+1) 的 LMI 块。

数据量大时按块求解，每一轮加入 Q̃ ⪰ Q_prev，最终 Q 支配所有中间结果。
"""

import math
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import cvxpy as cp
import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.optimize import brentq, minimize_scalar
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist
from scipy.special import ndtri
from scipy.stats import qmc
from tqdm import tqdm

from .Tools.config import Config
from .Tools.exceptions import (
    AssumptionViolated,
    BadWidths,
    BoundInfeasible,
    EmptyRing,
    NumericalFailure,
    SafenvelopeError,
    SingularP,
    TooFewPoints,
)
from .Tools.util.Colorful_Console import print_ok, print_step, print_warn
from .convex_backend import INFEASIBLE, ConicProblem, quadratic_values, solve_sdp
from .system_model import DataSet, NonlinearityOracle


@dataclass(frozen=True)
class Interval:
    """水平区间 Γ = [γ₁, γ₂]，0 < γ₁ < γ₂"""
    gamma1: float
    gamma2: float

    def __post_init__(self):
        if not (0 < self.gamma1 < self.gamma2):
            raise BadWidths(f"区间必须满足 0 < γ₁ < γ₂, 实际为 [{self.gamma1}, {self.gamma2}]")

    @property
    def width(self) -> float:
        return self.gamma2 - self.gamma1

    def halved(self) -> "Interval":
        """保留上端点，宽度减半"""
        return Interval(self.gamma2 - 0.5 * self.width, self.gamma2)

    def contains(self, other: "Interval", tol: float = 1e-12) -> bool:
        return self.gamma1 <= other.gamma1 + tol and other.gamma2 <= self.gamma2 + tol

    def to_list(self) -> List[float]:
        return [self.gamma1, self.gamma2]

    def __str__(self):
        return f"[{self.gamma1:.4g}, {self.gamma2:.4g}]"


def make_intervals(gamma_bar: float, widths: Union[float, Sequence[float]],
                   count: Optional[int] = None, start: int = 0) -> List[Interval]:
    """
    构造从 γ̄ 向下排列的区间

    Args:
        gamma_bar: 上限 γ̄
        widths: 单一宽度 w，或逐个区间的宽度列表（相邻排列）
        count: 给出时按 Γ_i = [γ̄ − i·w − w, γ̄ − i·w] 生成 i = start..start+count−1
        start: 第一个区间的下标

    Returns:
        区间列表，按 γ₂ 从大到小
    """
    if not gamma_bar > 0:
        raise BadWidths(f"γ̄ 必须为正, 实际为 {gamma_bar}")

    if np.isscalar(widths):
        w = float(widths)
        if not w > 0:
            raise BadWidths(f"区间宽度必须为正, 实际为 {w}")
        count = 1 if count is None else int(count)
        bounds = [(gamma_bar - (i + 1) * w, gamma_bar - i * w) for i in range(start, start + count)]
    else:
        ws = [float(w) for w in widths]
        if not ws or any(not w > 0 for w in ws):
            raise BadWidths(f"区间宽度必须为正, 实际为 {ws}")
        if sum(ws) > gamma_bar:
            raise BadWidths(f"宽度之和 {sum(ws)} 超过 γ̄={gamma_bar}")
        upper = gamma_bar
        bounds = []
        for w in ws:
            bounds.append((upper - w, upper))
            upper -= w

    intervals = []
    for lo, hi in bounds:
        lo, hi = round(lo, 12), round(hi, 12)
        if lo <= 0:
            raise BadWidths(f"区间 [{lo}, {hi}] 的下端点不为正")
        intervals.append(Interval(lo, hi))
    return intervals


class Ring:
    """
    环 R(Γ) = {γ₁ ≤ yᵀPy ≤ γ₂} ⊕ B_δ(0)

    成员判定用欧氏距离：先用射线上界快速接受、用 √(xᵀPx) 的 Lipschitz 下界快速拒绝，
    其余点用特征分解后的一维乘子方程精确求到椭球面的距离。
    """

    def __init__(self, P, interval: Interval, delta: float = 0.0):
        P = np.atleast_2d(np.asarray(P, dtype=float))
        P = 0.5 * (P + P.T)
        lam, V = np.linalg.eigh(P)
        if lam.min() <= 0:
            raise SingularP("形状矩阵 P 必须正定")
        if delta < 0:
            raise BadWidths(f"δ 不能为负, 实际为 {delta}")
        self.P = P
        self.interval = interval
        self.delta = float(delta)
        self._lam = lam
        self._V = V

    @property
    def n(self) -> int:
        return self.P.shape[0]

    def levels(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.einsum("ij,jk,ik->i", X, self.P, X)

    def _surface_distance(self, x: np.ndarray, level: float, target: float) -> Optional[float]:
        """x 到 {yᵀPy = target} 的欧氏距离；退化时返回 None"""
        lam, c = self._lam, self._V.T @ x

        def g(mu):
            return float(np.sum(lam * c ** 2 / (1 + mu * lam) ** 2) - target)

        if level > target:
            hi = 1.0 / lam.min()
            while g(hi) > 0:
                hi *= 2.0
            mu = brentq(g, 0.0, hi, xtol=1e-14)
        else:
            top = lam == lam.max()
            if np.max(np.abs(c[top])) <= 1e-12 * max(1.0, np.linalg.norm(c)):
                return None
            lo, j = -1.0 / lam.max(), 1
            while g(lo * (1 - 2.0 ** -j)) <= 0 and j < 60:
                j += 1
            mu = brentq(g, lo * (1 - 2.0 ** -j), 0.0, xtol=1e-14)
        y = c / (1 + mu * lam)
        return float(np.linalg.norm(c - y))

    def distance(self, x) -> float:
        """到闭环带 {γ₁ ≤ yᵀPy ≤ γ₂} 的欧氏距离"""
        x = np.asarray(x, dtype=float).reshape(-1)
        level = float(x @ self.P @ x)
        g1, g2 = self.interval.gamma1, self.interval.gamma2
        if g1 <= level <= g2:
            return 0.0
        if level > g2:
            return self._surface_distance(x, level, g2)
        if level == 0.0:
            return math.sqrt(g1 / self._lam.max())
        exact = self._surface_distance(x, level, g1)
        if exact is None:
            # 退化方向取射线距离（上界）
            return float(np.linalg.norm(x) * (math.sqrt(g1 / level) - 1.0))
        return exact

    def contains(self, x) -> bool:
        return self.distance(x) <= self.delta * (1 + 1e-12)

    def members(self, X) -> np.ndarray:
        """批量成员判定，返回布尔数组"""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[0] == 0:
            return np.zeros(0, dtype=bool)
        g1, g2 = self.interval.gamma1, self.interval.gamma2
        levels = self.levels(X)
        norms = np.linalg.norm(X, axis=1)
        root = np.sqrt(levels)
        inside_band = (levels >= g1) & (levels <= g2)
        result = inside_band.copy()
        if self.delta == 0.0:
            return result

        with np.errstate(divide="ignore", invalid="ignore"):
            ray = np.where(levels > g2, norms * (1 - np.sqrt(g2 / levels)),
                           np.where(levels > 0, norms * (np.sqrt(g1 / np.where(levels > 0, levels, 1)) - 1), np.inf))
        lower = np.where(levels > g2, (root - math.sqrt(g2)), (math.sqrt(g1) - root)) / math.sqrt(self._lam.max())
        accept = ~inside_band & (ray <= self.delta)
        reject = ~inside_band & (lower > self.delta)
        result |= accept
        undecided = np.flatnonzero(~inside_band & ~accept & ~reject)
        for k in undecided:
            result[k] = self.contains(X[k])
        return result


# ---- 采样 ----

def _sobol(dim: int, count: int, seed: Optional[int]) -> np.ndarray:
    m = max(0, int(math.ceil(math.log2(max(count, 1)))))
    points = qmc.Sobol(d=dim, scramble=True, seed=seed).random_base2(m)[:count]
    return np.clip(points, 1e-12, 1 - 1e-12)


def _unit_directions(U: np.ndarray) -> np.ndarray:
    W = ndtri(U)
    norms = np.linalg.norm(W, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return W / norms


def _map_to_levels(P, directions: np.ndarray, levels: np.ndarray) -> np.ndarray:
    """x = √level · L⁻ᵀw，P = LLᵀ，于是 xᵀPx = level"""
    L = cholesky(np.asarray(P, dtype=float), lower=True)
    X = solve_triangular(L.T, directions.T, lower=False).T
    return X * np.sqrt(levels)[:, None]


def ring_sobol_points(P, interval: Interval, count: int, seed: Optional[int] = 0) -> np.ndarray:
    """在精确环（不膨胀）上按体积均匀地取 Sobol 点"""
    P = np.atleast_2d(P)
    n = P.shape[0]
    U = _sobol(n + 1, count, seed)
    directions = _unit_directions(U[:, :n])
    half = n / 2.0
    lo, hi = interval.gamma1 ** half, interval.gamma2 ** half
    levels = (lo + U[:, n] * (hi - lo)) ** (1.0 / half)
    return _map_to_levels(P, directions, levels)


def ring_random_points(P, interval: Interval, count: int, seed: Optional[int] = 0) -> np.ndarray:
    """同上，但用伪随机数"""
    P = np.atleast_2d(P)
    n = P.shape[0]
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((count, n))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    half = n / 2.0
    lo, hi = interval.gamma1 ** half, interval.gamma2 ** half
    levels = (lo + rng.random(count) * (hi - lo)) ** (1.0 / half)
    return _map_to_levels(P, directions, levels)


def sample_ellipsoid_surface(P, gamma: float, count: int, seed: Optional[int] = 0) -> np.ndarray:
    """椭球面 {xᵀPx = γ} 上的 Sobol 点；一维时只有两个点"""
    P = np.atleast_2d(P)
    n = P.shape[0]
    if n == 1:
        r = math.sqrt(gamma / float(P[0, 0]))
        return np.array([[r], [-r]])
    directions = _unit_directions(_sobol(n, count, seed))
    return _map_to_levels(P, directions, np.full(count, float(gamma)))


def ring_indices(data: DataSet, ring: Ring) -> np.ndarray:
    """落在 R(Γ) 内的数据下标"""
    if data.N == 0:
        return np.zeros(0, dtype=int)
    return np.flatnonzero(ring.members(data.xs))


def lyapunov_terms(xs: np.ndarray, ds: np.ndarray, P) -> np.ndarray:
    """逐行计算 x_kᵀP d_k"""
    return np.einsum("ij,jk,ik->i", np.atleast_2d(xs), np.atleast_2d(P), np.atleast_2d(ds))


def estimate_lipschitz(data: DataSet, P, indices: Optional[Iterable[int]] = None) -> float:
    """
    L̂ = 2·max |f(x_a) − f(x_b)| / ||x_a − x_b||，f(x) = xᵀPd(x)

    Raises:
        TooFewPoints: 少于两个不同的点
    """
    idx = np.arange(data.N) if indices is None else np.asarray(list(indices), dtype=int)
    if idx.size < 2:
        raise TooFewPoints(f"估计 Lipschitz 常数至少需要 2 个点, 实际为 {idx.size}")
    xs, ds = data.xs[idx], data.ds[idx]
    f = lyapunov_terms(xs, ds, P)
    dist = pdist(xs)
    diff = pdist(f.reshape(-1, 1), metric="cityblock")
    mask = dist > 0
    if not np.any(mask):
        raise TooFewPoints("所有点重合, 无法估计 Lipschitz 常数")
    return float(2.0 * np.max(diff[mask] / dist[mask]))


# ---- 二次上界 ----

@dataclass
class QuadraticBound:
    """
    环上的二次上界 x̄ᵀP d(x̄) ≤ x̄ᵀQx̄

    kind: "lipschitz" | "gp" | "gp-grid" | "envelope"
    confidence: GP 置信系数 c（gp-grid 时为 β）
    """
    Q: np.ndarray
    interval: Interval
    kind: str
    confidence: Optional[float] = None
    fit_residual: float = 0.0
    report: Dict = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)

    def values(self, X) -> np.ndarray:
        return quadratic_values(X, self.Q)

    def to_dict(self) -> Dict:
        return {"Q": np.asarray(self.Q).tolist(), "kind": self.kind, "c": self.confidence}


def _block(x: np.ndarray, p: float, delta: float, Q: np.ndarray, lam: float) -> np.ndarray:
    n = x.shape[0]
    top = Q + lam * np.eye(n)
    side = (-lam * x).reshape(-1, 1)
    corner = lam * (x @ x - delta ** 2) - p
    return np.block([[top, side], [side.T, np.array([[corner]])]])


def sprocedure_min_eigs(xs, targets, delta: float, Q, multipliers) -> np.ndarray:
    """每个 S-procedure 块的最小特征值（δ=0 时为 x_kᵀQx_k − p_k）"""
    xs = np.atleast_2d(xs)
    if delta == 0.0:
        return quadratic_values(xs, Q) - targets
    return np.array([np.linalg.eigvalsh(_block(x, p, delta, Q, lam)).min()
                     for x, p, lam in zip(xs, targets, multipliers)])


def _best_multiplier(x, p, delta, Q, lam0):
    """固定 Q 时使块的最小特征值最大的 λ（最小特征值关于 λ 是凹函数）"""
    upper = 10.0 * (abs(lam0) + 1.0)
    res = minimize_scalar(lambda lam: -np.linalg.eigvalsh(_block(x, p, delta, Q, lam)).min(),
                          bounds=(0.0, upper), method="bounded", options={"xatol": 1e-12})
    return float(res.x), float(-res.fun)


def _repair(xs, targets, delta, Q, lam, tol=1e-10):
    """
    求解残差导致个别块略负时，把 Q 抬高 sI 并重选这些块的 λ

    只会让上界更保守。
    """
    n = Q.shape[0]
    mins = sprocedure_min_eigs(xs, targets, delta, Q, lam)
    bad = np.flatnonzero(mins < -tol)
    if bad.size == 0:
        return Q, lam, 0.0

    sq = np.sum(np.atleast_2d(xs) ** 2, axis=1)
    if delta == 0.0:
        shift = float(np.max((targets[bad] - quadratic_values(xs[bad], Q)) / sq[bad])) * (1 + 1e-9)
        return Q + shift * np.eye(n), lam, shift

    lam = lam.copy()
    shift = 0.0
    for k in bad:
        def ok(s):
            return _best_multiplier(xs[k], targets[k], delta, Q + s * np.eye(n), lam[k])[1] >= -0.5 * tol

        hi = max(1e-12, abs(mins[k]))
        while not ok(hi):
            hi *= 4.0
            if hi > 1e8:
                raise NumericalFailure(f"S-procedure 块 {k} 无法修复")
        lo = 0.0
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            lo, hi = (lo, mid) if ok(mid) else (mid, hi)
        shift = max(shift, hi)
    Q = Q + shift * np.eye(n)
    for k in bad:
        lam[k] = _best_multiplier(xs[k], targets[k], delta, Q, lam[k])[0]
    return Q, lam, shift


def solve_quadratic_bound(xs, targets, delta: float, chunk_size: Optional[int] = None,
                          verbose: bool = False, label: str = "") -> Tuple[np.ndarray, Dict]:
    """
    S-procedure SDP：min ‖x_kᵀQx_k − p_k‖₂（与最小二乘同解，写成二阶锥），每个 x_k 的 δ 邻域内 x̄ᵀQx̄ ≥ p_k

    Args:
        xs: (K, n) 数据点
        targets: (K,) 目标值 p_k
        delta: 邻域半径；为 0 时退化为线性约束 x_kᵀQx_k ≥ p_k
        chunk_size: 每次求解的最大点数，超过时分块并加入 Q ⪰ Q_prev
        verbose: 是否显示进度
        label: 进度条标题

    Returns:
        (Q, report)；report 含 chunks、chain、min_block_eig、repair_shift
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    targets = np.asarray(targets, dtype=float).reshape(-1)
    K, n = xs.shape
    chunk_size = int(chunk_size or Config().CHUNK_SIZE)
    chunks = [np.arange(i, min(i + chunk_size, K)) for i in range(0, K, chunk_size)]

    Q_prev = None
    chain = []
    multipliers = np.zeros(K)
    iterator = tqdm(chunks, desc=f"S-procedure {label}".strip(), unit="块", disable=not verbose or len(chunks) == 1)
    for chunk in iterator:
        problem = ConicProblem("sprocedure")
        Q = problem.symmetric("Q", n)
        fitted = cp.sum(cp.multiply(xs[chunk] @ Q, xs[chunk]), axis=1)
        if delta > 0:
            lam = problem.vector("lam", len(chunk), nonneg=True)
            for j, k in enumerate(chunk):
                x = xs[k].reshape(-1, 1)
                corner = cp.reshape(lam[j] * ((x.T @ x).item() - delta ** 2) - targets[k], (1, 1), order="C")
                block = cp.bmat([[Q + lam[j] * np.eye(n), -lam[j] * x],
                                 [(-lam[j] * x).T, corner]])
                problem.add_psd(block, f"s{k}")
        else:
            problem.add(fitted >= targets[chunk])
        if Q_prev is not None:
            problem.add_psd(Q - Q_prev, "chain")
        problem.minimize(cp.norm(fitted - targets[chunk], 2))

        solution = solve_sdp(problem)
        if solution.status == INFEASIBLE:
            raise BoundInfeasible(f"S-procedure 约束不可满足 (区间 {label})")
        if solution["Q"] is None:
            raise NumericalFailure(f"S-procedure 求解失败 (状态: {solution.status})")
        Q_prev = 0.5 * (solution["Q"] + solution["Q"].T)
        chain.append(Q_prev)
        if delta > 0:
            multipliers[chunk] = np.maximum(solution["lam"], 0.0)

    Q_final, multipliers, shift = _repair(xs, targets, delta, chain[-1], multipliers)
    min_eig = float(np.min(sprocedure_min_eigs(xs, targets, delta, Q_final, multipliers)))
    if min_eig < -1e-7:
        raise NumericalFailure(f"S-procedure 块校验失败: 最小特征值 {min_eig:.3g}")
    chain_gap = min((float(np.linalg.eigvalsh(Q_final - Qj).min()) for Qj in chain), default=0.0)
    report = {
        "points": K,
        "chunks": len(chunks),
        "min_block_eig": min_eig,
        "chain_min_eig": chain_gap,
        "repair_shift": shift,
        "fit_residual": float(np.sqrt(np.mean((quadratic_values(xs, Q_final) - targets) ** 2))),
        "multipliers": multipliers,
    }
    return Q_final, report


def bound_nonlinearity_lipschitz(data: DataSet, P, interval: Interval, delta: float,
                                 L: Optional[float] = None, chunk_size: Optional[int] = None,
                                 check_assumption: bool = True, assumption_samples: Optional[int] = None,
                                 verbose: Optional[bool] = None) -> QuadraticBound:
    """
    在 R(Γ) 上求 Lipschitz 二次上界

    Args:
        data: 数据集
        P: 形状矩阵
        interval: 区间 Γ
        delta: 覆盖半径 δ
        L: x ↦ xᵀPd(x) 在环上的 Lipschitz 常数；None 时用数据估计 L̂（可能偏小）
        chunk_size: 分块大小
        check_assumption: 是否在环上采样检查覆盖半径
        assumption_samples: 覆盖检查的采样数
        verbose: 是否打印进度

    Returns:
        QuadraticBound

    Raises:
        EmptyRing: 环内没有数据
        BoundInfeasible: S-procedure 不可行
        AssumptionViolated: 数据未以 δ 覆盖环
    """
    config = Config()
    verbose = config.VERBOSE if verbose is None else verbose
    P = np.atleast_2d(np.asarray(P, dtype=float))
    ring = Ring(P, interval, delta)
    indices = ring_indices(data, ring)
    if indices.size == 0:
        raise EmptyRing(f"区间 {interval} 的环内没有数据点")

    warnings = []
    estimated = L is None
    if estimated:
        L = estimate_lipschitz(data, P, indices)
        message = f"使用数据估计的 Lipschitz 常数 L̂={L:.4g}, 该估计可能偏小, 上界不保证严格成立"
        warnings.append(message)
        print_warn(message, verbose)
    if L < 0:
        raise ValueError(f"Lipschitz 常数不能为负, 实际为 {L}")

    xs, ds = data.xs[indices], data.ds[indices]
    radius = None
    if check_assumption and delta > 0:
        samples = ring_sobol_points(P, interval, assumption_samples or config.ASSUMPTION_SAMPLES, seed=0)
        radius = float(np.max(cKDTree(xs).query(samples)[0]))
        if radius > delta * (1 + 1e-6):
            raise AssumptionViolated(f"环 {interval} 上的覆盖半径 {radius:.4g} 超过 δ={delta}", radius)

    print_step(f"Lipschitz 上界: 区间 {interval}, 数据 {indices.size} 个, L={L:.4g}, δ={delta}", verbose)
    targets = lyapunov_terms(xs, ds, P) + delta * L
    Q, report = solve_quadratic_bound(xs, targets, delta, chunk_size, verbose, str(interval))
    report.update({"L": float(L), "L_estimated": estimated, "delta": float(delta),
                   "covering_radius": radius, "indices": indices})
    print_ok(f"区间 {interval} 上界求解完成, λ_min(Q)={np.linalg.eigvalsh(Q).min():.4g}", verbose)
    return QuadraticBound(Q=Q, interval=interval, kind="lipschitz", confidence=None,
                          fit_residual=report["fit_residual"], report=report, warnings=warnings)


def audit_bound(bound: QuadraticBound, P, oracle: NonlinearityOracle, samples: Optional[int] = None,
                seed: int = 1) -> float:
    """在精确环上采样，返回 max(xᵀPd(x) − xᵀQx)；≤ 0 表示上界成立"""
    X = ring_sobol_points(P, bound.interval, samples or Config().AUDIT_SAMPLES, seed)
    excess = lyapunov_terms(X, oracle(X), P) - bound.values(X)
    return float(np.max(excess))


def compute_bounds(provider: Callable[[Interval], QuadraticBound], intervals: Sequence[Interval],
                   use_threads: Optional[bool] = None, max_workers: Optional[int] = None,
                   verbose: Optional[bool] = None) -> Tuple[Dict[Interval, QuadraticBound], Dict[Interval, str]]:
    """
    批量计算多个区间上的上界，各区间相互独立

    Returns:
        (成功的上界, 失败原因)
    """
    config = Config()
    verbose = config.VERBOSE if verbose is None else verbose
    use_threads = config.USE_THREADS if use_threads is None else use_threads
    max_workers = max_workers or config.MAX_WORKERS
    bounds, failures = {}, {}

    def run(interval):
        try:
            bounds[interval] = provider(interval)
        except (SafenvelopeError, ValueError, ArithmeticError, np.linalg.LinAlgError) as e:
            failures[interval] = f"{type(e).__name__}: {e}"

    if use_threads and len(intervals) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as executor:
            futures = {executor.submit(run, interval): interval for interval in intervals}
            with tqdm(total=len(intervals), desc="计算上界(并发)", unit="区间", disable=not verbose) as pbar:
                for future in as_completed(futures):
                    future.result()
                    pbar.update(1)
    else:
        for interval in tqdm(intervals, desc="计算上界", unit="区间", disable=not verbose):
            run(interval)

    for interval, reason in failures.items():
        print_warn(f"区间 {interval} 失败: {reason}", verbose)
    return bounds, failures
