#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
凸优化后端

把综合逻辑与具体求解器隔开，只提供三类问题：
带矩阵不等式约束的线性 SDP、log-det 目标的 SDP、带线性约束的最小二乘。
建模用 cvxpy，默认求解器 CLARABEL，失败时退回 SCS。
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Type

import cvxpy as cp
import cvxpy.settings as s
import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .Tools.config import Config
from .Tools.exceptions import (
    DegenerateData,
    DimensionMismatch,
    FitInfeasible,
    NumericalFailure,
    SafenvelopeError,
)
from .Tools.util.Colorful_Console import print_warn

OPTIMAL = "Optimal"
INFEASIBLE = "Infeasible"
NUMERICAL_FAILURE = "NumericalFailure"


def symmetrize(expr):
    return 0.5 * (expr + expr.T)


class ConicProblem:
    """
    锥优化问题的构造器

    变量、线性约束、PSD 约束分别登记，PSD 块在加入时先对称化，
    求解后按最小特征值计算残差。
    """

    def __init__(self, name: str = "problem"):
        self.name = name
        self.variables: Dict[str, cp.Variable] = {}
        self.constraints: List[cp.Constraint] = []
        self.psd_blocks: List[Tuple[str, cp.Expression, cp.Constraint]] = []
        self.objective: Optional[cp.Minimize] = None

    def _register(self, name: str, var: cp.Variable) -> cp.Variable:
        if name in self.variables:
            raise ValueError(f"变量名重复: {name}")
        self.variables[name] = var
        return var

    def scalar(self, name: str, nonneg: bool = False) -> cp.Variable:
        return self._register(name, cp.Variable(name=name, nonneg=nonneg))

    def vector(self, name: str, size: int, nonneg: bool = False) -> cp.Variable:
        return self._register(name, cp.Variable(size, name=name, nonneg=nonneg))

    def matrix(self, name: str, rows: int, cols: int) -> cp.Variable:
        return self._register(name, cp.Variable((rows, cols), name=name))

    def symmetric(self, name: str, n: int) -> cp.Variable:
        return self._register(name, cp.Variable((n, n), name=name, symmetric=True))

    def add(self, constraint) -> None:
        """加入线性（仿射）约束"""
        if isinstance(constraint, (list, tuple)):
            self.constraints.extend(constraint)
        else:
            self.constraints.append(constraint)

    def add_psd(self, expr, label: Optional[str] = None) -> None:
        """expr ⪰ 0"""
        block = symmetrize(expr)
        constraint = block >> 0
        self.psd_blocks.append((label or f"psd{len(self.psd_blocks)}", block, constraint))
        self.constraints.append(constraint)

    def add_nsd(self, expr, label: Optional[str] = None) -> None:
        """expr ⪯ 0"""
        self.add_psd(-expr, label)

    def minimize(self, expr) -> None:
        self.objective = cp.Minimize(expr)

    def maximize(self, expr) -> None:
        self.objective = cp.Maximize(expr)

    def maximize_logdet(self, matrix_var) -> None:
        self.objective = cp.Maximize(cp.log_det(matrix_var))

    def to_cvxpy(self) -> cp.Problem:
        objective = self.objective if self.objective is not None else cp.Minimize(0)
        return cp.Problem(objective, self.constraints)


@dataclass
class ConicSolution:
    """求解结果：变量取值、状态、目标值、最大约束残差"""
    values: Dict[str, np.ndarray]
    status: str
    objective: Optional[float]
    max_residual: float
    solver: str = ""
    block_min_eigs: Dict[str, float] = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]


def _block_min_eig(value) -> float:
    value = np.atleast_2d(np.asarray(value, dtype=float))
    return float(np.linalg.eigvalsh(0.5 * (value + value.T)).min())


def _scale(constraint) -> float:
    values = [np.max(np.abs(np.atleast_1d(arg.value))) for arg in constraint.args if arg.value is not None]
    return max([1.0] + [float(v) for v in values])


def solver_options(solver: str, config: Config) -> Dict[str, float]:
    """把配置里的对偶间隙与可行性容差翻译成各求解器的参数名"""
    if solver == cp.CLARABEL:
        return {"tol_gap_abs": config.GAP_TOL, "tol_gap_rel": config.GAP_TOL, "tol_feas": config.SOLVER_FEAS_TOL}
    if solver == cp.SCS:
        return {"eps_abs": config.SOLVER_FEAS_TOL, "eps_rel": config.GAP_TOL}
    return {}


def _try_solve(problem: cp.Problem, solver: str, config: Config) -> Optional[str]:
    try:
        problem.solve(solver=solver, **solver_options(solver, config))
    except (cp.SolverError, ValueError, ArithmeticError):
        return None
    return problem.status


def solve_sdp(p: ConicProblem, tol: Optional[float] = None, solver: Optional[str] = None) -> ConicSolution:
    """
    求解锥优化问题

    Args:
        p: 问题构造器
        tol: PSD 约束允许的最小特征值残差（按块的量级相对化），默认取配置 FEAS_TOL
        solver: 求解器名，默认取配置 SOLVER

    Returns:
        ConicSolution；状态为 Optimal 时所有约束都满足容差
    """
    config = Config()
    tol = config.FEAS_TOL if tol is None else tol
    problem = p.to_cvxpy()

    used = solver or config.SOLVER
    status = _try_solve(problem, used, config)
    if status is None or status in (s.UNBOUNDED_INACCURATE, s.INFEASIBLE_INACCURATE, s.USER_LIMIT):
        fallback = config.FALLBACK_SOLVER
        if fallback and fallback != used:
            retry = _try_solve(problem, fallback, config)
            if retry is not None:
                status, used = retry, fallback

    values = {name: (None if var.value is None else np.array(var.value, dtype=float))
              for name, var in p.variables.items()}

    if status in (s.INFEASIBLE, s.INFEASIBLE_INACCURATE):
        return ConicSolution(values, INFEASIBLE, None, float("inf"), used)
    if status not in (s.OPTIMAL, s.OPTIMAL_INACCURATE) or any(v is None for v in values.values()):
        return ConicSolution(values, NUMERICAL_FAILURE, None, float("inf"), used)

    # 残差：PSD 块取 -最小特征值，其余约束取 cvxpy 给出的违反量，都按量级相对化
    residual = 0.0
    block_eigs = {}
    ok = True
    psd_ids = {id(constraint) for _, _, constraint in p.psd_blocks}
    for label, block, _ in p.psd_blocks:
        eig = _block_min_eig(block.value)
        block_eigs[label] = eig
        residual = max(residual, -eig)
        if -eig > tol * max(1.0, float(np.max(np.abs(block.value)))):
            ok = False
    for constraint in p.constraints:
        if id(constraint) in psd_ids:
            continue
        violation = float(np.max(np.atleast_1d(constraint.violation())))
        residual = max(residual, violation)
        if violation > tol * _scale(constraint):
            ok = False

    status_name = OPTIMAL if ok else NUMERICAL_FAILURE
    return ConicSolution(values, status_name, float(problem.value), residual, used, block_eigs)


def require_optimal(solution: ConicSolution, error: Type[SafenvelopeError], message: str) -> ConicSolution:
    """非 Optimal 时抛出指定异常"""
    if not solution.optimal:
        raise error(f"{message} (状态: {solution.status}, 求解器: {solution.solver})")
    return solution


def quadratic_values(xs: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """逐行计算 x_iᵀQx_i"""
    xs = np.atleast_2d(xs)
    return np.einsum("ij,jk,ik->i", xs, Q, xs)


def fit_quadratic_upper_bound(xs, ys) -> np.ndarray:
    """
    约束最小二乘拟合二次上界

    min ‖(x_iᵀQx_i − y_i)_i‖₂  s.t.  y_i ≤ x_iᵀQx_i

    目标取二范数（二阶锥），与平方和同解。

    Args:
        xs: (N, n) 输入点
        ys: (N,) 目标值

    Returns:
        对称矩阵 Q

    Raises:
        FitInfeasible: 存在 x_i = 0 且 y_i > 0
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    ys = np.asarray(ys, dtype=float).reshape(-1)
    if xs.shape[0] != ys.shape[0]:
        raise DimensionMismatch(f"点数 {xs.shape[0]} 与目标值数 {ys.shape[0]} 不一致")
    if xs.shape[0] == 0:
        raise FitInfeasible("拟合至少需要一个点")
    sq_norms = np.sum(xs ** 2, axis=1)
    if np.any((sq_norms == 0) & (ys > 0)):
        raise FitInfeasible("存在 x=0 且 y>0 的点, 约束 0 ≥ y 无法满足")

    n = xs.shape[1]
    problem = ConicProblem("quadratic_fit")
    Q = problem.symmetric("Q", n)
    fitted = cp.sum(cp.multiply(xs @ Q, xs), axis=1)
    problem.add(fitted >= ys)
    problem.minimize(cp.norm(fitted - ys, 2))
    solution = solve_sdp(problem)
    if solution["Q"] is None or solution.status == INFEASIBLE:
        raise NumericalFailure(f"二次上界拟合失败 (状态: {solution.status})")

    Q_val = 0.5 * (solution["Q"] + solution["Q"].T)
    # 求解器残差会让个别点略低于目标，按最坏点补一个 sI
    gap = ys - quadratic_values(xs, Q_val)
    mask = sq_norms > 0
    if np.any(gap[mask] > 0):
        shift = float(np.max(gap[mask] / sq_norms[mask]))
        Q_val = Q_val + (shift * (1 + 1e-9) + 1e-12) * np.eye(n)
    return Q_val


def min_volume_covering_ellipsoid(points) -> np.ndarray:
    """
    以原点为中心、覆盖全部点的最小体积椭球 {x : xᵀAx ≤ 1}

    Args:
        points: (N, n) 数据点

    Returns:
        正定矩阵 A

    Raises:
        DegenerateData: 点落在真子空间内
    """
    X = np.atleast_2d(np.asarray(points, dtype=float))
    n = X.shape[1]
    if X.shape[0] == 0 or np.linalg.matrix_rank(X) < n:
        raise DegenerateData("数据点落在真子空间内, 覆盖椭球退化")

    if n == 1:
        return np.array([[1.0 / float(np.max(X ** 2))]])

    # 中心椭球只需覆盖 ±x 的凸包顶点
    if n <= 3:
        sym = np.vstack([X, -X])
        try:
            X = sym[ConvexHull(sym).vertices]
        except QhullError as e:
            print_warn(f"凸包计算失败, 改用全部 {len(X)} 个点: {e}", Config().VERBOSE)

    problem = ConicProblem("mvee")
    A = problem.symmetric("A", n)
    problem.add_psd(A, "A")
    problem.add(cp.sum(cp.multiply(X @ A, X), axis=1) <= 1.0)
    problem.maximize_logdet(A)
    solution = require_optimal(solve_sdp(problem), NumericalFailure, "最小体积覆盖椭球求解失败")
    A_val = 0.5 * (solution["A"] + solution["A"].T)
    # 把残差吸收进缩放，保证 x_iᵀAx_i ≤ 1
    worst = float(np.max(quadratic_values(X, A_val)))
    if worst > 1.0:
        A_val = A_val / worst
    return A_val
