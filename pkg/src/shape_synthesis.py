#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
安全集形状综合

由线性模型求 P = E⁻¹ 及名义增益 K₀：
    max log det E
    s.t. A_δ⁻¹ ⪰ E                          (可选，数据区域约束)
         AE + EAᵀ + BY₀ + Y₀ᵀBᵀ ⪯ 0
         γ=1 时的状态、输入包含 LMI
"""

from dataclasses import dataclass
from typing import Optional

import cvxpy as cp
import numpy as np

from .Tools.config import Config
from .Tools.exceptions import DegenerateRegion, SynthesisInfeasible, Uncontrollable
from .Tools.util.Colorful_Console import print_ok, print_step
from .convex_backend import ConicProblem, solve_sdp
from .system_model import DataRegion, LinearModel, Polytope


@dataclass(frozen=True)
class ShapeResult:
    E: np.ndarray
    P: np.ndarray
    Y0: np.ndarray
    K0: np.ndarray
    logdet_value: float
    lyapunov_min_eig: float


def state_containment_block(a, b, E, gamma=1.0):
    """[[b², γaE], [γEaᵀ, γE]] ⪰ 0  ⇔  γ·aEaᵀ ≤ b²"""
    a = np.asarray(a, dtype=float).reshape(1, -1)
    return cp.bmat([[np.array([[b ** 2]]), gamma * (a @ E)],
                    [gamma * (E @ a.T), gamma * E]])


def input_containment_block(a, b, Y, E, gamma=1.0):
    """[[b², aY], [Yᵀaᵀ, γE]] ⪰ 0"""
    a = np.asarray(a, dtype=float).reshape(1, -1)
    return cp.bmat([[np.array([[b ** 2]]), a @ Y],
                    [Y.T @ a.T, gamma * E]])


def synthesize_shape(model: LinearModel, X: Polytope, U: Polytope,
                     region: Optional[DataRegion] = None, constrain_to_region: bool = True,
                     verbose: Optional[bool] = None) -> ShapeResult:
    """
    求解形状问题

    Args:
        model: 线性模型 (A, B)
        X: 状态约束
        U: 输入约束
        region: 数据区域 {xᵀA_δx ≤ 1}
        constrain_to_region: 是否加入 A_δ⁻¹ ⪰ E（GP 模式下去掉）
        verbose: 是否打印进度

    Returns:
        ShapeResult

    Raises:
        SynthesisInfeasible: 约束下不存在镇定的 E
        DegenerateRegion: 需要数据区域但未给出或退化
    """
    verbose = Config().VERBOSE if verbose is None else verbose
    if not model.controllable:
        raise Uncontrollable(f"(A, B) 不可控, 可控性矩阵秩为 {model.controllability_rank()} < {model.n}")
    if X.dim != model.n or U.dim != model.m:
        raise DegenerateRegion(f"约束维数不一致: X 为 {X.dim} 维, U 为 {U.dim} 维")

    n, m = model.n, model.m
    print_step(f"形状综合: n={n}, m={m}, 数据区域约束={'开' if constrain_to_region else '关'}", verbose)

    problem = ConicProblem("shape")
    E = problem.symmetric("E", n)
    Y0 = problem.matrix("Y0", m, n)

    if constrain_to_region:
        if region is None:
            raise DegenerateRegion("需要数据区域约束但没有给出数据区域")
        if region.n != n:
            raise DegenerateRegion(f"数据区域维数 {region.n} 与状态维数 {n} 不一致")
        problem.add_psd(np.linalg.inv(region.A_delta) - E, "region")

    A, B = model.A, model.B
    problem.add_nsd(A @ E + E @ A.T + B @ Y0 + Y0.T @ B.T, "lyapunov")
    for j in range(X.rows):
        problem.add_psd(state_containment_block(X.A_c[j], X.b_c[j], E), f"state{j}")
    for k in range(U.rows):
        problem.add_psd(input_containment_block(U.A_c[k], U.b_c[k], Y0, E), f"input{k}")
    problem.maximize_logdet(E)

    solution = solve_sdp(problem)
    if not solution.optimal:
        raise SynthesisInfeasible(f"形状综合不可行 (状态: {solution.status})")

    E_val = 0.5 * (solution["E"] + solution["E"].T)
    # log det 无界时求解器可能停在 E ≈ 0，按状态约束给出的尺度判定
    extent = min((b ** 2 / float(a @ a) for a, b in zip(X.A_c, X.b_c) if np.any(a)), default=1.0)
    if np.linalg.eigvalsh(E_val).min() <= Config().FEAS_TOL * max(extent, float(np.max(np.abs(E_val)))):
        raise SynthesisInfeasible("形状综合得到的 E 退化 (非正定)")
    Y_val = solution["Y0"]
    P = np.linalg.inv(E_val)
    P = 0.5 * (P + P.T)
    lyap = A @ E_val + E_val @ A.T + B @ Y_val + Y_val.T @ B.T
    result = ShapeResult(
        E=E_val,
        P=P,
        Y0=Y_val,
        K0=Y_val @ P,
        logdet_value=float(np.linalg.slogdet(E_val)[1]),
        lyapunov_min_eig=float(np.linalg.eigvalsh(-0.5 * (lyap + lyap.T)).min()),
    )
    print_ok(f"形状综合完成: log det E = {result.logdet_value:.4f}", verbose)
    return result
