#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
安全水平与线性安全控制器

给定形状 E = P⁻¹ 和环 Γ 上的二次上界 Q，求
    max γ
    s.t. γ ∈ Γ
         γ(AE + EAᵀ + 2EQE) + BY + YᵀBᵀ ⪯ 0
         [[b_x², γa_xE], [γEa_xᵀ, γE]] ⪰ 0          (每一行状态约束)
         [[b_u², a_uY], [Yᵀa_uᵀ, γE]] ⪰ 0           (每一行输入约束)
得到安全集 {xᵀPx ≤ γ*} 和增益 K = γ*⁻¹Y*E⁻¹。
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.spatial import cKDTree
from scipy.special import gammaln

from .Tools.config import Config
from .Tools.exceptions import (
    AllIntervalsInfeasible,
    IntervalInfeasible,
    NumericalFailure,
    SingularP,
    SolverError,
    SynthesisError,
)
from .Tools.util.Colorful_Console import print_fail, print_ok, print_step, print_warn
from .convex_backend import INFEASIBLE, ConicProblem, solve_sdp
from .lipschitz_bound import Interval, QuadraticBound, sample_ellipsoid_surface
from .shape_synthesis import input_containment_block, state_containment_block
from .system_model import DataSet, LinearModel, NonlinearityOracle, Polytope

STATE_LMI_NOTE = ("状态包含 LMI 使用与支撑函数一致的形式 [[b², γaE], [γEaᵀ, γE]] ⪰ 0 "
                  "(等价于 γ·aEaᵀ ≤ b²), 而不是非对角块为 aE 的写法")


def ellipsoid_support(P, gamma: float, a) -> float:
    """
    max{aᵀx : xᵀPx ≤ γ} = √(γ·aᵀP⁻¹a)

    Raises:
        SingularP: P 非正定
    """
    if gamma < 0:
        raise ValueError(f"γ 不能为负, 实际为 {gamma}")
    P = np.atleast_2d(np.asarray(P, dtype=float))
    a = np.asarray(a, dtype=float).reshape(-1)
    try:
        factor = cho_factor(0.5 * (P + P.T), lower=True)
    except LinAlgError:
        raise SingularP("形状矩阵 P 必须正定")
    return float(math.sqrt(gamma * max(float(a @ cho_solve(factor, a)), 0.0)))


def safe_set_volume(P, gamma: float) -> float:
    """Vol(B₁)·√(γⁿ/det P)"""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    n = P.shape[0]
    sign, logdet = np.linalg.slogdet(P)
    if sign <= 0:
        raise SingularP("形状矩阵 P 必须正定")
    log_ball = 0.5 * n * math.log(math.pi) - gammaln(0.5 * n + 1)
    return float(math.exp(log_ball + 0.5 * (n * math.log(gamma) - logdet)))


@dataclass
class VerificationReport:
    state_ok: bool
    input_ok: bool
    vdot_max: float
    samples: int
    state_violations: List[int] = field(default_factory=list)
    input_violations: List[int] = field(default_factory=list)
    mode: str = "oracle"
    tol: float = 1e-6

    @property
    def passed(self) -> bool:
        return self.state_ok and self.input_ok and self.vdot_max <= self.tol

    def to_dict(self) -> Dict:
        return {"state_ok": bool(self.state_ok), "input_ok": bool(self.input_ok),
                "vdot_max": float(self.vdot_max), "samples": int(self.samples)}


@dataclass
class SafeCertificate:
    """安全集 {xᵀPx ≤ γ} 与安全控制律 u_S = Kx"""
    model: LinearModel
    X: Polytope
    U: Polytope
    P: np.ndarray
    E: np.ndarray
    gamma: float
    Y: np.ndarray
    K: np.ndarray
    interval: Interval
    bound: QuadraticBound
    verification: Optional[VerificationReport] = None
    warnings: List[str] = field(default_factory=list)
    lmi_residuals: Dict[str, float] = field(default_factory=dict)

    def level(self, x) -> float:
        x = np.asarray(x, dtype=float).reshape(-1)
        return float(x @ self.P @ x)

    @property
    def volume(self) -> float:
        return safe_set_volume(self.P, self.gamma)

    def to_dict(self) -> Dict:
        return {
            "P": self.P.tolist(),
            "E": self.E.tolist(),
            "gamma": float(self.gamma),
            "Y": self.Y.tolist(),
            "K": self.K.tolist(),
            "interval": self.interval.to_list(),
            "bound": self.bound.to_dict(),
            "verification": None if self.verification is None else self.verification.to_dict(),
            "warnings": list(self.warnings),
        }


def certificate_to_dict(cert: SafeCertificate) -> Dict:
    return cert.to_dict()


def save_certificate(cert: SafeCertificate, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(cert.to_dict(), f, ensure_ascii=False, indent=2)
    return path


def load_certificate(path: Union[str, Path], model: LinearModel, X: Polytope, U: Polytope) -> SafeCertificate:
    """读取证书 JSON；模型与约束不在文件里，由调用方给出"""
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    interval = Interval(*doc["interval"])
    bound_doc = doc["bound"]
    bound = QuadraticBound(Q=np.asarray(bound_doc["Q"], dtype=float), interval=interval,
                           kind=bound_doc["kind"], confidence=bound_doc.get("c"))
    verification = None
    if doc.get("verification"):
        v = doc["verification"]
        verification = VerificationReport(v["state_ok"], v["input_ok"], v["vdot_max"], v["samples"])
    return SafeCertificate(
        model=model, X=X, U=U,
        P=np.asarray(doc["P"], dtype=float),
        E=np.asarray(doc["E"], dtype=float),
        gamma=float(doc["gamma"]),
        Y=np.atleast_2d(np.asarray(doc["Y"], dtype=float)),
        K=np.atleast_2d(np.asarray(doc["K"], dtype=float)),
        interval=interval, bound=bound, verification=verification,
        warnings=list(doc.get("warnings", [])),
    )


def _min_eig(M) -> float:
    M = np.atleast_2d(M)
    return float(np.linalg.eigvalsh(0.5 * (M + M.T)).min())


def lmi_residuals(model: LinearModel, E, Q, gamma: float, Y, X: Polytope, U: Polytope) -> Dict[str, float]:
    """三类 LMI 在给定 (γ, Y) 处的最小特征值（≥ 0 表示满足）"""
    A, B = model.A, model.B
    decrease = gamma * (A @ E + E @ A.T + 2 * E @ Q @ E) + B @ Y + Y.T @ B.T
    state = [_min_eig(np.block([[np.array([[b ** 2]]), gamma * (a.reshape(1, -1) @ E)],
                                [gamma * (E @ a.reshape(-1, 1)), gamma * E]]))
             for a, b in zip(X.A_c, X.b_c)]
    inputs = [_min_eig(np.block([[np.array([[b ** 2]]), a.reshape(1, -1) @ Y],
                                 [Y.T @ a.reshape(-1, 1), gamma * E]]))
              for a, b in zip(U.A_c, U.b_c)]
    return {"decrease": _min_eig(-decrease),
            "state": min(state, default=0.0),
            "input": min(inputs, default=0.0)}


def _back_off(P, gamma: float, K, X: Polytope, U: Polytope, interval: Interval) -> float:
    """
    在 K 固定时把 γ 降到支撑函数检查精确成立的最大水平

    Raises:
        IntervalInfeasible: 该水平低于 γ₁
    """
    levels = [gamma]
    for a, b in zip(X.A_c, X.b_c):
        s = ellipsoid_support(P, 1.0, a)
        if s > 0:
            levels.append(b ** 2 / s ** 2)
    for a, b in zip(U.A_c, U.b_c):
        s = ellipsoid_support(P, 1.0, K.T @ a)
        if s > 0:
            levels.append(b ** 2 / s ** 2)
    limit = min(levels)
    if limit < gamma:
        limit *= 1 - 1e-10
    if limit < interval.gamma1:
        raise IntervalInfeasible(f"区间 {interval}: 支撑函数检查要求 γ ≤ {limit:.10g}, 低于区间下端")
    return limit


def synthesize_safe_set(model: LinearModel, E, bound: QuadraticBound, interval: Interval,
                        X: Polytope, U: Polytope, verbose: Optional[bool] = None) -> SafeCertificate:
    """
    求解安全水平 γ* 与增益 K

    Args:
        model: 线性模型
        E: 形状矩阵的逆 P⁻¹
        bound: 在 interval 上成立的二次上界
        interval: 区间 Γ
        X: 状态约束
        U: 输入约束
        verbose: 是否打印进度

    Returns:
        SafeCertificate（未做采样校验）

    Raises:
        IntervalInfeasible: 该区间上无可行 γ（含回退后低于 γ₁ 的情况）
        NumericalFailure: 求解器数值失败
    """
    verbose = Config().VERBOSE if verbose is None else verbose
    E = np.atleast_2d(np.asarray(E, dtype=float))
    E = 0.5 * (E + E.T)
    if _min_eig(E) <= 0:
        raise SingularP("E 必须正定")
    if not bound.interval.contains(interval):
        raise ValueError(f"上界所在区间 {bound.interval} 不包含 {interval}")
    n, m = model.n, model.m
    A, B, Q = model.A, model.B, np.asarray(bound.Q, dtype=float)

    problem = ConicProblem("safe_level")
    gamma = problem.scalar("gamma")
    Y = problem.matrix("Y", m, n)
    problem.add([gamma >= interval.gamma1, gamma <= interval.gamma2])
    problem.add_nsd(gamma * (A @ E + E @ A.T + 2 * E @ Q @ E) + B @ Y + Y.T @ B.T, "decrease")
    for j in range(X.rows):
        problem.add_psd(state_containment_block(X.A_c[j], X.b_c[j], E, gamma), f"state{j}")
    for k in range(U.rows):
        problem.add_psd(input_containment_block(U.A_c[k], U.b_c[k], Y, E, gamma), f"input{k}")
    problem.maximize(gamma)

    solution = solve_sdp(problem)
    if solution.status == INFEASIBLE:
        raise IntervalInfeasible(f"区间 {interval} 上没有可行的安全水平")
    if not solution.optimal:
        raise NumericalFailure(f"安全水平求解失败 (区间 {interval}, 状态: {solution.status}, "
                               f"残差 {solution.max_residual:.3g})")

    gamma_val = float(np.clip(solution["gamma"], interval.gamma1, interval.gamma2))
    P = np.linalg.inv(E)
    P = 0.5 * (P + P.T)
    K = np.atleast_2d(solution["Y"]) @ P / gamma_val
    gamma_val = _back_off(P, gamma_val, K, X, U, interval)
    Y_val = gamma_val * K @ E

    residuals = lmi_residuals(model, E, Q, gamma_val, Y_val, X, U)
    warnings = [STATE_LMI_NOTE] + list(bound.warnings)
    cert = SafeCertificate(model=model, X=X, U=U, P=P, E=E, gamma=gamma_val, Y=Y_val, K=K,
                           interval=interval, bound=bound, warnings=warnings, lmi_residuals=residuals)
    print_ok(f"区间 {interval}: γ* = {gamma_val:.6g}, K = {np.round(K, 4).tolist()}", verbose)
    return cert


def sweep_intervals(model: LinearModel, E, provider: Callable[[Interval], QuadraticBound],
                    intervals: Sequence[Interval], X: Polytope, U: Polytope,
                    max_halvings: Optional[int] = None, verbose: Optional[bool] = None) -> SafeCertificate:
    """
    按顺序尝试各区间，返回第一个可行的证书

    某个区间不可行时保留上端点、宽度减半重试，最多 max_halvings 次，然后换下一个区间。

    Raises:
        AllIntervalsInfeasible: 全部失败，异常中带每次尝试的失败原因
    """
    config = Config()
    verbose = config.VERBOSE if verbose is None else verbose
    max_halvings = config.MAX_HALVINGS if max_halvings is None else max_halvings
    failures = []
    for i, interval in enumerate(intervals, start=1):
        current = interval
        for attempt in range(max_halvings + 1):
            print_step(f"区间 {i}/{len(intervals)}: {current}" + (f" (第 {attempt} 次折半)" if attempt else ""),
                       verbose)
            try:
                bound = provider(current)
                return synthesize_safe_set(model, E, bound, current, X, U, verbose)
            except (SynthesisError, SolverError) as e:
                failures.append(f"{current}: {type(e).__name__}: {e}")
                print_fail(f"区间 {current} 不可行: {e}", verbose)
            current = current.halved()
    raise AllIntervalsInfeasible(f"{len(intervals)} 个区间 (含折半) 全部不可行", failures)


def verify_certificate(cert: SafeCertificate, source: Union[NonlinearityOracle, DataSet],
                       samples: Optional[int] = None, L: Optional[float] = None,
                       tol: float = 1e-6, seed: int = 0, verbose: Optional[bool] = None) -> VerificationReport:
    """
    事后校验安全集条件

    (i)  状态约束：每一行 √(γ·aᵀP⁻¹a) ≤ b
    (ii) 输入约束：每一行 √(γ·(Kᵀa)ᵀP⁻¹(Kᵀa)) ≤ b
    (iii) 在 samples 个边界点上 V̇ = 2γ⁻¹xᵀP((A+BK)x + d(x)) ≤ tol

    只有数据时 d 取最近数据点的值，并加上 L·||x − x_k|| 的余量，
    L 是 x ↦ xᵀPd(x) 的 Lipschitz 常数（默认取上界报告中的 L）。
    """
    verbose = Config().VERBOSE if verbose is None else verbose
    samples = samples or Config().VERIFY_SAMPLES
    P, gamma, K = cert.P, cert.gamma, cert.K

    state_violations = [j for j, (a, b) in enumerate(zip(cert.X.A_c, cert.X.b_c))
                        if ellipsoid_support(P, gamma, a) > b * (1 + 1e-12)]
    input_violations = [k for k, (a, b) in enumerate(zip(cert.U.A_c, cert.U.b_c))
                        if ellipsoid_support(P, gamma, K.T @ a) > b * (1 + 1e-12)]

    boundary = sample_ellipsoid_surface(P, gamma, samples, seed)
    closed = cert.model.A + cert.model.B @ K
    linear = np.einsum("ij,jk,ik->i", boundary, P, boundary @ closed.T)
    if isinstance(source, DataSet):
        mode = "data"
        if L is None:
            L = float(cert.bound.report.get("L", 0.0))
        dist, idx = cKDTree(source.xs).query(boundary)
        nonlinear = (np.einsum("ij,jk,ik->i", source.xs[idx], P, source.ds[idx]) + L * dist)
    else:
        mode = "oracle"
        nonlinear = np.einsum("ij,jk,ik->i", boundary, P, source(boundary))
    vdot = 2.0 / gamma * (linear + nonlinear)

    report = VerificationReport(
        state_ok=not state_violations,
        input_ok=not input_violations,
        vdot_max=float(np.max(vdot)),
        samples=int(boundary.shape[0]),
        state_violations=state_violations,
        input_violations=input_violations,
        mode=mode,
        tol=tol,
    )
    if report.passed:
        print_ok(f"证书校验通过: max V̇ = {report.vdot_max:.4g} ({report.samples} 个边界点, {mode})", verbose)
    else:
        print_warn(f"证书校验未通过: 状态违反行 {state_violations}, 输入违反行 {input_violations}, "
                   f"max V̇ = {report.vdot_max:.4g}", verbose)
    return report
