#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
safenvelope 异常层级

所有模块抛出的错误都继承自 SafenvelopeError。
数据/参数类错误同时继承 ValueError，求解/运行类错误同时继承 RuntimeError，
这样按内置异常类型捕获的调用方也能正常工作。
"""

from typing import Any, List, Optional


class SafenvelopeError(Exception):
    """所有 safenvelope 错误的基类"""


# ---- 数据集 ----

class DatasetError(SafenvelopeError, ValueError):
    """数据集读取或校验失败"""


class MalformedRow(DatasetError):
    """CSV 中某一行列数不对或含有非法浮点数"""

    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"第 {line_no} 行格式错误: {message}")


class EmptyFile(DatasetError):
    """数据文件为空"""


class EmptyDataSet(DatasetError):
    """操作需要至少一个数据点"""


class NoiseColumnsRejected(DatasetError):
    """数据必须无噪声，带噪声列的文件被拒绝"""


class PointOutsideConstraints(DatasetError):
    """数据点不在状态约束 X 内"""

    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"第 {line_no} 行: {message}")


class DimensionMismatch(SafenvelopeError, ValueError):
    """向量/矩阵维度不一致"""


class DegenerateData(SafenvelopeError, ValueError):
    """数据点落在真子空间内"""


class DegenerateRegion(SafenvelopeError, ValueError):
    """数据区域或约束多面体退化"""


class Uncontrollable(SafenvelopeError, ValueError):
    """(A, B) 不可控"""


class BadWidths(SafenvelopeError, ValueError):
    """区间宽度或网格分辨率不合法"""


class TooFewPoints(SafenvelopeError, ValueError):
    """数据点数量不足"""


class SingularP(SafenvelopeError, ValueError):
    """形状矩阵 P 非正定"""


class SingularCovariance(SafenvelopeError, ValueError):
    """GP 协方差矩阵奇异（通常是输入重复但目标值冲突）"""


class ConfigInvalid(SafenvelopeError, ValueError):
    """配置文件内容不合法"""


class UnknownScenario(ConfigInvalid):
    """未知的内置场景名"""


# ---- 凸优化求解 ----

class SolverError(SafenvelopeError, RuntimeError):
    """凸优化求解失败"""


class ConicInfeasible(SolverError):
    """求解器判定问题不可行"""


class NumericalFailure(SolverError):
    """数值问题导致求解失败或精度不足"""


class FitInfeasible(SolverError):
    """二次上界拟合不可行（存在 x=0 且 y>0 的点）"""


# ---- 综合 ----

class SynthesisError(SafenvelopeError, RuntimeError):
    """安全集综合过程中的失败"""


class SynthesisInfeasible(SynthesisError):
    """形状综合问题不可行"""


class EmptyRing(SynthesisError):
    """环形区域内没有数据点"""


class BoundInfeasible(SynthesisError):
    """S-procedure 约束不可满足"""


class AssumptionViolated(SynthesisError):
    """数据对环形区域的覆盖半径超过 δ"""

    def __init__(self, message: str, radius: Optional[float] = None):
        self.radius = radius
        super().__init__(message)


class IntervalInfeasible(SynthesisError):
    """在给定区间上找不到安全水平 γ"""


class AllIntervalsInfeasible(SynthesisError):
    """所有区间（含折半后的区间）都不可行"""

    def __init__(self, message: str, failures: Optional[List[str]] = None):
        self.failures = failures or []
        super().__init__(message)


class MaxIterationsExceeded(SynthesisError):
    """迭代次数用尽，bound 属性保存当前最好的上界"""

    def __init__(self, message: str, bound: Any = None, report: Optional[dict] = None):
        self.bound = bound
        self.report = report or {}
        super().__init__(message)


# ---- 仿真 ----

class SimulationError(SafenvelopeError, RuntimeError):
    """闭环仿真失败"""


class OutsideSafeSet(SimulationError):
    """状态已离开安全集"""

    def __init__(self, level: float, gamma: float, t: Optional[float] = None):
        self.level = level
        self.gamma = gamma
        self.t = t
        where = "" if t is None else f" (t={t:.4f}s)"
        super().__init__(f"状态超出安全集{where}: xᵀPx={level:.6g} > γ={gamma:.6g}")


class NonFiniteState(SimulationError):
    """积分得到 NaN 或 inf"""


class RecomputeInfeasible(SimulationError):
    """在线重算安全集失败，继续沿用旧证书"""
