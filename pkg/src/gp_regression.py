#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
逐维高斯过程回归

每个输出维度独立的 GP，平方指数核，常数均值，无观测噪声：
    μ(x)  = c_μ + k(x)ᵀ K⁻¹ (y − c_μ)
    σ²(x) = k(x,x) − k(x)ᵀ K⁻¹ k(x)
K 对角线加 jitter 后做 Cholesky 分解并保留，查询只做三角回代。
超参数由场景配置给定，不做优化。
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.spatial.distance import cdist

from .Tools.config import Config
from .Tools.exceptions import DimensionMismatch, EmptyDataSet, SingularCovariance
from .system_model import DataSet


def _per_dim(value, n: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float).reshape(-1)
    if arr.size == 1:
        arr = np.full(n, float(arr[0]))
    if arr.size != n:
        raise DimensionMismatch(f"{name} 需要 {n} 个元素, 实际为 {arr.size}")
    return arr


@dataclass(frozen=True)
class GpPrior:
    """
    逐维先验

    c_mu: 常数均值；sigma_f: 信号标准差（0 表示该维已知恒等于 c_mu）；
    lengthscale: 长度尺度；active_dims: 每个输出维度的核读取的输入坐标，默认全部
    """
    c_mu: np.ndarray
    sigma_f: np.ndarray
    lengthscale: np.ndarray
    jitter: float = 1e-10
    active_dims: Optional[Tuple[Tuple[int, ...], ...]] = None

    @classmethod
    def create(cls, n: int, c_mu=0.0, sigma_f=1.0, lengthscale=1.0, jitter: Optional[float] = None,
               active_dims: Optional[Sequence[Sequence[int]]] = None) -> "GpPrior":
        jitter = Config().JITTER if jitter is None else jitter
        dims = None if active_dims is None else tuple(tuple(int(j) for j in d) for d in active_dims)
        prior = cls(_per_dim(c_mu, n, "c_mu"), _per_dim(sigma_f, n, "sigma_f"),
                    _per_dim(lengthscale, n, "lengthscale"), float(jitter), dims)
        prior.validate()
        return prior

    @property
    def n(self) -> int:
        return self.c_mu.shape[0]

    def validate(self):
        if np.any(self.sigma_f < 0):
            raise ValueError("sigma_f 不能为负")
        if np.any(self.lengthscale <= 0):
            raise ValueError("lengthscale 必须为正")
        if self.jitter < 0:
            raise ValueError("jitter 不能为负")
        if self.active_dims is not None and len(self.active_dims) != self.n:
            raise DimensionMismatch(f"active_dims 需要 {self.n} 组")

    def dims(self, i: int) -> List[int]:
        if self.active_dims is None:
            return list(range(self.n))
        return list(self.active_dims[i])


def se_kernel(x, x2, sigma_f: float, lengthscale: float) -> float:
    """k(x, x') = σ_f² exp(−||x − x'||² / (2l²))"""
    diff = np.asarray(x, dtype=float).reshape(-1) - np.asarray(x2, dtype=float).reshape(-1)
    return float(sigma_f ** 2 * np.exp(-diff @ diff / (2.0 * lengthscale ** 2)))


def se_kernel_matrix(X1, X2, sigma_f: float, lengthscale: float) -> np.ndarray:
    sq = cdist(np.atleast_2d(X1), np.atleast_2d(X2), "sqeuclidean")
    return sigma_f ** 2 * np.exp(-sq / (2.0 * lengthscale ** 2))


@dataclass
class GpModel:
    """拟合后的逐维 GP，构造后只读"""
    prior: GpPrior
    X: np.ndarray
    Y: np.ndarray
    inputs: List[Optional[np.ndarray]] = field(repr=False)
    factors: List[Optional[tuple]] = field(repr=False)
    alphas: List[Optional[np.ndarray]] = field(repr=False)

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def n(self) -> int:
        return self.X.shape[1]

    def data(self) -> DataSet:
        return DataSet(self.X, self.Y)

    def extend(self, data: DataSet) -> "GpModel":
        """加入新数据后重新拟合，返回新模型"""
        return fit_gp(self.data().append(data.xs, data.ds), self.prior)

    def posterior_many(self, Xq) -> Tuple[np.ndarray, np.ndarray]:
        """
        批量后验

        Args:
            Xq: (M, n) 查询点

        Returns:
            (μ, σ²)，均为 (M, n)，σ² 截断到 ≥ 0
        """
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        if Xq.shape[1] != self.n:
            raise DimensionMismatch(f"查询点维数 {Xq.shape[1]} 与模型维数 {self.n} 不一致")
        M = Xq.shape[0]
        mu = np.tile(self.prior.c_mu, (M, 1))
        var = np.zeros((M, self.n))
        for i in range(self.n):
            sigma_f = self.prior.sigma_f[i]
            if sigma_f == 0 or self.factors[i] is None:
                continue
            dims = self.prior.dims(i)
            k = se_kernel_matrix(Xq[:, dims], self.inputs[i], sigma_f, self.prior.lengthscale[i])
            mu[:, i] += k @ self.alphas[i]
            v = cho_solve(self.factors[i], k.T)
            var[:, i] = sigma_f ** 2 - np.sum(k * v.T, axis=1)
        return mu, np.maximum(var, 0.0)


def fit_gp(data: DataSet, prior: GpPrior) -> GpModel:
    """
    拟合逐维 GP

    完全相同的输入且目标一致时先合并，目标冲突时报错。

    Args:
        data: 无噪声数据
        prior: 先验

    Returns:
        GpModel

    Raises:
        EmptyDataSet: 数据为空
        SingularCovariance: 输入重复但目标冲突，或分解失败
    """
    if data.N == 0:
        raise EmptyDataSet("GP 拟合需要至少一个数据点")
    if data.n != prior.n:
        raise DimensionMismatch(f"数据维数 {data.n} 与先验维数 {prior.n} 不一致")

    X, first, inverse = np.unique(data.xs, axis=0, return_index=True, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    Y = data.ds[first]
    if not np.allclose(data.ds, Y[inverse], rtol=0.0, atol=1e-12):
        raise SingularCovariance("存在输入相同但目标不同的数据点")

    n = X.shape[1]
    inputs: List[Optional[np.ndarray]] = []
    factors: List[Optional[tuple]] = []
    alphas: List[Optional[np.ndarray]] = []
    for i in range(n):
        sigma_f = prior.sigma_f[i]
        if sigma_f == 0:
            inputs.append(None)
            factors.append(None)
            alphas.append(None)
            continue
        # 投影到 active_dims 后重合的点合并
        Xi, first_i, inverse_i = np.unique(X[:, prior.dims(i)], axis=0, return_index=True, return_inverse=True)
        yi = Y[first_i, i]
        if not np.allclose(Y[:, i], yi[np.asarray(inverse_i).reshape(-1)], rtol=0.0, atol=1e-12):
            raise SingularCovariance(f"第 {i + 1} 维: 投影到 active_dims 后输入相同但目标不同")
        K = se_kernel_matrix(Xi, Xi, sigma_f, prior.lengthscale[i])
        K[np.diag_indices_from(K)] += prior.jitter
        try:
            factor = cho_factor(K, lower=True)
        except LinAlgError:
            raise SingularCovariance(f"第 {i + 1} 维协方差矩阵分解失败")
        inputs.append(Xi)
        factors.append(factor)
        alphas.append(cho_solve(factor, yi - prior.c_mu[i]))
    return GpModel(prior=prior, X=X, Y=Y, inputs=inputs, factors=factors, alphas=alphas)


def posterior(model: GpModel, x) -> Tuple[np.ndarray, np.ndarray]:
    """单点后验 (μ(x), σ²(x))，均为 (n,)"""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    mu, var = model.posterior_many(x)
    return mu[0], var[0]
