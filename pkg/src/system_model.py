#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
系统描述与数据集

ẋ = Ax + Bu + d(x) 中的已知线性部分 (A, B)、状态/输入约束多面体、
无噪声数据集 {(x_i, d(x_i))}，以及数据覆盖半径 δ 的检查工具。

所有类型构造后不可变，函数都是纯函数，可以在并行任务间只读共享。
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from .Tools.exceptions import (
    DegenerateRegion,
    DimensionMismatch,
    EmptyDataSet,
    EmptyFile,
    MalformedRow,
    NoiseColumnsRejected,
    PointOutsideConstraints,
)


def _as_matrix(value, name: str) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(value, dtype=float))
    if arr.ndim != 2:
        raise DimensionMismatch(f"{name} 必须是二维矩阵")
    return arr


@dataclass(frozen=True)
class LinearModel:
    """已知的线性部分 (A, B)"""
    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B.reshape(-1, 1)
        B = _as_matrix(B, "B")
        if A.shape[0] != A.shape[1]:
            raise DimensionMismatch(f"A 必须是方阵, 实际为 {A.shape}")
        if B.shape[0] != A.shape[0]:
            raise DimensionMismatch(f"B 的行数 {B.shape[0]} 与状态维数 {A.shape[0]} 不一致")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def controllability_rank(self) -> int:
        blocks = [self.B]
        for _ in range(self.n - 1):
            blocks.append(self.A @ blocks[-1])
        return int(np.linalg.matrix_rank(np.hstack(blocks)))

    @property
    def controllable(self) -> bool:
        return self.controllability_rank() == self.n


@dataclass(frozen=True)
class Polytope:
    """{p : A_c p ≤ b_c}，必须包含原点"""
    A_c: np.ndarray
    b_c: np.ndarray

    def __post_init__(self):
        A_c = _as_matrix(self.A_c, "A_c")
        b_c = np.asarray(self.b_c, dtype=float).reshape(-1)
        if A_c.shape[0] != b_c.shape[0]:
            raise DimensionMismatch(f"A_c 有 {A_c.shape[0]} 行, b_c 有 {b_c.shape[0]} 个元素")
        if np.any(b_c < 0):
            raise DegenerateRegion("多面体必须包含原点 (b_c ≥ 0)")
        object.__setattr__(self, "A_c", A_c)
        object.__setattr__(self, "b_c", b_c)

    @classmethod
    def box(cls, bounds) -> "Polytope":
        """
        由逐坐标上下界构造盒约束

        Args:
            bounds: 每个坐标一个元素，标量 b 表示 |p_i| ≤ b，二元组 (lo, hi) 表示 lo ≤ p_i ≤ hi

        Returns:
            Polytope
        """
        rows, rhs = [], []
        dim = len(bounds)
        for i, bound in enumerate(bounds):
            lo, hi = (-bound, bound) if np.isscalar(bound) else bound
            e = np.zeros(dim)
            e[i] = 1.0
            rows += [e, -e]
            rhs += [hi, -lo]
        return cls(np.array(rows), np.array(rhs))

    @property
    def rows(self) -> int:
        return self.A_c.shape[0]

    @property
    def dim(self) -> int:
        return self.A_c.shape[1]

    def contains(self, p) -> bool:
        return polytope_contains(self, p)


@dataclass(frozen=True)
class DataSet:
    """无噪声数据 {(x_i, d_i)}，xs 与 ds 都是 (N, n)"""
    xs: np.ndarray
    ds: np.ndarray

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=float)
        ds = np.asarray(self.ds, dtype=float)
        if xs.ndim == 1:
            xs = xs.reshape(-1, 1)
        if ds.ndim == 1:
            ds = ds.reshape(-1, 1)
        if xs.shape != ds.shape:
            raise DimensionMismatch(f"xs {xs.shape} 与 ds {ds.shape} 形状不一致")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ds", ds)

    @property
    def N(self) -> int:
        return self.xs.shape[0]

    @property
    def n(self) -> int:
        return self.xs.shape[1]

    def append(self, xs, ds) -> "DataSet":
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        ds = np.atleast_2d(np.asarray(ds, dtype=float))
        if xs.size == 0:
            return self
        return DataSet(np.vstack([self.xs, xs]), np.vstack([self.ds, ds]))

    def subset(self, indices) -> "DataSet":
        return DataSet(self.xs[indices], self.ds[indices])


@dataclass(frozen=True)
class DataRegion:
    """{x : xᵀA_δx ≤ 1}，其中每一点到最近数据点的距离 ≤ δ"""
    A_delta: np.ndarray
    delta: float

    def __post_init__(self):
        A = _as_matrix(self.A_delta, "A_delta")
        A = 0.5 * (A + A.T)
        if A.shape[0] != A.shape[1]:
            raise DimensionMismatch("A_delta 必须是方阵")
        if np.linalg.eigvalsh(A).min() <= 0:
            raise DegenerateRegion("A_delta 必须正定")
        if not self.delta > 0:
            raise DegenerateRegion(f"覆盖半径 δ 必须为正, 实际为 {self.delta}")
        object.__setattr__(self, "A_delta", A)
        object.__setattr__(self, "delta", float(self.delta))

    @property
    def n(self) -> int:
        return self.A_delta.shape[0]

    def contains(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.einsum("ij,jk,ik->i", x, self.A_delta, x) <= 1.0


@dataclass(frozen=True)
class NonlinearityOracle:
    """
    仿真侧的真实非线性 d(x)，综合算法本身从不读取

    fn 需要支持批量调用：输入形状 (..., n)，输出同形状。
    structure 可选，列出 (输出行, 依赖的输入坐标) 分组；未给出时每一行依赖全部坐标。
    """
    fn: Callable[[np.ndarray], np.ndarray]
    n: int
    lipschitz: Optional[float] = None
    name: str = "custom"
    structure: Optional[Tuple[Tuple[Tuple[int, ...], Tuple[int, ...]], ...]] = None

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n:
            raise DimensionMismatch(f"oracle 需要 {self.n} 维输入, 实际为 {x.shape[-1]}")
        return np.asarray(self.fn(x), dtype=float)

    def groups(self):
        if self.structure is None:
            everything = tuple(range(self.n))
            return ((everything, everything),)
        return self.structure


def zero_oracle(n: int) -> NonlinearityOracle:
    return NonlinearityOracle(fn=lambda x: np.zeros_like(x), n=n, lipschitz=0.0, name="zero")


# ---- 数据集读写 ----

def _expected_header(n: int):
    return [f"x{i + 1}" for i in range(n)] + [f"d{i + 1}" for i in range(n)]


def load_dataset(path: Union[str, Path], X: Optional[Polytope] = None) -> DataSet:
    """
    读取 CSV 数据集

    Args:
        path: CSV 文件路径，表头为 x1..xn,d1..dn
        X: 状态约束；给出时每个 x_i 都必须落在 X 内

    Returns:
        DataSet

    Raises:
        EmptyFile: 文件为空或只有表头
        NoiseColumnsRejected: 含有噪声列
        MalformedRow: 表头或某行列数不对、含非法浮点数
        PointOutsideConstraints: 某个 x_i 不在 X 内
        DimensionMismatch: X 的维数与数据不一致
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        raise EmptyFile(f"数据文件为空: {path}")

    lines = text.splitlines()
    header = [name.strip() for name in lines[0].split(",")]
    if any(name.lower().startswith(("noise", "sigma", "std")) for name in header):
        raise NoiseColumnsRejected(f"数据必须无噪声, 表头含噪声列: {lines[0]}")
    if len(header) % 2 != 0 or header != _expected_header(len(header) // 2) or not header:
        raise MalformedRow(1, f"表头必须是 x1..xn,d1..dn, 实际为 {lines[0]}")

    width = len(header)
    rows = [line_no for line_no, line in enumerate(lines[1:], start=2) if line.strip()]
    if not rows:
        raise EmptyFile(f"数据文件只有表头: {path}")
    for line_no in rows:
        line = lines[line_no - 1]
        if len(line.split(",")) != width:
            raise MalformedRow(line_no, f"需要 {width} 列, 实际为 {len(line.split(','))} 列")

    try:
        frame = pd.read_csv(path, dtype=float, skip_blank_lines=True)
    except ValueError as e:
        raise MalformedRow(0, f"无法解析浮点数: {e}")
    values = frame.to_numpy(dtype=float)
    if values.size and not np.all(np.isfinite(values)):
        bad = int(np.argwhere(~np.isfinite(values))[0][0]) + 2
        raise MalformedRow(bad, "含有空值或非有限数")
    n = width // 2
    xs = values[:, :n].reshape(-1, n)
    if X is not None:
        if X.dim != n:
            raise DimensionMismatch(f"状态约束是 {X.dim} 维的, 数据是 {n} 维的")
        outside = np.flatnonzero(np.any(xs @ X.A_c.T > X.b_c, axis=1))
        if outside.size:
            k = int(outside[0])
            raise PointOutsideConstraints(rows[k], f"x = {xs[k].tolist()} 不在状态约束 X 内")
    return DataSet(xs, values[:, n:].reshape(-1, n))


def save_dataset(data: DataSet, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(np.hstack([data.xs, data.ds]), columns=_expected_header(data.n))
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


def grid_points(low, high, spacing, n: int, dims: Optional[Sequence[int]] = None) -> np.ndarray:
    """
    在 dims 指定的坐标上生成等距网格，其余坐标为 0

    Args:
        low, high: 网格范围（标量或逐坐标）
        spacing: 网格间距
        n: 状态维数
        dims: 参与网格的坐标，默认全部

    Returns:
        (M, n) 网格点
    """
    dims = list(range(n)) if dims is None else list(dims)
    low = np.broadcast_to(np.asarray(low, dtype=float), (len(dims),))
    high = np.broadcast_to(np.asarray(high, dtype=float), (len(dims),))
    axes = []
    for lo, hi in zip(low, high):
        count = int(np.floor((hi - lo) / spacing + 1e-9)) + 1
        axes.append(lo + spacing * np.arange(count))
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.zeros((mesh[0].size, n))
    for k, dim in enumerate(dims):
        points[:, dim] = mesh[k].ravel()
    return points


def grid_dataset(oracle: NonlinearityOracle, low, high, spacing, dims=None,
                 keep: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> DataSet:
    """在网格上采样 oracle 生成无噪声数据"""
    xs = grid_points(low, high, spacing, oracle.n, dims)
    if keep is not None:
        xs = xs[keep(xs)]
    return DataSet(xs, oracle(xs))


# ---- 覆盖半径 ----

def sample_region(region: DataRegion, resolution: Optional[float] = None) -> np.ndarray:
    """按分辨率（默认 δ/4）在数据区域的外接盒上取网格，保留区域内的点"""
    resolution = resolution or region.delta / 4.0
    half = np.sqrt(np.diag(np.linalg.inv(region.A_delta)))
    axes = [np.arange(-h, h + resolution * 0.5, resolution) for h in half]
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.column_stack([m.ravel() for m in mesh])
    return points[region.contains(points)]


def covering_radius(data: DataSet, region: Union[DataRegion, np.ndarray],
                    resolution: Optional[float] = None) -> float:
    """
    区域内任一点到最近数据点的最大距离

    Args:
        data: 数据集
        region: DataRegion（按 δ/4 网格采样）或已经给出的采样点 (M, n)
        resolution: DataRegion 的采样分辨率

    Returns:
        覆盖半径 δ 的采样估计
    """
    if data.N == 0:
        raise EmptyDataSet("数据集为空, 无法计算覆盖半径")
    if isinstance(region, DataRegion):
        samples = sample_region(region, resolution)
    else:
        samples = np.atleast_2d(np.asarray(region, dtype=float))
        if samples.shape[1] != data.n and data.n == 1:
            samples = samples.reshape(-1, 1)
    if samples.shape[0] == 0:
        raise DegenerateRegion("区域采样为空")
    if samples.shape[1] != data.n:
        raise DimensionMismatch(f"采样点维数 {samples.shape[1]} 与数据维数 {data.n} 不一致")
    distances, _ = cKDTree(data.xs).query(samples)
    return float(np.max(distances))


def check_assumption(data: DataSet, region: DataRegion, resolution: Optional[float] = None) -> Tuple[bool, float]:
    """返回 (覆盖半径 ≤ δ, 覆盖半径)"""
    radius = covering_radius(data, region, resolution)
    return radius <= region.delta, radius


def data_region_from_data(data: DataSet, delta: float) -> DataRegion:
    """用数据点的最小体积覆盖椭球作为数据区域"""
    from .convex_backend import min_volume_covering_ellipsoid

    if data.N == 0:
        raise EmptyDataSet("数据集为空, 无法构造数据区域")
    return DataRegion(min_volume_covering_ellipsoid(data.xs), delta)


def nearest_datum(data: DataSet, x) -> Tuple[np.ndarray, np.ndarray]:
    """返回离 x 最近的数据点 (x_i, d_i)，距离相同时取下标最小者"""
    if data.N == 0:
        raise EmptyDataSet("数据集为空")
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != data.n:
        raise DimensionMismatch(f"查询点维数 {x.shape[0]} 与数据维数 {data.n} 不一致")
    k = int(np.argmin(np.linalg.norm(data.xs - x, axis=1)))
    return data.xs[k], data.ds[k]


def eval_dynamics(model: LinearModel, oracle: NonlinearityOracle, x, u) -> np.ndarray:
    """ẋ = Ax + Bu + d(x)"""
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    if x.shape[0] != model.n or u.shape[0] != model.m or oracle.n != model.n:
        raise DimensionMismatch(
            f"维数不一致: x={x.shape[0]}, u={u.shape[0]}, 模型 n={model.n}, m={model.m}, oracle n={oracle.n}")
    return model.A @ x + model.B @ u + oracle(x)


def polytope_contains(poly: Polytope, p) -> bool:
    """A_c p ≤ b_c，闭集，不加容差"""
    p = np.asarray(p, dtype=float).reshape(-1)
    if p.shape[0] != poly.dim:
        raise DimensionMismatch(f"向量维数 {p.shape[0]} 与多面体维数 {poly.dim} 不一致")
    return bool(np.all(poly.A_c @ p <= poly.b_c))
