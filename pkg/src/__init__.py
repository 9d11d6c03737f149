#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
safenvelope 源代码包

该包包含以下主要模块：
- system_model: 线性模型、约束、数据集与覆盖半径
- convex_backend: cvxpy 封装的 SDP / 拟合 / 覆盖椭球
- shape_synthesis: 安全集形状 P
- lipschitz_bound, gp_regression, gp_bound: 环上的二次上界
- safe_set_synthesis: 安全水平 γ*、增益 K 与证书校验
- runtime_sim: 安全滤波器、仿真与在线探索
- scenarios: 场景配置与命令流水线
- Tools: 运行参数、异常、控制台输出
"""

from .safe_set_synthesis import SafeCertificate, synthesize_safe_set, sweep_intervals, verify_certificate
from .scenarios import ScenarioConfig, load_scenario_config, run_scenario
from .shape_synthesis import synthesize_shape

__all__ = [
    'SafeCertificate',
    'ScenarioConfig',
    'load_scenario_config',
    'run_scenario',
    'synthesize_safe_set',
    'synthesize_shape',
    'sweep_intervals',
    'verify_certificate',
]

__version__ = '0.1.0'
