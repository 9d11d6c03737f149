#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
safenvelope 主程序

由数据综合椭球安全集与线性安全控制器，并在安全滤波器下做闭环仿真。
工作流：
1. 读取场景配置
2. 生成或读取数据
3. 形状综合
4. 各区间上的二次上界
5. 安全水平与控制器
6. 仿真 / 在线探索

使用示例:
    safenvelope synthesize --config illustrative2d --out output/illustrative2d
    safenvelope simulate --config my_convoy.json --out output/convoy --seed 3
    python main.py baseline-robust --config motivating1d --out output/baseline
"""

import argparse
import sys
from pathlib import Path

from src.Tools.exceptions import ConfigInvalid
from src.Tools.util.Colorful_Console import ColoredText, print_fail
from src.scenarios import COMMANDS, load_scenario_config, run_scenario


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="safenvelope", description="由数据综合椭球安全集与线性安全控制器")
    parser.add_argument("command", choices=COMMANDS, help="要执行的流水线阶段")
    parser.add_argument("--config", required=True, help="场景配置 JSON 文件，或内置场景名")
    parser.add_argument("--out", required=True, help="输出目录")
    parser.add_argument("--seed", type=int, default=None, help="随机种子，覆盖配置中的 seed")
    return parser


def main(argv=None) -> int:
    """主函数"""
    args = build_parser().parse_args(argv)

    print(ColoredText("safenvelope 安全集综合工具").pink())
    print("=" * 50)
    print(f"命令: {args.command}")
    print(f"配置: {args.config}")
    print(f"输出目录: {args.out}")
    print("=" * 50)

    print(ColoredText("步骤1: 读取场景配置...").blue())
    try:
        config = load_scenario_config(args.config)
    except ConfigInvalid as e:
        print_fail(f"配置错误: {e}")
        return 2
    print(ColoredText(f"✓ 场景: {config.scenario or config.oracle.get('name')}").green())

    print(ColoredText(f"\n步骤2: 执行 {args.command}...").blue())
    config_path = Path(args.config)
    base_dir = config_path.parent if config_path.is_file() else None
    code = run_scenario(config, args.command, args.out, seed=args.seed, verbose=True, base_dir=base_dir)

    print("\n" + "=" * 50)
    if code == 0:
        print(ColoredText("✓ 操作成功完成!").green())
    else:
        print(ColoredText(f"✗ 操作失败 (退出码 {code}), 详见 {Path(args.out) / 'report.txt'}").red())
    return code


if __name__ == "__main__":
    sys.exit(main())
