"""通用工具：运行参数、异常层级、彩色控制台输出"""

from .config import Config
from . import exceptions

__all__ = ["Config", "exceptions"]
