"""
异常定义
"""

from typing import Optional, Union


class SensiprintError(Exception):
    """sensiprint 所有异常的基类"""


class InvalidInput(SensiprintError, ValueError):
    """输入不合法 (形状、取值范围、空数据集等)"""


class InvalidSpec(SensiprintError, ValueError):
    """输出规格 (OutputSpec) 不可用"""


class ParseError(SensiprintError, ValueError):
    """文件解析失败, location 为字节偏移或行号"""

    def __init__(self, message: str, location: Optional[Union[int, str]] = None):
        self.location = location
        if location is not None:
            message = f"{message} (at {location})"
        super().__init__(message)


class TransportError(SensiprintError):
    """远程预测服务不可达、超时或回复格式错误"""


class VerificationAborted(SensiprintError):
    """验证中途失败, partial 为已完成部分的报告"""

    def __init__(self, message: str, partial=None):
        self.partial = partial
        super().__init__(message)


class ServeError(SensiprintError):
    """服务启动失败"""


class ExperimentAborted(SensiprintError):
    """实验中途失败, partial 为部分结果"""

    def __init__(self, message: str, partial=None):
        self.partial = partial
        super().__init__(message)
