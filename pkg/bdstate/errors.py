from typing import Optional


class PipelineError(ValueError):
    """流水线通用错误"""


class IngestionError(PipelineError):
    """LLD/特征文件读取错误"""

    def __init__(self, message: str, line_number: Optional[int] = None):
        if line_number is not None:
            message = f"第 {line_number} 行: {message}"
        super().__init__(message)
        self.line_number = line_number


class BoundsError(PipelineError):
    """帧区间越界"""


class DimensionError(PipelineError):
    """矩阵维度不一致"""


class LabelError(PipelineError):
    """类别标签错误（未知类别、单一类别、空类别等）"""


class SingularSystemError(PipelineError):
    """线性方程组病态，无法可靠求解"""

    def __init__(self, message: str, rcond: float):
        super().__init__(f"{message} (rcond={rcond:.3e})")
        self.rcond = rcond


class ContainerError(PipelineError):
    """模型容器版本或维度链不一致"""


class ConfigError(PipelineError):
    """配置项错误"""
