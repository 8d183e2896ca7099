import logging
from typing import Callable, Dict, Sequence, Tuple

import numpy as np

from .errors import DimensionError, PipelineError
from .models import FeatureMatrix, FeatureVector, LldSeries

logger = logging.getLogger(__name__)

BD10_FUNCTIONALS = (
    "mean", "std", "curvature", "slope", "offset",
    "min", "min_relpos", "max", "max_relpos", "range",
)
MS2_FUNCTIONALS = ("mean", "std")


def _normalized_time(n_frames: int) -> np.ndarray:
    if n_frames == 1:
        return np.zeros(1)
    return np.arange(n_frames, dtype=np.float64) / (n_frames - 1)


def _relative_position(index: np.ndarray, n_frames: int) -> np.ndarray:
    if n_frames == 1:
        return np.zeros(index.shape, dtype=np.float64)
    return index.astype(np.float64) / (n_frames - 1)


def _shifted(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    base = x[0].copy()
    return base, x - base


def _check_frames(series: LldSeries):
    if series.n_frames == 0:
        raise PipelineError(f"片段 {series.clip_id}: 序列没有帧，无法计算泛函")


def _feature_names(series: LldSeries, functionals: Sequence[str]) -> Tuple[str, ...]:
    return tuple(f"{d}_{fn}" for d in series.descriptor_names for fn in functionals)


def summarize_bd10(series: LldSeries) -> FeatureVector:
    """
    每个描述子输出 10 个泛函：均值、总体标准差、二次拟合曲率、一次拟合斜率与截距、
    最小值及相对位置、最大值及相对位置、极差。时间轴归一化到 [0,1]。
    """
    _check_frames(series)
    x = series.frames
    n = series.n_frames
    t = _normalized_time(n)
    # 以首帧为基准拟合，常数序列的 std/斜率/曲率严格为 0
    base, dx = _shifted(x)

    mean = base + dx.mean(axis=0)
    std = dx.std(axis=0)

    if n >= 2:
        slope, offset = np.polyfit(t, dx, 1)
        offset = offset + base
    else:
        slope, offset = np.zeros(x.shape[1]), x[0].copy()

    if n >= 3:
        curvature = np.polyfit(t, dx, 2)[0]
    else:
        curvature = np.zeros(x.shape[1])

    # argmin/argmax 在并列时取第一次出现的位置
    min_idx = np.argmin(x, axis=0)
    max_idx = np.argmax(x, axis=0)
    minimum = x.min(axis=0)
    maximum = x.max(axis=0)

    table = np.column_stack([
        mean, std, curvature, slope, offset,
        minimum, _relative_position(min_idx, n),
        maximum, _relative_position(max_idx, n),
        maximum - minimum,
    ])
    return FeatureVector(values=table.reshape(-1), names=_feature_names(series, BD10_FUNCTIONALS))


def summarize_ms2(series: LldSeries) -> FeatureVector:
    """均值与总体标准差，用于维数很高的描述子"""
    _check_frames(series)
    base, dx = _shifted(series.frames)
    table = np.column_stack([base + dx.mean(axis=0), dx.std(axis=0)])
    return FeatureVector(values=table.reshape(-1), names=_feature_names(series, MS2_FUNCTIONALS))


def passthrough(series: LldSeries) -> FeatureVector:
    """预计算的片段级特征（如 LIWC 或 FAU 统计量）：恰好一行，按原样作为特征向量"""
    _check_frames(series)
    if series.n_frames != 1:
        raise PipelineError(f"片段 {series.clip_id}: 预计算特征必须恰好一行，实际 {series.n_frames} 行")
    return FeatureVector(values=series.frames[0].copy(), names=series.descriptor_names)


FUNCTIONAL_SETS: Dict[str, Callable[[LldSeries], FeatureVector]] = {
    "bd10": summarize_bd10,
    "ms2": summarize_ms2,
    "precomputed": passthrough,
}


def summarize(series: LldSeries, functional_set: str = "bd10") -> FeatureVector:
    try:
        summarizer = FUNCTIONAL_SETS[functional_set]
    except KeyError:
        raise PipelineError(f"未知的泛函集合: {functional_set}")
    return summarizer(series)


def stack_vectors(vectors: Sequence[FeatureVector], sample_ids: Sequence[str],
                  clip_ids: Sequence[str] = None) -> FeatureMatrix:
    """把若干特征向量按行堆叠为特征矩阵"""
    if not vectors:
        raise PipelineError("没有可堆叠的特征向量")
    names = vectors[0].names
    for sample_id, v in zip(sample_ids, vectors):
        if v.names != names:
            raise DimensionError(f"样本 {sample_id}: 特征名与第一个样本不一致")
    return FeatureMatrix(
        values=np.vstack([v.values for v in vectors]),
        feature_names=names,
        sample_ids=tuple(sample_ids),
        clip_ids=tuple(clip_ids) if clip_ids is not None else None,
    )
