import hashlib
from dataclasses import dataclass, field, asdict
from typing import Any, Dict, Iterator, Optional, Sequence, Tuple, Union

import numpy as np
import simplejson

from .errors import BoundsError, DimensionError, LabelError


@dataclass(frozen=True)
class LldSeries:
    """帧级低层描述子序列（一个片段或一个任务段）"""
    frames: np.ndarray  # F×d
    descriptor_names: Tuple[str, ...]
    clip_id: str
    task_id: Optional[int] = None

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def n_descriptors(self) -> int:
        return int(self.frames.shape[1])


@dataclass(frozen=True)
class TaskTimestamps:
    """片段内各任务的半开帧区间 [start, end)"""
    clip_id: str
    entries: Tuple[Tuple[int, int, int], ...]  # (task_id, start_frame, end_frame)

    def __post_init__(self):
        previous_task = 0
        previous_end = None
        for task_id, start, end in sorted(self.entries, key=lambda e: e[1]):
            if not 1 <= task_id <= 7:
                raise BoundsError(f"片段 {self.clip_id}: 任务编号超出 1..7: {task_id}")
            if start < 0 or start >= end:
                raise BoundsError(f"片段 {self.clip_id}: 任务 {task_id} 区间无效 [{start}, {end})")
            if previous_end is not None and start < previous_end:
                raise BoundsError(f"片段 {self.clip_id}: 任务 {task_id} 与前一任务区间重叠")
            if task_id <= previous_task:
                raise BoundsError(f"片段 {self.clip_id}: 任务编号必须按时间严格递增")
            previous_task = task_id
            previous_end = end

    @property
    def task_ids(self) -> Tuple[int, ...]:
        return tuple(e[0] for e in self.entries)


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    names: Tuple[str, ...]


@dataclass(frozen=True)
class FeatureMatrix:
    """样本 × 特征矩阵，带列名与样本编号"""
    values: np.ndarray  # N×k
    feature_names: Tuple[str, ...]
    sample_ids: Tuple[str, ...]
    clip_ids: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        if self.values.ndim != 2:
            raise DimensionError(f"特征矩阵必须是二维的，实际维数 {self.values.ndim}")
        n, k = self.values.shape
        if len(self.feature_names) != k:
            raise DimensionError(f"列名数量 {len(self.feature_names)} 与列数 {k} 不一致")
        if len(self.sample_ids) != n:
            raise DimensionError(f"样本编号数量 {len(self.sample_ids)} 与行数 {n} 不一致")
        if self.clip_ids is not None and len(self.clip_ids) != n:
            raise DimensionError(f"片段编号数量 {len(self.clip_ids)} 与行数 {n} 不一致")

    @property
    def n_samples(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.values.shape[1])

    @property
    def clips(self) -> Tuple[str, ...]:
        return self.clip_ids if self.clip_ids is not None else self.sample_ids

    def take(self, rows: Sequence[int]) -> 'FeatureMatrix':
        rows = np.asarray(rows, dtype=int)
        return FeatureMatrix(
            values=self.values[rows],
            feature_names=self.feature_names,
            sample_ids=tuple(self.sample_ids[i] for i in rows),
            clip_ids=None if self.clip_ids is None else tuple(self.clip_ids[i] for i in rows),
        )

    def with_values(self, values: np.ndarray,
                    feature_names: Optional[Sequence[str]] = None) -> 'FeatureMatrix':
        return FeatureMatrix(
            values=values,
            feature_names=tuple(feature_names) if feature_names is not None else self.feature_names,
            sample_ids=self.sample_ids,
            clip_ids=self.clip_ids,
        )


@dataclass(frozen=True)
class Dataset:
    """带标签的特征矩阵"""
    matrix: FeatureMatrix
    labels: Tuple[str, ...]
    class_labels: Tuple[str, ...]

    def __post_init__(self):
        if len(self.labels) != self.matrix.n_samples:
            raise DimensionError(f"标签数量 {len(self.labels)} 与样本数 {self.matrix.n_samples} 不一致")
        unknown = sorted(set(self.labels) - set(self.class_labels))
        if unknown:
            raise LabelError(f"未知的类别标签: {unknown}")

    @property
    def n_samples(self) -> int:
        return self.matrix.n_samples

    def take(self, rows: Sequence[int]) -> 'Dataset':
        return Dataset(
            matrix=self.matrix.take(rows),
            labels=tuple(self.labels[i] for i in rows),
            class_labels=self.class_labels,
        )


@dataclass(frozen=True)
class ProbMatrix:
    """N×t 类别概率矩阵，每行和为 1"""
    values: np.ndarray
    class_labels: Tuple[str, ...]
    sample_ids: Tuple[str, ...]

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != len(self.class_labels):
            raise DimensionError(f"概率矩阵形状 {self.values.shape} 与类别数 {len(self.class_labels)} 不一致")
        if self.values.shape[0] != len(self.sample_ids):
            raise DimensionError(f"概率矩阵行数 {self.values.shape[0]} 与样本编号数 {len(self.sample_ids)} 不一致")

    @property
    def n_samples(self) -> int:
        return int(self.values.shape[0])

    def predicted_labels(self) -> Tuple[str, ...]:
        idx = np.argmax(self.values, axis=1)
        return tuple(self.class_labels[i] for i in idx)

    def take(self, rows: Sequence[int]) -> 'ProbMatrix':
        rows = np.asarray(rows, dtype=int)
        return ProbMatrix(self.values[rows], self.class_labels,
                          tuple(self.sample_ids[i] for i in rows))


@dataclass(frozen=True)
class ZStats:
    means: np.ndarray
    stds: np.ndarray
    fitted_on: int


@dataclass(frozen=True)
class PcaModel:
    component_matrix: np.ndarray  # k×m
    column_means: np.ndarray
    explained_variance_fractions: np.ndarray

    @property
    def n_components(self) -> int:
        return int(self.component_matrix.shape[1])


@dataclass(frozen=True)
class FeatureSelection:
    kept_indices: np.ndarray
    importances: np.ndarray


@dataclass(frozen=True)
class KelmModel:
    """训练好的核极限学习机"""
    train_matrix: np.ndarray
    beta: np.ndarray
    gamma: float
    C: float
    weighting: str  # unweighted, weighted
    class_labels: Tuple[str, ...]


@dataclass(frozen=True)
class FusedElm:
    """加权与非加权核 ELM 的概率融合"""
    unweighted: KelmModel
    weighted: KelmModel
    alpha: float


@dataclass(frozen=True)
class ModelParams:
    c_u: float
    c_w: float
    gamma: Union[float, str]
    alpha: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class ModalityOutput:
    modality: str
    probs: ProbMatrix
    dev_uar: Optional[float] = None

    @property
    def labels(self) -> Tuple[str, ...]:
        return self.probs.predicted_labels()


@dataclass(frozen=True)
class DirichletWeights:
    alphas: Tuple[float, float, float]


@dataclass(frozen=True)
class ConfusionMatrix:
    """行为真实类别、列为预测类别"""
    counts: np.ndarray
    class_labels: Tuple[str, ...]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_dict(self) -> Dict[str, Any]:
        return {
            'class_labels': list(self.class_labels),
            'counts': self.counts.astype(int).tolist(),
        }


@dataclass(frozen=True)
class FoldPlan:
    folds: Tuple[np.ndarray, ...]
    seed: int
    stratified: bool

    @property
    def k(self) -> int:
        return len(self.folds)

    @property
    def n_samples(self) -> int:
        return int(sum(len(f) for f in self.folds))

    def splits(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        """依次给出 (训练下标, 验证下标)"""
        for i, held_out in enumerate(self.folds):
            train = np.sort(np.concatenate([f for j, f in enumerate(self.folds) if j != i]))
            yield train, held_out

    def digest(self) -> str:
        hash_md5 = hashlib.md5()
        for i, fold in enumerate(self.folds):
            hash_md5.update(f"{i}:{','.join(str(int(x)) for x in sorted(fold))};".encode('utf-8'))
        return hash_md5.hexdigest()


@dataclass(frozen=True)
class DevSplit:
    """固定的训练/验证划分"""
    train_indices: np.ndarray
    dev_indices: np.ndarray

    def splits(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        yield np.asarray(self.train_indices), np.asarray(self.dev_indices)

    def digest(self) -> str:
        hash_md5 = hashlib.md5()
        hash_md5.update(f"train:{','.join(str(int(x)) for x in sorted(self.train_indices))};".encode('utf-8'))
        hash_md5.update(f"dev:{','.join(str(int(x)) for x in sorted(self.dev_indices))};".encode('utf-8'))
        return hash_md5.hexdigest()


@dataclass
class EvalReport:
    confusion: ConfusionMatrix
    per_class_recall: np.ndarray
    uar: float
    params: Dict[str, Any] = field(default_factory=dict)
    seed: Optional[int] = None
    fold_plan_digest: Optional[str] = None
    accuracy: float = 0.0
    n_samples: int = 0
    mm1: Optional[float] = None
    config: Optional[Dict[str, Any]] = None

    def to_dict(self) -> Dict[str, Any]:
        result = {
            'uar': float(self.uar),
            'accuracy': float(self.accuracy),
            'n_samples': int(self.n_samples),
            'per_class_recall': {c: float(r) for c, r in zip(self.confusion.class_labels, self.per_class_recall)},
            'confusion': self.confusion.to_dict(),
            'params': self.params,
            'seed': self.seed,
            'fold_plan_digest': self.fold_plan_digest,
        }
        if self.mm1 is not None:
            result['mm1'] = float(self.mm1)
        if self.config is not None:
            result['config'] = self.config
        return result


class ReportEncoder(simplejson.JSONEncoder):
    """自定义JSON编码器，用于处理numpy对象"""

    def default(self, obj):
        if isinstance(obj, np.integer):
            return int(obj)
        if isinstance(obj, np.floating):
            return float(obj)
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, tuple):
            return list(obj)
        return super().default(obj)


def dumps_report(data: Dict[str, Any]) -> str:
    return simplejson.dumps(data, cls=ReportEncoder, sort_keys=True, indent=2,
                            ensure_ascii=False, ignore_nan=True) + "\n"
