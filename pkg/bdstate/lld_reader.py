import csv
import logging
import math
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import Config
from .errors import BoundsError, DimensionError, IngestionError
from .models import FeatureMatrix, LldSeries, ProbMatrix, TaskTimestamps

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

PROB_SUM_TOL = 1e-9


@dataclass
class IngestionStats:
    """读取统计"""
    files_read: int = 0
    frames_read: int = 0
    segments_created: int = 0
    frames_dropped: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class LldReader:
    """LLD 帧级表读取器 - openSMILE 风格的逗号分隔帧输出"""

    def __init__(self):
        self.stats = IngestionStats()

    def load_lld_csv(self, path: PathLike, clip_id: Optional[str] = None) -> LldSeries:
        """
        读取一个 LLD 表：首行为描述子名称，其余每行为一帧
        """
        path = Path(path)
        clip_id = clip_id if clip_id is not None else path.stem

        with open(path, 'r', encoding='utf-8', newline='') as f:
            reader = csv.reader(f)
            try:
                header = next(reader)
            except StopIteration:
                raise IngestionError(f"{path.name}: 文件为空，缺少表头", line_number=1)

            names = tuple(h.strip() for h in header)
            if not names or any(not n for n in names):
                raise IngestionError(f"{path.name}: 表头含空列名", line_number=1)

            rows = []
            for line_number, row in enumerate(reader, 2):
                if not row or all(not cell.strip() for cell in row):
                    continue
                if len(row) != len(names):
                    raise IngestionError(
                        f"{path.name}: 列数 {len(row)} 与表头列数 {len(names)} 不一致", line_number)
                try:
                    values = [float(cell) for cell in row]
                except ValueError:
                    raise IngestionError(f"{path.name}: 存在非数值单元格: {row}", line_number)
                if not all(math.isfinite(v) for v in values):
                    raise IngestionError(f"{path.name}: 存在 NaN/Inf 单元格", line_number)
                rows.append(values)

        if not rows:
            raise IngestionError(f"{path.name}: no frames，文件只有表头")

        frames = np.asarray(rows, dtype=np.float64)
        self.stats.files_read += 1
        self.stats.frames_read += frames.shape[0]
        logger.debug(f"读取 {path.name}: {frames.shape[0]} 帧 × {frames.shape[1]} 描述子")
        return LldSeries(frames=frames, descriptor_names=names, clip_id=clip_id)

    def segment_tasks(self, series: LldSeries, ts: TaskTimestamps) -> List[LldSeries]:
        """按时间戳把片段切分为任务段，区间之外的帧被丢弃"""
        segments = []
        covered = 0
        for task_id, start, end in ts.entries:
            if end > series.n_frames:
                raise BoundsError(
                    f"片段 {series.clip_id}: 任务 {task_id} 区间 [{start}, {end}) 超出帧数 {series.n_frames}")
            segments.append(LldSeries(
                frames=series.frames[start:end],
                descriptor_names=series.descriptor_names,
                clip_id=series.clip_id,
                task_id=task_id,
            ))
            covered += end - start

        self.stats.segments_created += len(segments)
        self.stats.frames_dropped += series.n_frames - covered
        return segments


def load_lld_csv(path: PathLike, clip_id: Optional[str] = None) -> LldSeries:
    return LldReader().load_lld_csv(path, clip_id)


def segment_tasks(series: LldSeries, ts: TaskTimestamps) -> List[LldSeries]:
    return LldReader().segment_tasks(series, ts)


def load_timestamps(path: PathLike) -> Dict[str, TaskTimestamps]:
    """读取时间戳表 clip_id,task_id,start_frame,end_frame"""
    path = Path(path)
    by_clip: Dict[str, List[Tuple[int, int, int]]] = {}
    with open(path, 'r', encoding='utf-8', newline='') as f:
        reader = csv.DictReader(f)
        required = {'clip_id', 'task_id', 'start_frame', 'end_frame'}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise IngestionError(f"{path.name}: 时间戳表必须包含列 {sorted(required)}", line_number=1)
        for line_number, row in enumerate(reader, 2):
            try:
                entry = (int(row['task_id']), int(row['start_frame']), int(row['end_frame']))
            except (TypeError, ValueError):
                raise IngestionError(f"{path.name}: 时间戳不是整数: {row}", line_number)
            by_clip.setdefault(row['clip_id'].strip(), []).append(entry)

    result = {}
    for clip_id, entries in by_clip.items():
        entries.sort(key=lambda e: e[1])
        result[clip_id] = TaskTimestamps(clip_id=clip_id, entries=tuple(entries))
    logger.info(f"读取时间戳 {path.name}: {len(result)} 个片段")
    return result


def concat_series(parts: Sequence[LldSeries]) -> LldSeries:
    """按行拼接若干序列"""
    names = parts[0].descriptor_names
    for part in parts[1:]:
        if part.descriptor_names != names:
            raise DimensionError(f"片段 {part.clip_id}: 描述子集合不一致，无法拼接")
    return LldSeries(
        frames=np.vstack([p.frames for p in parts]),
        descriptor_names=names,
        clip_id=parts[0].clip_id,
    )


def group_tasks_by_emotion(tasks: Sequence[LldSeries]) -> Dict[str, LldSeries]:
    """
    按诱发情绪把任务段按行拼接：negative=1,2,3  neutral=4,5  positive=6,7
    缺失的任务直接跳过，全部缺失的分组不出现在结果中
    """
    if not tasks:
        return {}
    names = tasks[0].descriptor_names
    for t in tasks:
        if t.descriptor_names != names:
            raise DimensionError(f"任务 {t.task_id}: 描述子集合不一致")

    by_task = {t.task_id: t for t in tasks}
    groups = {}
    for group, task_ids in Config.EMOTION_GROUPS.items():
        present = [by_task[i] for i in task_ids if i in by_task]
        if not present:
            logger.debug(f"片段 {tasks[0].clip_id}: {group} 分组的任务全部缺失")
            continue
        groups[group] = concat_series(present)
    return groups


def write_feature_table(path: PathLike, matrix: FeatureMatrix, labels: Sequence[str]):
    """写出特征表: sample_id, clip_id, label, 特征列..."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    temp_file = path.with_suffix('.tmp')
    with open(temp_file, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['sample_id', 'clip_id', 'label'] + list(matrix.feature_names))
        for i in range(matrix.n_samples):
            writer.writerow([matrix.sample_ids[i], matrix.clips[i], labels[i]]
                            + [repr(float(v)) for v in matrix.values[i]])
    temp_file.replace(path)
    logger.info(f"特征表已写出: {path} ({matrix.n_samples} 行 × {matrix.n_features} 列)")


FEATURE_TABLE_COLUMNS = ['sample_id', 'clip_id', 'label']


def is_feature_table(path: PathLike) -> bool:
    """表头以 sample_id,clip_id,label 开头的文件是多样本特征表，否则按单片段 LLD 表处理"""
    with open(path, 'r', encoding='utf-8', newline='') as f:
        header = next(csv.reader(f), [])
    return header[:3] == FEATURE_TABLE_COLUMNS


def load_feature_table(path: PathLike) -> Tuple[FeatureMatrix, Tuple[str, ...]]:
    """读取特征表，返回特征矩阵与标签"""
    path = Path(path)
    with open(path, 'r', encoding='utf-8', newline='') as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path.name}: 特征表为空", line_number=1)
        if header[:3] != FEATURE_TABLE_COLUMNS:
            raise IngestionError(f"{path.name}: 特征表前三列必须是 sample_id,clip_id,label", line_number=1)
        names = tuple(header[3:])
        sample_ids, clip_ids, labels, rows = [], [], [], []
        for line_number, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestionError(f"{path.name}: 列数与表头不一致", line_number)
            try:
                values = [float(v) for v in row[3:]]
            except ValueError:
                raise IngestionError(f"{path.name}: 存在非数值特征", line_number)
            if not all(math.isfinite(v) for v in values):
                raise IngestionError(f"{path.name}: 存在 NaN/Inf 特征", line_number)
            sample_ids.append(row[0])
            clip_ids.append(row[1])
            labels.append(row[2])
            rows.append(values)

    if not rows:
        raise IngestionError(f"{path.name}: 特征表没有样本")
    matrix = FeatureMatrix(
        values=np.asarray(rows, dtype=np.float64),
        feature_names=names,
        sample_ids=tuple(sample_ids),
        clip_ids=tuple(clip_ids),
    )
    return matrix, tuple(labels)


def load_label_column(path: PathLike) -> Dict[str, str]:
    """从任意带 sample_id,label 列的表中读取真实标签"""
    with open(path, 'r', encoding='utf-8', newline='') as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or 'sample_id' not in reader.fieldnames or 'label' not in reader.fieldnames:
            raise IngestionError(f"{Path(path).name}: 标签表必须包含 sample_id 与 label 列", line_number=1)
        return {row['sample_id']: row['label'] for row in reader}


def write_prob_table(path: PathLike, probs: ProbMatrix, labels: Optional[Sequence[str]] = None):
    """写出预测表: sample_id, predicted_class, p_<class>..."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    labels = labels if labels is not None else probs.predicted_labels()
    temp_file = path.with_suffix('.tmp')
    with open(temp_file, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['sample_id', 'predicted_class'] + [f"p_{c}" for c in probs.class_labels])
        for i in range(probs.n_samples):
            writer.writerow([probs.sample_ids[i], labels[i]] + [repr(float(v)) for v in probs.values[i]])
    temp_file.replace(path)
    logger.info(f"预测表已写出: {path} ({probs.n_samples} 行)")


def load_prob_table(path: PathLike) -> ProbMatrix:
    path = Path(path)
    with open(path, 'r', encoding='utf-8', newline='') as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path.name}: 预测表为空", line_number=1)
        if header[:2] != ['sample_id', 'predicted_class'] or not all(h.startswith('p_') for h in header[2:]):
            raise IngestionError(f"{path.name}: 预测表列必须是 sample_id,predicted_class,p_<class>...", line_number=1)
        classes = tuple(h[2:] for h in header[2:])
        sample_ids, rows = [], []
        for line_number, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestionError(f"{path.name}: 列数 {len(row)} 与表头列数 {len(header)} 不一致", line_number)
            try:
                values = [float(v) for v in row[2:]]
            except ValueError:
                raise IngestionError(f"{path.name}: 存在非数值概率", line_number)
            if not all(math.isfinite(v) and v >= 0 for v in values):
                raise IngestionError(f"{path.name}: 概率必须是非负有限值", line_number)
            if abs(math.fsum(values) - 1.0) > PROB_SUM_TOL:
                raise IngestionError(f"{path.name}: 概率之和 {math.fsum(values):.12g} 不等于 1", line_number)
            rows.append(values)
            sample_ids.append(row[0])
    if not rows:
        raise IngestionError(f"{path.name}: 预测表没有样本")
    return ProbMatrix(np.asarray(rows, dtype=np.float64), classes, tuple(sample_ids))
