import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from .config import Config
from .errors import PipelineError

logger = logging.getLogger(__name__)

# 各类别对应的 YMRS 抽样区间（闭区间）
_YMRS_RANGES = {
    "remission": (0, Config.YMRS_REMISSION_MAX),
    "hypomania": (Config.YMRS_REMISSION_MAX + 1, Config.YMRS_MANIA_MIN - 1),
    "mania": (Config.YMRS_MANIA_MIN, Config.YMRS_MAX),
}


@dataclass
class SynthSpec:
    """合成语料参数"""
    classes: Tuple[str, ...] = Config.DEFAULT_CLASSES
    per_class: int = 40
    modalities: Tuple[str, ...] = Config.MODALITIES
    dims: Dict[str, int] = field(default_factory=lambda: {"acoustic": 23, "linguistic": 39, "visual": 76})
    separation: float = 5.0
    noise: float = 1.0
    informative_fraction: float = 1.0
    n_tasks: int = 7
    frames_per_task: int = 20
    missing_rate: float = 0.0
    dev_per_class: int = 0
    test_per_class: int = 0
    seed: int = 42
    # 每个模态只对一对类别有区分度
    complementary: bool = False
    # 按片段级（单行）特征写出的模态
    clip_level: Tuple[str, ...] = ()

    def validate(self):
        if len(self.classes) < 2 or len(set(self.classes)) != len(self.classes):
            raise PipelineError(f"合成语料至少需要两个互不相同的类别: {self.classes}")
        if self.per_class < 1:
            raise PipelineError(f"每类样本数必须 >= 1: {self.per_class}")
        if self.dev_per_class + self.test_per_class > self.per_class:
            raise PipelineError("dev/test 样本数之和超过每类样本数")
        for modality in self.modalities:
            if self.dims.get(modality, 0) < 1:
                raise PipelineError(f"模态 {modality} 的描述子维数必须 >= 1")
        if not 1 <= self.n_tasks <= len(Config.TASK_IDS):
            raise PipelineError(f"任务数必须在 1..{len(Config.TASK_IDS)} 内: {self.n_tasks}")
        if self.frames_per_task < 1:
            raise PipelineError("每个任务至少 1 帧")
        if not 0 <= self.missing_rate < 1:
            raise PipelineError(f"missing_rate 必须在 [0,1) 内: {self.missing_rate}")
        if not 0 < self.informative_fraction <= 1:
            raise PipelineError(f"informative_fraction 必须在 (0,1] 内: {self.informative_fraction}")
        if self.noise <= 0:
            raise PipelineError(f"noise 必须为正: {self.noise}")
        unknown = [m for m in self.clip_level if m not in self.modalities]
        if unknown:
            raise PipelineError(f"clip_level 中的模态不存在: {unknown}")


def complementary_pair(modality_index: int, n_classes: int) -> Tuple[int, int]:
    """第 modality_index 个模态负责区分的类别对"""
    a = modality_index % n_classes
    return a, (a + 1) % n_classes


@dataclass
class SynthResult:
    manifest_path: Path
    n_clips: int
    class_counts: Dict[str, int]


def _write_rows(path: Path, header: Sequence[str], rows: List[Sequence[str]]):
    path.parent.mkdir(parents=True, exist_ok=True)
    temp_file = path.with_suffix('.tmp')
    with open(temp_file, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(header)
        writer.writerows(rows)
    temp_file.replace(path)


def _split_of(position: int, spec: SynthSpec) -> str:
    n_train = spec.per_class - spec.dev_per_class - spec.test_per_class
    if position < n_train:
        return "train"
    if position < n_train + spec.dev_per_class:
        return "dev"
    return "test"


def generate_corpus(spec: SynthSpec, out_dir: Union[str, Path]) -> SynthResult:
    """
    为每个片段、每个模态生成帧级 LLD 序列。信息维上各类别的描述子均值取自
    N(0, (separation*noise)^2)，片段均值在类别均值上再加 N(0, noise^2)，每帧再加同方差噪声；
    每个任务另有一个与类别无关的偏移。任务按 missing_rate 从时间戳中随机剔除
    complementary 时每个模态只对一对类别有区分度；clip_level 中的模态只写出一行片段均值
    """
    spec.validate()
    out_dir = Path(out_dir)
    rng = np.random.default_rng(spec.seed)
    t = len(spec.classes)

    class_means = {}
    for mi, modality in enumerate(spec.modalities):
        d = spec.dims[modality]
        n_informative = max(1, int(round(spec.informative_fraction * d)))
        informative = np.sort(rng.permutation(d)[:n_informative])
        means = np.zeros((t, d))
        means[:, informative] = rng.normal(0.0, spec.separation * spec.noise, size=(t, n_informative))
        if spec.complementary:
            # 第 mi 个模态只区分类别对 (a, b)，其余类别与 a 共享均值
            a, b = complementary_pair(mi, t)
            for c in range(t):
                if c != b:
                    means[c] = means[a]
        task_offsets = rng.normal(0.0, 0.5 * spec.noise, size=(spec.n_tasks, d))
        class_means[modality] = (means, task_offsets)

    n_frames = spec.n_tasks * spec.frames_per_task
    manifest_rows, timestamp_rows = [], []
    class_counts = {c: 0 for c in spec.classes}
    index = 0
    for position in range(spec.per_class):
        for ci, label in enumerate(spec.classes):
            clip_id = f"clip{index:04d}"
            index += 1
            class_counts[label] += 1

            paths = []
            for modality in spec.modalities:
                means, task_offsets = class_means[modality]
                d = means.shape[1]
                clip_mean = means[ci] + rng.normal(0.0, spec.noise, size=d)
                rel = Path("lld") / modality / f"{clip_id}.csv"
                names = [f"{modality}_lld{j + 1:02d}" for j in range(d)]
                if modality in spec.clip_level:
                    frames = clip_mean[None, :]
                else:
                    offsets = np.repeat(task_offsets, spec.frames_per_task, axis=0)
                    frames = clip_mean + offsets + rng.normal(0.0, spec.noise, size=(n_frames, d))
                _write_rows(out_dir / rel, names, [[repr(float(v)) for v in frame] for frame in frames])
                paths.append(rel.as_posix())

            kept = rng.random(spec.n_tasks) >= spec.missing_rate
            for k in range(spec.n_tasks):
                if kept[k]:
                    start = k * spec.frames_per_task
                    timestamp_rows.append([clip_id, str(k + 1), str(start), str(start + spec.frames_per_task)])

            ymrs = ""
            if label in _YMRS_RANGES:
                low, high = _YMRS_RANGES[label]
                ymrs = str(int(rng.integers(low, high + 1)))
            manifest_rows.append([clip_id, _split_of(position, spec), label, ymrs]
                                 + paths + [Config.TIMESTAMPS_NAME])

    _write_rows(out_dir / Config.TIMESTAMPS_NAME, ['clip_id', 'task_id', 'start_frame', 'end_frame'],
                timestamp_rows)
    manifest_path = out_dir / Config.MANIFEST_NAME
    header = ['sample_id', 'split', 'label', 'ymrs'] + [f"path_{m}" for m in spec.modalities] + ['timestamps']
    _write_rows(manifest_path, header, manifest_rows)

    logger.info(f"合成语料已生成: {out_dir} ({index} 个片段, 模态 {list(spec.modalities)})")
    return SynthResult(manifest_path=manifest_path, n_clips=index, class_counts=class_counts)
