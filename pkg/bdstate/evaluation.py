import logging
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from .config import Config
from .errors import LabelError, PipelineError
from .models import ConfusionMatrix, EvalReport, FoldPlan, ProbMatrix

logger = logging.getLogger(__name__)


def ymrs_to_class(y: int) -> str:
    """YMRS 分数 -> remission (<=7) / hypomania (7<y<20) / mania (>=20)"""
    if y < 0 or y > Config.YMRS_MAX:
        raise LabelError(f"YMRS 分数必须在 0..{Config.YMRS_MAX} 内: {y}")
    if y <= Config.YMRS_REMISSION_MAX:
        return "remission"
    if y < Config.YMRS_MANIA_MIN:
        return "hypomania"
    return "mania"


def confusion(true_labels: Sequence[str], pred_labels: Sequence[str],
              class_labels: Sequence[str]) -> ConfusionMatrix:
    """counts[i][j] = #{真实为 i 且预测为 j}"""
    if len(true_labels) != len(pred_labels):
        raise PipelineError(f"真实标签 {len(true_labels)} 个，预测标签 {len(pred_labels)} 个")
    if len(true_labels) == 0:
        raise PipelineError("没有可统计的样本")
    index = {c: i for i, c in enumerate(class_labels)}
    counts = np.zeros((len(class_labels), len(class_labels)), dtype=np.int64)
    for t, p in zip(true_labels, pred_labels):
        if t not in index or p not in index:
            raise LabelError(f"未知的类别标签: {t if t not in index else p}")
        counts[index[t], index[p]] += 1
    return ConfusionMatrix(counts=counts, class_labels=tuple(class_labels))


def per_class_recall(cm: ConfusionMatrix) -> np.ndarray:
    support = cm.counts.sum(axis=1)
    empty = [c for c, s in zip(cm.class_labels, support) if s == 0]
    if empty:
        raise LabelError(f"类别 {empty} 没有真实样本，召回率无定义")
    return np.diag(cm.counts) / support


def uar(cm: ConfusionMatrix) -> float:
    """各类召回率的算术平均"""
    return float(per_class_recall(cm).mean())


def uar_score(true_labels: Sequence[str], pred_labels: Sequence[str],
              class_labels: Sequence[str]) -> float:
    return uar(confusion(true_labels, pred_labels, class_labels))


def build_report(true_labels: Sequence[str], pred_labels: Sequence[str], class_labels: Sequence[str],
                 params: Optional[Dict[str, Any]] = None, seed: Optional[int] = None,
                 fold_plan_digest: Optional[str] = None) -> EvalReport:
    cm = confusion(true_labels, pred_labels, class_labels)
    recalls = per_class_recall(cm)
    return EvalReport(
        confusion=cm,
        per_class_recall=recalls,
        uar=float(recalls.mean()),
        params=dict(params or {}),
        seed=seed,
        fold_plan_digest=fold_plan_digest,
        accuracy=float(np.trace(cm.counts) / cm.total),
        n_samples=cm.total,
    )


def make_folds(labels: Sequence[str], k: int, seed: int = 42, stratified: bool = True) -> FoldPlan:
    """
    打乱后轮流分配到 k 折；分层时每个类别内部轮流分配，
    且轮转位置跨类别延续，使各折总样本数相差不超过 1
    """
    n = len(labels)
    if k < 2:
        raise PipelineError(f"折数必须 >= 2: {k}")
    if k > n:
        raise PipelineError(f"折数 {k} 大于样本数 {n}")

    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    assignment = np.empty(n, dtype=int)

    if stratified:
        classes, counts = np.unique(labels, return_counts=True)
        small = [c for c, cnt in zip(classes, counts) if cnt < k]
        if small:
            raise LabelError(f"分层 {k} 折要求每个类别至少 {k} 个样本，不足的类别: {list(small)}")
        position = 0
        for c in classes:
            members = rng.permutation(np.flatnonzero(labels == c))
            assignment[members] = (position + np.arange(members.size)) % k
            position = (position + members.size) % k
    else:
        order = rng.permutation(n)
        assignment[order] = np.arange(n) % k

    folds = tuple(np.flatnonzero(assignment == i) for i in range(k))
    logger.debug(f"{k} 折划分: 各折样本数 {[f.size for f in folds]}")
    return FoldPlan(folds=folds, seed=seed, stratified=stratified)


def aggregate_task_probs(per_task: Mapping[int, np.ndarray], class_labels: Sequence[str],
                         missing_class: str = "hypomania") -> Tuple[np.ndarray, str]:
    """
    片段内各任务概率取算术平均；没有任何任务的片段直接判为 missing_class
    """
    if not per_task:
        if missing_class not in class_labels:
            raise LabelError(f"缺失任务的默认类别不在类别集合中: {missing_class}")
        row = np.zeros(len(class_labels))
        row[list(class_labels).index(missing_class)] = 1.0
        return row, missing_class
    rows = np.vstack([np.asarray(per_task[t], dtype=np.float64) for t in sorted(per_task)])
    row = rows.mean(axis=0)
    return row, class_labels[int(np.argmax(row))]


def aggregate_clip_probs(segment_probs: ProbMatrix, segment_clips: Sequence[str],
                         clip_ids: Sequence[str], missing_class: str = "hypomania") -> ProbMatrix:
    """把任务段/情绪分组级的概率平均回片段级"""
    by_clip: Dict[str, Dict[int, np.ndarray]] = {c: {} for c in clip_ids}
    for i, clip in enumerate(segment_clips):
        if clip not in by_clip:
            raise PipelineError(f"段样本属于未知片段: {clip}")
        by_clip[clip][len(by_clip[clip])] = segment_probs.values[i]

    rows = []
    n_missing = 0
    for clip in clip_ids:
        if not by_clip[clip]:
            n_missing += 1
        row, _ = aggregate_task_probs(by_clip[clip], segment_probs.class_labels, missing_class)
        rows.append(row)
    if n_missing:
        logger.warning(f"{n_missing} 个片段没有可用任务，判为 {missing_class}")
    return ProbMatrix(np.vstack(rows), segment_probs.class_labels, tuple(clip_ids))


def uar_from_indices(true_idx: np.ndarray, pred_idx: np.ndarray, n_classes: int) -> float:
    """以类别下标计算 UAR，用于网格搜索内层循环"""
    support = np.bincount(true_idx, minlength=n_classes)
    if np.any(support == 0):
        raise LabelError("存在没有真实样本的类别，召回率无定义")
    hits = np.bincount(true_idx[true_idx == pred_idx], minlength=n_classes)
    return float(np.mean(hits / support))
