import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionError, PipelineError
from .evaluation import uar_score
from .models import DirichletWeights, FeatureMatrix, ModalityOutput, ProbMatrix

logger = logging.getLogger(__name__)


@dataclass
class FusionResult:
    """融合结果: 概率、最终标签与选出的系数"""
    method: str
    probs: ProbMatrix
    labels: Tuple[str, ...]
    weights: Dict[str, Any] = field(default_factory=dict)


def _check_same_shape(*probs: ProbMatrix):
    first = probs[0]
    for p in probs[1:]:
        if p.values.shape != first.values.shape:
            raise DimensionError(f"概率矩阵形状不一致: {p.values.shape} != {first.values.shape}")
        if p.class_labels != first.class_labels:
            raise DimensionError(f"概率矩阵类别顺序不一致: {p.class_labels} != {first.class_labels}")
        if p.sample_ids != first.sample_ids:
            raise DimensionError("概率矩阵样本顺序不一致")


def _blend_uar(values: np.ndarray, class_labels: Sequence[str], dev_labels: Sequence[str]) -> float:
    predicted = [class_labels[i] for i in np.argmax(values, axis=1)]
    return uar_score(dev_labels, predicted, class_labels)


def majority_vote(outputs: Sequence[ModalityOutput], fallback: str) -> Tuple[str, ...]:
    """
    三个模型逐样本投票；至少两个模型一致时取该标签，三者互不相同时取 fallback 模态的标签
    """
    if len(outputs) != 3:
        raise PipelineError(f"多数投票需要恰好 3 个模态，实际 {len(outputs)} 个")
    _check_same_shape(*(o.probs for o in outputs))
    by_modality = {o.modality: o for o in outputs}
    if fallback not in by_modality:
        raise PipelineError(f"回退模态 {fallback} 不在输入模态 {list(by_modality)} 中")

    votes = [o.labels for o in outputs]
    fallback_labels = by_modality[fallback].labels
    fused = []
    for i in range(len(fallback_labels)):
        label, count = Counter(v[i] for v in votes).most_common(1)[0]
        fused.append(label if count >= 2 else fallback_labels[i])
    return tuple(fused)


def weighted_sum2(p1: ProbMatrix, p2: ProbMatrix, alpha_grid: Sequence[float],
                  dev_labels: Sequence[str]) -> Tuple[float, ProbMatrix]:
    """P = alpha * P1 + (1 - alpha) * P2，按验证集 UAR 选 alpha，并列取最小值"""
    _check_same_shape(p1, p2)
    if not alpha_grid or any(not 0 <= a <= 1 for a in alpha_grid):
        raise PipelineError(f"alpha_grid 必须非空且在 [0,1] 内: {alpha_grid}")

    best_alpha, best_uar, best_values = None, -np.inf, None
    for alpha in sorted(float(a) for a in alpha_grid):
        values = alpha * p1.values + (1.0 - alpha) * p2.values
        score = _blend_uar(values, p1.class_labels, dev_labels)
        if score > best_uar:
            best_alpha, best_uar, best_values = alpha, score, values
    logger.info(f"双模型加权和: alpha={best_alpha:.2f}, UAR={best_uar:.4f}")
    return best_alpha, ProbMatrix(best_values, p1.class_labels, p1.sample_ids)


def sample_dirichlet(n_draws: int, seed: int = 42) -> List[DirichletWeights]:
    """对称 Dirichlet(1,1,1) 采样：三个独立单位速率伽马变量除以它们的和"""
    if n_draws < 1:
        raise PipelineError(f"n_draws 必须 >= 1: {n_draws}")
    rng = np.random.default_rng(seed)
    draws = rng.standard_gamma(1.0, size=(n_draws, 3))
    draws = draws / draws.sum(axis=1, keepdims=True)
    return [DirichletWeights(alphas=(float(a), float(b), float(c))) for a, b, c in draws]


def weighted_sum3_search(p1: ProbMatrix, p2: ProbMatrix, p3: ProbMatrix, dev_labels: Sequence[str],
                         n_draws: int = 500, seed: int = 42) -> Tuple[DirichletWeights, ProbMatrix]:
    """P = a0*P1 + a1*P2 + a2*P3，系数取 Dirichlet 样本中验证集 UAR 最高者（并列取最先出现者）"""
    _check_same_shape(p1, p2, p3)
    stacked = np.stack([p1.values, p2.values, p3.values])

    best, best_uar, best_values = None, -np.inf, None
    for weights in sample_dirichlet(n_draws, seed):
        values = np.tensordot(np.asarray(weights.alphas), stacked, axes=1)
        score = _blend_uar(values, p1.class_labels, dev_labels)
        if score > best_uar:
            best, best_uar, best_values = weights, score, values
    logger.info(f"三模型加权和: 系数={tuple(round(a, 3) for a in best.alphas)}, UAR={best_uar:.4f}")
    return best, ProbMatrix(best_values, p1.class_labels, p1.sample_ids)


def early_fuse(matrices: Sequence[FeatureMatrix], prefixes: Optional[Sequence[str]] = None) -> FeatureMatrix:
    """特征级融合：按列拼接，归一化由调用方随后进行"""
    if not matrices:
        raise PipelineError("特征融合至少需要一个输入")
    if prefixes is not None and len(prefixes) != len(matrices):
        raise PipelineError("前缀数量与输入矩阵数量不一致")
    if len(matrices) == 1 and prefixes is None:
        return matrices[0]

    first = matrices[0]
    for m in matrices[1:]:
        if m.n_samples != first.n_samples:
            raise DimensionError(f"特征融合: 行数不一致 {m.n_samples} != {first.n_samples}")
        if m.sample_ids != first.sample_ids:
            raise DimensionError("特征融合: 样本编号顺序不一致")

    names = []
    for i, m in enumerate(matrices):
        if prefixes:
            names.extend(f"{prefixes[i]}__{n}" for n in m.feature_names)
        else:
            names.extend(m.feature_names)
    if len(set(names)) != len(names):
        raise DimensionError("特征融合: 特征名重复，请提供模态前缀")

    return FeatureMatrix(
        values=np.hstack([m.values for m in matrices]),
        feature_names=tuple(names),
        sample_ids=first.sample_ids,
        clip_ids=first.clip_ids,
    )


def mm1(uar_fusion: float, unimodal_uars: Sequence[float]) -> float:
    """(UAR_fusion - max(UAR_i)) / max(UAR_i)"""
    if not unimodal_uars:
        raise PipelineError("mm1 需要至少一个单模态 UAR")
    best = max(unimodal_uars)
    if best <= 0:
        raise PipelineError("单模态 UAR 最大值为 0，mm1 无定义")
    return (uar_fusion - best) / best


def fuse_outputs(outputs: Sequence[ModalityOutput], method: str, dev_labels: Sequence[str],
                 alpha_grid: Sequence[float], fallback: str = "acoustic",
                 n_draws: int = 500, seed: int = 42) -> FusionResult:
    """按配置的方法融合各模态输出"""
    if method == "majority":
        labels = majority_vote(outputs, fallback)
        _check_same_shape(*(o.probs for o in outputs))
        first = outputs[0].probs
        mean_values = np.mean([o.probs.values for o in outputs], axis=0)
        return FusionResult(method, ProbMatrix(mean_values, first.class_labels, first.sample_ids),
                            labels, {'fallback': fallback, 'modalities': [o.modality for o in outputs]})
    if method == "wsum2":
        if len(outputs) != 2:
            raise PipelineError(f"wsum2 需要恰好 2 个模态，实际 {len(outputs)} 个")
        alpha, probs = weighted_sum2(outputs[0].probs, outputs[1].probs, alpha_grid, dev_labels)
        return FusionResult(method, probs, probs.predicted_labels(),
                            {'alpha': alpha, 'modalities': [o.modality for o in outputs]})
    if method == "wsum3":
        if len(outputs) != 3:
            raise PipelineError(f"wsum3 需要恰好 3 个模态，实际 {len(outputs)} 个")
        weights, probs = weighted_sum3_search(outputs[0].probs, outputs[1].probs, outputs[2].probs,
                                              dev_labels, n_draws, seed)
        return FusionResult(method, probs, probs.predicted_labels(),
                            {'alphas': list(weights.alphas), 'modalities': [o.modality for o in outputs]})
    raise PipelineError(f"决策级融合不支持方法: {method}")


def apply_fusion(outputs: Sequence[ModalityOutput], fusion: Dict[str, Any]) -> FusionResult:
    """用训练时选出的系数融合新的各模态输出"""
    method = fusion.get('method')
    by_modality = {o.modality: o for o in outputs}
    names = fusion.get('modalities') or [o.modality for o in outputs]
    missing = [m for m in names if m not in by_modality]
    if missing:
        raise PipelineError(f"融合需要的模态输出缺失: {missing}")
    ordered = [by_modality[m] for m in names]
    _check_same_shape(*(o.probs for o in ordered))
    first = ordered[0].probs

    if method == "majority":
        labels = majority_vote(ordered, fusion['fallback'])
        mean_values = np.mean([o.probs.values for o in ordered], axis=0)
        return FusionResult(method, ProbMatrix(mean_values, first.class_labels, first.sample_ids),
                            labels, dict(fusion))
    if method == "wsum2":
        alpha = float(fusion['alpha'])
        values = alpha * ordered[0].probs.values + (1.0 - alpha) * ordered[1].probs.values
    elif method == "wsum3":
        values = np.tensordot(np.asarray(fusion['alphas'], dtype=np.float64),
                              np.stack([o.probs.values for o in ordered]), axes=1)
    else:
        raise PipelineError(f"决策级融合不支持方法: {method}")
    probs = ProbMatrix(values, first.class_labels, first.sample_ids)
    return FusionResult(method, probs, probs.predicted_labels(), dict(fusion))
