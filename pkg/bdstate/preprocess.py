import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from sklearn.ensemble import ExtraTreesClassifier

from .config import Config, PipelineConfig
from .errors import DimensionError, LabelError, PipelineError
from .models import FeatureMatrix, FeatureSelection, PcaModel, ZStats

logger = logging.getLogger(__name__)


def _check_columns(m: FeatureMatrix, expected: int, what: str):
    if m.n_features != expected:
        raise DimensionError(f"{what}: 输入有 {m.n_features} 列，拟合时为 {expected} 列")


def fit_z(train: FeatureMatrix) -> ZStats:
    """按列计算训练集的总体均值与标准差"""
    if train.n_samples < 2:
        raise PipelineError(f"Z 标准化至少需要 2 个训练样本，实际 {train.n_samples}")
    return ZStats(
        means=train.values.mean(axis=0),
        stds=train.values.std(axis=0),
        fitted_on=train.n_samples,
    )


def apply_z(m: FeatureMatrix, s: ZStats) -> FeatureMatrix:
    """(x - mean) / std；标准差为 0 的列映射为 0"""
    _check_columns(m, s.means.shape[0], "Z 标准化")
    constant = s.stds == 0
    safe_stds = np.where(constant, 1.0, s.stds)
    values = (m.values - s.means) / safe_stds
    values[:, constant] = 0.0
    return m.with_values(values)


def l2_rows(m: FeatureMatrix) -> FeatureMatrix:
    """每行除以其欧氏范数，全零行保持不变"""
    norms = np.linalg.norm(m.values, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    return m.with_values(m.values / safe[:, None])


def fit_pca(train: FeatureMatrix, variance_fraction: float) -> PcaModel:
    """
    对中心化的训练数据做主成分分析，保留累计解释方差 >= variance_fraction 的最少成分；
    每个成分中绝对值最大的元素取正号
    """
    if not 0 < variance_fraction <= 1:
        raise PipelineError(f"variance_fraction 必须在 (0,1] 内: {variance_fraction}")
    if train.n_samples < 2:
        raise PipelineError(f"PCA 至少需要 2 个训练样本，实际 {train.n_samples}")

    x = train.values
    means = x.mean(axis=0)
    centered = x - means
    _, s, vt = np.linalg.svd(centered, full_matrices=False)

    scale = max(1.0, float(np.abs(x).max()))
    if s.size == 0 or s[0] <= Config.PCA_RANK_TOL * scale:
        raise PipelineError("PCA 输入的秩为 0（所有行相同）")

    eigenvalues = s ** 2 / (train.n_samples - 1)
    rank = int(np.sum(s > Config.PCA_RANK_TOL * s[0]))
    fractions = eigenvalues / eigenvalues.sum()
    cumulative = np.cumsum(fractions[:rank])
    m = int(np.searchsorted(cumulative, variance_fraction - 1e-12) + 1)
    m = min(m, rank)

    components = vt[:m].T.copy()
    for j in range(m):
        if components[np.argmax(np.abs(components[:, j])), j] < 0:
            components[:, j] = -components[:, j]

    logger.info(f"PCA: {train.n_features} 维 -> {m} 维 (解释方差 {cumulative[m - 1]:.4f})")
    return PcaModel(
        component_matrix=components,
        column_means=means,
        explained_variance_fractions=fractions[:m],
    )


def apply_pca(m: FeatureMatrix, p: PcaModel) -> FeatureMatrix:
    _check_columns(m, p.column_means.shape[0], "PCA 投影")
    values = (m.values - p.column_means) @ p.component_matrix
    names = tuple(f"pc{i + 1}" for i in range(p.n_components))
    return m.with_values(values, names)


def tree_feature_select(train: FeatureMatrix, labels: Sequence[str], n_trees: int = 250,
                        max_depth: Optional[int] = None, min_leaf: int = 1,
                        seed: int = 42, n_jobs: int = 1) -> FeatureSelection:
    """
    用极端随机树集成的基尼不纯度下降衡量特征重要性，保留重要性大于 0 的特征
    """
    if len(set(labels)) < 2:
        raise LabelError("树特征选择至少需要两个类别")
    if n_trees < 1:
        raise PipelineError(f"n_trees 必须 >= 1: {n_trees}")

    forest = ExtraTreesClassifier(
        n_estimators=n_trees,
        criterion="gini",
        max_features=max(1, math.ceil(math.sqrt(train.n_features))),
        max_depth=max_depth,
        min_samples_leaf=min_leaf,
        bootstrap=False,
        random_state=seed,
        n_jobs=n_jobs,
    )
    forest.fit(train.values, np.asarray(labels))

    importances = np.asarray(forest.feature_importances_, dtype=np.float64)
    total = importances.sum()
    if total <= 0:
        raise PipelineError("树集成没有产生任何分裂，无法选择特征")
    importances = importances / total
    kept = np.flatnonzero(importances > 0)

    logger.info(f"树特征选择: {train.n_features} 维 -> {kept.size} 维")
    return FeatureSelection(kept_indices=kept, importances=importances)


def apply_selection(m: FeatureMatrix, sel: FeatureSelection, n_features: int) -> FeatureMatrix:
    _check_columns(m, n_features, "特征选择")
    return m.with_values(m.values[:, sel.kept_indices],
                         [m.feature_names[i] for i in sel.kept_indices])


@dataclass(frozen=True)
class PreprocessChain:
    """拟合好的预处理链: (PCA) -> (树特征选择) -> (Z) -> (L2)"""
    input_dim: int
    pca: Optional[PcaModel]
    selection: Optional[FeatureSelection]
    zstats: Optional[ZStats]
    use_l2: bool

    @property
    def selection_input_dim(self) -> int:
        return self.pca.n_components if self.pca is not None else self.input_dim

    @property
    def output_dim(self) -> int:
        if self.selection is not None:
            return int(self.selection.kept_indices.size)
        return self.selection_input_dim

    @classmethod
    def fit(cls, train: FeatureMatrix, labels: Sequence[str], config: PipelineConfig) -> 'PreprocessChain':
        current = train
        pca = None
        if config.use_pca:
            pca = fit_pca(current, config.pca_variance)
            current = apply_pca(current, pca)

        selection = None
        if config.use_tree_select:
            selection = tree_feature_select(
                current, labels,
                n_trees=config.tree_n_trees,
                max_depth=config.tree_max_depth,
                min_leaf=config.tree_min_leaf,
                seed=config.seed,
                n_jobs=config.n_jobs,
            )
            current = apply_selection(current, selection, current.n_features)

        zstats = fit_z(current) if config.use_z else None
        return cls(input_dim=train.n_features, pca=pca, selection=selection,
                   zstats=zstats, use_l2=config.use_l2)

    def transform(self, m: FeatureMatrix) -> FeatureMatrix:
        _check_columns(m, self.input_dim, "预处理链")
        current = m
        if self.pca is not None:
            current = apply_pca(current, self.pca)
        if self.selection is not None:
            current = apply_selection(current, self.selection, self.selection_input_dim)
        if self.zstats is not None:
            current = apply_z(current, self.zstats)
        if self.use_l2:
            current = l2_rows(current)
        return current
