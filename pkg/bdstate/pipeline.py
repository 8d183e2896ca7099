import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .config import PipelineConfig
from .errors import DimensionError, IngestionError, LabelError, PipelineError, SingularSystemError
from .evaluation import aggregate_clip_probs, build_report, make_folds, uar_from_indices
from .functionals import stack_vectors, summarize
from .fusion import FusionResult, apply_fusion, early_fuse, fuse_outputs, mm1
from .kelm import (UNWEIGHTED, WEIGHTED, blend, median_heuristic_gamma, predict_fused_probs,
                   rbf_kernel, scores_to_probs, train_kelm)
from .lld_reader import (LldReader, group_tasks_by_emotion, is_feature_table, load_feature_table,
                         load_timestamps)
from .manifest import Manifest, ManifestRow
from .models import (Dataset, DevSplit, EvalReport, FeatureMatrix, FoldPlan, FusedElm, LldSeries,
                     ModalityOutput, ModelParams, ProbMatrix, TaskTimestamps)
from .preprocess import PreprocessChain

logger = logging.getLogger(__name__)

EARLY = "early"
PRECOMPUTED = "precomputed"
FUSION_ARITY = {"majority": 3, "wsum2": 2, "wsum3": 3, EARLY: 1}
Plan = Union[FoldPlan, DevSplit]


def resolve_gamma(gamma: Union[float, str], train_values) -> float:
    """把 gamma 网格中的 median 标记解析为具体数值"""
    if gamma == "median":
        return median_heuristic_gamma(train_values)
    return float(gamma)


@dataclass(frozen=True)
class FittedModality:
    """单模态拟合结果: 预处理链 + 融合核 ELM"""
    chain: PreprocessChain
    model: FusedElm
    params: ModelParams

    def predict_probs(self, m: FeatureMatrix) -> ProbMatrix:
        return predict_fused_probs(self.model, self.chain.transform(m))


class ModalityPipeline:
    """单模态流水线: 在训练数据上拟合预处理链，再训练加权与非加权核 ELM"""

    def __init__(self, config: PipelineConfig, params: ModelParams):
        self.config = config
        self.params = params

    def fit(self, train: Dataset) -> FittedModality:
        chain = PreprocessChain.fit(train.matrix, train.labels, self.config)
        x = chain.transform(train.matrix).values
        gamma = resolve_gamma(self.params.gamma, x)

        unweighted = train_kelm(x, train.labels, self.params.c_u, gamma, UNWEIGHTED, train.class_labels)
        weighted = train_kelm(x, train.labels, self.params.c_w, gamma, WEIGHTED, train.class_labels)
        logger.debug(f"模态流水线拟合完成: {train.n_samples} 样本, {chain.output_dim} 维, gamma={gamma:.4g}")
        return FittedModality(
            chain=chain,
            model=FusedElm(unweighted=unweighted, weighted=weighted, alpha=self.params.alpha),
            params=self.params,
        )


@dataclass(frozen=True)
class EvalUnits:
    """
    评估单元。片段级分析时每行就是一个单元；任务/情绪分组级分析时单元是片段，
    一个片段对应数据集中的若干行（可能为零行）
    """
    clip_ids: Tuple[str, ...]
    labels: Tuple[str, ...]
    rows: Tuple[np.ndarray, ...]
    segmented: bool

    @classmethod
    def from_dataset(cls, dataset: Dataset, clip_labels: Optional[Mapping[str, str]] = None) -> 'EvalUnits':
        m = dataset.matrix
        if clip_labels is None:
            return cls(
                clip_ids=m.sample_ids,
                labels=dataset.labels,
                rows=tuple(np.array([i]) for i in range(m.n_samples)),
                segmented=False,
            )

        by_clip: Dict[str, List[int]] = {c: [] for c in clip_labels}
        for i, (clip, label) in enumerate(zip(m.clips, dataset.labels)):
            if clip not in by_clip:
                raise PipelineError(f"样本 {m.sample_ids[i]} 属于未知片段 {clip}")
            if label != clip_labels[clip]:
                raise LabelError(f"样本 {m.sample_ids[i]} 的标签 {label} 与片段标签 {clip_labels[clip]} 不一致")
            by_clip[clip].append(i)
        return cls(
            clip_ids=tuple(clip_labels),
            labels=tuple(clip_labels[c] for c in clip_labels),
            rows=tuple(np.asarray(by_clip[c], dtype=int) for c in clip_labels),
            segmented=True,
        )

    @property
    def n_units(self) -> int:
        return len(self.clip_ids)

    def rows_of(self, units: Sequence[int]) -> np.ndarray:
        parts = [self.rows[u] for u in units]
        if not parts:
            return np.empty(0, dtype=int)
        return np.sort(np.concatenate(parts)).astype(int)

    def to_unit_probs(self, probs: ProbMatrix, row_clips: Sequence[str], units: Sequence[int],
                      missing_class: str) -> ProbMatrix:
        """把按行的概率转换为按单元的概率，units 须为升序"""
        unit_ids = tuple(self.clip_ids[u] for u in units)
        if not self.segmented:
            return ProbMatrix(probs.values, probs.class_labels, unit_ids)
        return aggregate_clip_probs(probs, row_clips, unit_ids, missing_class)


def _predict_rows(fitted, dataset: Dataset, rows: np.ndarray) -> ProbMatrix:
    if rows.size == 0:
        t = len(dataset.class_labels)
        return ProbMatrix(np.empty((0, t)), dataset.class_labels, ())
    return fitted.predict_probs(dataset.matrix.take(rows))


def cross_validate_probs(dataset: Dataset, pipeline, plan: Plan, units: Optional[EvalUnits] = None,
                         missing_class: str = "hypomania") -> ProbMatrix:
    """
    每折只在训练部分拟合，预测留出部分；返回按单元编号升序排列的合并后留出概率。
    pipeline 需提供 fit(Dataset)，其返回值需提供 predict_probs(FeatureMatrix)
    """
    units = units or EvalUnits.from_dataset(dataset)
    held_all, probs_all = [], []
    for fold, (train_units, held_units) in enumerate(plan.splits()):
        held_units = np.sort(np.asarray(held_units, dtype=int))
        train_rows = units.rows_of(train_units)
        held_rows = units.rows_of(held_units)
        if train_rows.size == 0:
            raise PipelineError(f"第 {fold + 1} 折训练部分没有样本")

        fitted = pipeline.fit(dataset.take(train_rows))
        row_probs = _predict_rows(fitted, dataset, held_rows)
        row_clips = [dataset.matrix.clips[i] for i in held_rows]
        probs_all.append(units.to_unit_probs(row_probs, row_clips, held_units, missing_class).values)
        held_all.append(held_units)
        logger.debug(f"第 {fold + 1} 折: 训练 {train_rows.size} 行, 留出 {held_units.size} 个单元")

    order = np.concatenate(held_all)
    perm = np.argsort(order, kind='stable')
    values = np.vstack(probs_all)[perm]
    return ProbMatrix(values, dataset.class_labels, tuple(units.clip_ids[i] for i in order[perm]))


def cross_validate(dataset: Dataset, pipeline, plan: Plan, units: Optional[EvalUnits] = None,
                   missing_class: str = "hypomania", seed: Optional[int] = None) -> EvalReport:
    """合并所有留出预测后计算一份报告（不是各折 UAR 的平均）"""
    units = units or EvalUnits.from_dataset(dataset)
    probs = cross_validate_probs(dataset, pipeline, plan, units, missing_class)
    index = {c: i for i, c in enumerate(units.clip_ids)}
    true_labels = [units.labels[index[s]] for s in probs.sample_ids]
    params = pipeline.params.to_dict() if getattr(pipeline, 'params', None) is not None else {}
    return build_report(true_labels, probs.predicted_labels(), dataset.class_labels,
                        params=params, seed=seed, fold_plan_digest=plan.digest())


@dataclass
class GridResult:
    """网格搜索结果: 最优参数、合并预测上的报告与对应的留出概率"""
    params: ModelParams
    report: EvalReport
    probs: ProbMatrix
    n_candidates: int = 0
    n_skipped: int = 0


def _ordered_gammas(gamma_grid: Sequence[Union[float, str]]) -> List[Union[float, str]]:
    numeric = sorted({float(g) for g in gamma_grid if g != "median"})
    return numeric + (["median"] if "median" in gamma_grid else [])


def grid_search(dataset: Dataset, plan: Plan, config: PipelineConfig,
                units: Optional[EvalUnits] = None) -> GridResult:
    """
    穷举 C_u × C_w × gamma × alpha，按合并留出预测的 UAR 选最优。
    并列时依次取较小的 C_u、C_w、gamma（数值在前，median 最后）与 alpha。
    同一折同一 gamma 的核矩阵只计算一次；任一折出现病态方程组的候选被跳过
    """
    units = units or EvalUnits.from_dataset(dataset)
    classes = dataset.class_labels
    c_grid = sorted({float(c) for c in config.c_grid})
    gammas = _ordered_gammas(config.gamma_grid)
    alphas = sorted({float(a) for a in config.alpha_grid})
    if not c_grid or not gammas or not alphas:
        raise PipelineError("网格不能为空")

    # (weighting, C 下标, gamma 下标) -> 每折的单元级概率
    fold_probs: Dict[Tuple[str, int, int], List[np.ndarray]] = {}
    invalid = set()
    held_all = []
    logger.info(f"开始网格搜索: {len(c_grid)} 个 C × {len(gammas)} 个 gamma × {len(alphas)} 个 alpha")

    for fold, (train_units, held_units) in enumerate(plan.splits()):
        held_units = np.sort(np.asarray(held_units, dtype=int))
        train_rows = units.rows_of(train_units)
        held_rows = units.rows_of(held_units)
        if train_rows.size == 0:
            raise PipelineError(f"第 {fold + 1} 折训练部分没有样本")
        held_all.append(held_units)

        train = dataset.take(train_rows)
        chain = PreprocessChain.fit(train.matrix, train.labels, config)
        x_train = chain.transform(train.matrix).values
        x_held = chain.transform(dataset.matrix.take(held_rows)).values if held_rows.size else None
        row_clips = [dataset.matrix.clips[i] for i in held_rows]

        for gi, g in enumerate(gammas):
            gamma = resolve_gamma(g, x_train)
            K = rbf_kernel(x_train, x_train, gamma)
            K_held = rbf_kernel(x_held, x_train, gamma) if x_held is not None else None
            for ci, C in enumerate(c_grid):
                for weighting in (UNWEIGHTED, WEIGHTED):
                    key = (weighting, ci, gi)
                    if key in invalid:
                        continue
                    try:
                        model = train_kelm(x_train, train.labels, C, gamma, weighting, classes, kernel=K)
                    except SingularSystemError as e:
                        logger.debug(f"跳过候选 {weighting} C={C} gamma={g}: {e}")
                        invalid.add(key)
                        continue
                    if K_held is not None:
                        row_values = scores_to_probs(K_held @ model.beta)
                    else:
                        row_values = np.empty((0, len(classes)))
                    row_probs = ProbMatrix(row_values, classes, tuple(dataset.matrix.sample_ids[i] for i in held_rows))
                    unit_probs = units.to_unit_probs(row_probs, row_clips, held_units, config.missing_task_class)
                    fold_probs.setdefault(key, []).append(unit_probs.values)

    order = np.concatenate(held_all)
    perm = np.argsort(order, kind='stable')
    pooled_ids = tuple(units.clip_ids[i] for i in order[perm])
    true_labels = [units.labels[i] for i in order[perm]]
    class_index = {c: i for i, c in enumerate(classes)}
    true_idx = np.array([class_index[y] for y in true_labels], dtype=int)

    pooled = {key: np.vstack(parts)[perm] for key, parts in fold_probs.items() if key not in invalid}

    best, best_uar, n_candidates = None, -np.inf, 0
    for cu in range(len(c_grid)):
        for cw in range(len(c_grid)):
            for gi in range(len(gammas)):
                p_u = pooled.get((UNWEIGHTED, cu, gi))
                p_w = pooled.get((WEIGHTED, cw, gi))
                if p_u is None or p_w is None:
                    continue
                for alpha in alphas:
                    n_candidates += 1
                    predicted = np.argmax(blend(p_u, p_w, alpha), axis=1)
                    score = uar_from_indices(true_idx, predicted, len(classes))
                    if score > best_uar:
                        best, best_uar = (cu, cw, gi, alpha), score

    n_total = len(c_grid) ** 2 * len(gammas) * len(alphas)
    if best is None:
        raise SingularSystemError("网格中所有候选的方程组均病态", 0.0)

    cu, cw, gi, alpha = best
    params = ModelParams(c_u=c_grid[cu], c_w=c_grid[cw], gamma=gammas[gi], alpha=alpha)
    values = blend(pooled[(UNWEIGHTED, cu, gi)], pooled[(WEIGHTED, cw, gi)], alpha)
    probs = ProbMatrix(values, classes, pooled_ids)
    report = build_report(true_labels, probs.predicted_labels(), classes,
                          params=params.to_dict(), seed=config.seed, fold_plan_digest=plan.digest())
    logger.info(f"网格搜索完成: 最优 {params.to_dict()}, UAR={report.uar:.4f} "
                f"(评估 {n_candidates}/{n_total} 个候选)")
    return GridResult(params=params, report=report, probs=probs,
                      n_candidates=n_candidates, n_skipped=n_total - n_candidates)


@dataclass
class TrainedSystem:
    """训练好的完整系统: 各模态模型与决策级融合系数"""
    config: PipelineConfig
    modalities: Dict[str, FittedModality]
    feature_names: Dict[str, Tuple[str, ...]]
    fusion: Optional[Dict[str, Any]] = None
    cv_uars: Dict[str, float] = field(default_factory=dict)


@dataclass
class FusionOutcome:
    result: FusionResult
    report: EvalReport


class ExperimentRunner:
    """实验执行器 - 从清单读取各模态 LLD，完成特征提取、交叉验证、训练、预测与融合"""

    def __init__(self, manifest: Manifest, config: PipelineConfig):
        self.manifest = manifest
        self.config = config
        self.reader = LldReader()
        self._timestamps: Dict[str, Dict[str, TaskTimestamps]] = {}
        self._feature_tables: Dict[str, Tuple[FeatureMatrix, Dict[str, int]]] = {}

    @property
    def classes(self) -> Tuple[str, ...]:
        return tuple(self.config.class_labels)

    def run_modalities(self, requested: Optional[Sequence[str]] = None) -> List[str]:
        """本次实验的模型列表；特征级融合时只有一个拼接后的 early 模型"""
        available = list(self.manifest.modalities)
        requested = list(requested) if requested else available
        unknown = [m for m in requested if m not in available]
        if unknown:
            raise PipelineError(f"清单中没有模态: {unknown}")
        if self.config.fusion_method == EARLY:
            return [EARLY]
        return requested

    def _source_modalities(self, modality: str, requested: Optional[Sequence[str]] = None) -> List[str]:
        if modality == EARLY:
            return list(requested) if requested else list(self.manifest.modalities)
        return [modality]

    def _task_timestamps(self, row: ManifestRow) -> Optional[TaskTimestamps]:
        if row.timestamps is None:
            raise IngestionError(f"样本 {row.sample_id}: 按任务分析需要 timestamps 列")
        key = str(row.timestamps)
        if key not in self._timestamps:
            self._timestamps[key] = load_timestamps(row.timestamps)
        return self._timestamps[key].get(row.sample_id)

    def _precomputed_series(self, path, sample_id: str) -> LldSeries:
        """
        预计算特征: 多样本特征表（表头以 sample_id,clip_id,label 开头）按 sample_id 取行，
        否则按单片段单行 CSV 读取
        """
        if not is_feature_table(path):
            return self.reader.load_lld_csv(path, clip_id=sample_id)
        key = str(path)
        if key not in self._feature_tables:
            matrix, _ = load_feature_table(path)
            self._feature_tables[key] = (matrix, {s: i for i, s in enumerate(matrix.sample_ids)})
        matrix, index = self._feature_tables[key]
        if sample_id not in index:
            raise IngestionError(f"{path.name}: 特征表中没有样本 {sample_id}")
        return LldSeries(frames=matrix.values[index[sample_id]][None, :],
                         descriptor_names=matrix.feature_names, clip_id=sample_id)

    def _row_samples(self, modality: str, row: ManifestRow) -> List[Tuple[str, Any]]:
        path = row.paths.get(modality)
        if path is None:
            raise IngestionError(f"样本 {row.sample_id}: 缺少 {modality} 模态文件")
        if self.config.for_modality(modality).functional_set == PRECOMPUTED:
            return [(row.sample_id, self._precomputed_series(path, row.sample_id))]
        series = self.reader.load_lld_csv(path, clip_id=row.sample_id)
        unit = self.config.unit
        if unit == "clip":
            return [(row.sample_id, series)]

        ts = self._task_timestamps(row)
        if ts is None:
            logger.warning(f"片段 {row.sample_id}: 时间戳表中没有记录，视为所有任务缺失")
            return []
        segments = self.reader.segment_tasks(series, ts)
        if self.config.tasks is not None:
            segments = [s for s in segments if s.task_id in self.config.tasks]
        if unit == "task":
            return [(f"{row.sample_id}#t{s.task_id}", s) for s in segments]
        return [(f"{row.sample_id}#{group}", s) for group, s in group_tasks_by_emotion(segments).items()]

    def feature_matrix(self, modality: str, rows: Sequence[ManifestRow],
                       requested: Optional[Sequence[str]] = None) -> FeatureMatrix:
        """按配置的分析单元与泛函集合计算特征矩阵"""
        if modality == EARLY:
            sources = self._source_modalities(modality, requested)
            return early_fuse([self.feature_matrix(m, rows) for m in sources], prefixes=sources)

        functional_set = self.config.for_modality(modality).functional_set
        vectors, sample_ids, clip_ids = [], [], []
        for row in rows:
            for sample_id, series in self._row_samples(modality, row):
                vectors.append(summarize(series, functional_set))
                sample_ids.append(sample_id)
                clip_ids.append(row.sample_id)
        if not vectors:
            raise PipelineError(f"{modality}: 没有任何可用样本")
        logger.info(f"{modality}: {len(vectors)} 个样本, 每个 {vectors[0].values.size} 维")
        return stack_vectors(vectors, sample_ids, clip_ids)

    def dataset(self, modality: str, rows: Sequence[ManifestRow],
                requested: Optional[Sequence[str]] = None) -> Tuple[Dataset, EvalUnits]:
        clip_labels = dict(zip((r.sample_id for r in rows), Manifest.labels_of(rows)))
        matrix = self.feature_matrix(modality, rows, requested)
        labels = tuple(clip_labels[c] for c in matrix.clips)
        dataset = Dataset(matrix=matrix, labels=labels, class_labels=self.classes)
        segmented = self.config.unit != "clip"
        return dataset, EvalUnits.from_dataset(dataset, clip_labels if segmented else None)

    def cross_validate(self, modality: str, rows: Sequence[ManifestRow],
                       requested: Optional[Sequence[str]] = None,
                       dev_rows: Optional[Sequence[ManifestRow]] = None) -> Tuple[GridResult, Dataset]:
        """
        在给定片段上做分层 k 折交叉验证的网格搜索。
        给出 dev_rows 时改用固定划分: 在 rows 上拟合，在 dev_rows 上选参并报告
        """
        rows = list(rows)
        dev_rows = list(dev_rows or [])
        overlap = {r.sample_id for r in rows} & {r.sample_id for r in dev_rows}
        if overlap:
            raise PipelineError(f"训练与验证片段重叠: {sorted(overlap)[:5]}")

        dataset, units = self.dataset(modality, rows + dev_rows, requested)
        if dev_rows:
            # 单元按清单行顺序排列，前 len(rows) 个属于训练部分
            plan = DevSplit(train_indices=np.arange(len(rows)),
                            dev_indices=np.arange(len(rows), units.n_units))
        else:
            plan = make_folds(units.labels, self.config.cv_folds, self.config.seed, self.config.stratified)
        result = grid_search(dataset, plan, self.config.for_modality(modality), units)
        result.report.config = self.config.to_dict()
        return result, dataset

    def can_fuse(self, n_outputs: int) -> bool:
        """决策级融合要求的模型个数与实际一致时返回 True"""
        if n_outputs <= 1:
            return False
        expected = FUSION_ARITY[self.config.fusion_method]
        if n_outputs != expected:
            logger.warning(f"{self.config.fusion_method} 融合需要 {expected} 个模态，"
                           f"实际 {n_outputs} 个，跳过决策级融合")
            return False
        return True

    def fuse(self, outputs: Sequence[ModalityOutput], true_labels: Sequence[str]) -> FusionOutcome:
        """决策级融合，并以各单模态 UAR 计算 MM1"""
        config = self.config
        result = fuse_outputs(outputs, config.fusion_method, true_labels, config.alpha_grid,
                              config.fallback_modality, config.dirichlet_draws, config.seed)
        report = build_report(true_labels, result.labels, self.classes,
                              params={'method': result.method, **result.weights}, seed=config.seed)
        uars = [o.dev_uar for o in outputs if o.dev_uar is not None]
        if uars:
            report.mm1 = mm1(report.uar, uars)
        report.config = config.to_dict()
        logger.info(f"融合 {result.method}: UAR={report.uar:.4f}"
                    + (f", MM1={report.mm1:+.4f}" if report.mm1 is not None else ""))
        return FusionOutcome(result=result, report=report)

    def train(self, rows: Sequence[ManifestRow], requested: Optional[Sequence[str]] = None) -> TrainedSystem:
        """
        每个模型先在训练片段上交叉验证选参，再用全部训练片段拟合最终模型；
        多个模态时用合并的留出概率选出决策级融合系数
        """
        logger.info(f"开始训练: {len(rows)} 个片段")
        modalities, feature_names, cv_uars = {}, {}, {}
        outputs = []
        for modality in self.run_modalities(requested):
            grid, dataset = self.cross_validate(modality, rows, requested)
            fitted = ModalityPipeline(self.config.for_modality(modality), grid.params).fit(dataset)
            modalities[modality] = fitted
            feature_names[modality] = dataset.matrix.feature_names
            cv_uars[modality] = grid.report.uar
            outputs.append(ModalityOutput(modality, grid.probs, grid.report.uar))

        fusion = None
        if self.can_fuse(len(outputs)):
            clip_labels = dict(zip((r.sample_id for r in rows), Manifest.labels_of(rows)))
            true_labels = [clip_labels[s] for s in outputs[0].probs.sample_ids]
            outcome = self.fuse(outputs, true_labels)
            fusion = {'method': outcome.result.method, **outcome.result.weights}
        logger.info("训练完成")
        return TrainedSystem(self.config, modalities, feature_names, fusion, cv_uars)

    def predict(self, system: TrainedSystem, rows: Sequence[ManifestRow],
                requested: Optional[Sequence[str]] = None) -> Tuple[List[ModalityOutput], Optional[FusionResult]]:
        """对给定片段预测，返回片段级的各模态概率与融合结果"""
        clip_ids = [r.sample_id for r in rows]
        sources = [m for m in system.modalities if m != EARLY]
        if EARLY in system.modalities:
            sources = [n.split('__', 1)[0] for n in system.feature_names[EARLY]]
            sources = list(dict.fromkeys(sources))

        outputs = []
        for modality, fitted in system.modalities.items():
            matrix = self.feature_matrix(modality, rows, sources if modality == EARLY else None)
            if matrix.feature_names != system.feature_names[modality]:
                raise DimensionError(f"{modality}: 特征列与训练时不一致 "
                                     f"({matrix.n_features} 列，训练时 {len(system.feature_names[modality])} 列)")
            probs = fitted.predict_probs(matrix)
            if system.config.unit != "clip":
                probs = aggregate_clip_probs(probs, matrix.clips, clip_ids, system.config.missing_task_class)
            outputs.append(ModalityOutput(modality, probs))

        fused = None
        if system.fusion is not None:
            fused = apply_fusion(outputs, system.fusion)
        return outputs, fused
