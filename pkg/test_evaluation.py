#!/usr/bin/env python3
"""
评估协议测试: UAR、折划分、交叉验证与网格搜索
"""
import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from bdstate.config import PipelineConfig
from bdstate.errors import LabelError, PipelineError
from bdstate.evaluation import (aggregate_clip_probs, aggregate_task_probs, build_report, confusion, make_folds,
                                per_class_recall, uar, uar_from_indices, uar_score, ymrs_to_class)
from bdstate.models import Dataset, DevSplit, FeatureMatrix, ModelParams, ProbMatrix
from bdstate.pipeline import EvalUnits, ModalityPipeline, cross_validate, cross_validate_probs, grid_search

CLASSES = ("remission", "hypomania", "mania")


@pytest.mark.parametrize("score, expected", [
    (0, "remission"), (7, "remission"), (8, "hypomania"), (19, "hypomania"), (20, "mania"), (60, "mania"),
])
def test_ymrs_mapping(score, expected):
    assert ymrs_to_class(score) == expected


@pytest.mark.parametrize("score", [-1, 61])
def test_ymrs_out_of_range(score):
    with pytest.raises(LabelError):
        ymrs_to_class(score)


def test_confusion_and_uar():
    truth = ["remission", "remission", "hypomania", "mania"]
    pred = ["remission", "mania", "hypomania", "mania"]
    cm = confusion(truth, pred, CLASSES)
    assert_array_equal(cm.counts, [[1, 0, 1], [0, 1, 0], [0, 0, 1]])
    assert_allclose(per_class_recall(cm), [0.5, 1.0, 1.0])
    assert_allclose(uar(cm), 2.5 / 3)

    perfect = confusion(truth, truth, CLASSES)
    assert_array_equal(perfect.counts, np.diag(np.diag(perfect.counts)))
    assert uar(perfect) == 1.0


def test_chance_level_for_constant_prediction():
    truth = list(np.repeat(CLASSES, 10))
    assert_allclose(uar_score(truth, ["mania"] * 30, CLASSES), 1.0 / 3.0)


def test_uar_is_invariant_to_relabeling():
    rng = np.random.default_rng(0)
    truth = list(np.asarray(CLASSES)[rng.integers(0, 3, size=40)])
    pred = list(np.asarray(CLASSES)[rng.integers(0, 3, size=40)])
    rename = {"remission": "mania", "hypomania": "remission", "mania": "hypomania"}
    renamed = uar_score([rename[y] for y in truth], [rename[y] for y in pred], CLASSES)
    assert_allclose(renamed, uar_score(truth, pred, CLASSES))


def test_metric_errors():
    with pytest.raises(LabelError):
        uar_score(["remission", "remission"], ["remission", "mania"], CLASSES)
    with pytest.raises(LabelError):
        confusion(["unknown"], ["mania"], CLASSES)
    with pytest.raises(PipelineError):
        confusion([], [], CLASSES)


def test_uar_from_indices_matches_label_path():
    rng = np.random.default_rng(1)
    true_idx = rng.permutation(np.arange(30) % 3)
    pred_idx = rng.integers(0, 3, size=30)
    expected = uar_score([CLASSES[i] for i in true_idx], [CLASSES[i] for i in pred_idx], CLASSES)
    assert_allclose(uar_from_indices(true_idx, pred_idx, 3), expected)


def test_report_serialization():
    report = build_report(["mania", "remission", "hypomania"], ["mania", "mania", "hypomania"], CLASSES,
                          params={'c_u': 1.0}, seed=3, fold_plan_digest="abc")
    data = report.to_dict()
    assert data['per_class_recall'] == {"remission": 0.0, "hypomania": 1.0, "mania": 1.0}
    assert data['confusion']['counts'] == [[0, 0, 1], [0, 1, 0], [0, 0, 1]]
    assert data['accuracy'] == pytest.approx(2 / 3)
    assert data['n_samples'] == 3
    assert data['seed'] == 3 and data['fold_plan_digest'] == "abc"


def test_fold_plan_sizes():
    labels = ["remission"] * 60 + ["hypomania"] * 50 + ["mania"] * 54
    plan = make_folds(labels, 4, seed=42)
    assert [len(f) for f in plan.folds] == [41, 41, 41, 41]
    for train, held in plan.splits():
        assert len(train) == 123 and len(held) == 41
        assert not set(train) & set(held)
    assert sorted(np.concatenate(plan.folds).tolist()) == list(range(164))


def test_stratified_folds_balance_classes():
    labels = np.array(["remission"] * 20 + ["mania"] * 8)
    plan = make_folds(labels, 4, seed=1)
    for fold in plan.folds:
        assert np.sum(labels[fold] == "mania") == 2


def test_fold_plan_determinism_and_loo():
    labels = ["a", "b"] * 3
    assert make_folds(labels, 3, seed=5).digest() == make_folds(labels, 3, seed=5).digest()
    loo = make_folds(labels, 6, seed=0, stratified=False)
    assert [len(f) for f in loo.folds] == [1] * 6
    with pytest.raises(LabelError):
        make_folds(["a"] * 5 + ["b"] * 2, 3)
    with pytest.raises(PipelineError):
        make_folds(labels, 1)


def test_aggregate_task_probs():
    row, label = aggregate_task_probs({3: np.array([0.2, 0.3, 0.5])}, CLASSES)
    assert_array_equal(row, [0.2, 0.3, 0.5])
    assert label == "mania"

    row, _ = aggregate_task_probs({1: np.array([1.0, 0.0, 0.0]), 2: np.array([0.0, 0.0, 1.0])}, CLASSES)
    assert_allclose(row, [0.5, 0.0, 0.5])

    row, label = aggregate_task_probs({}, CLASSES)
    assert label == "hypomania"
    assert_array_equal(row, [0.0, 1.0, 0.0])


def test_aggregate_clip_probs_fills_missing_clips():
    probs = ProbMatrix(np.array([[0.6, 0.2, 0.2], [0.2, 0.2, 0.6]]), CLASSES, ("a#t1", "a#t2"))
    clip_probs = aggregate_clip_probs(probs, ["a", "a"], ["a", "b"])
    assert clip_probs.sample_ids == ("a", "b")
    assert_allclose(clip_probs.values, [[0.4, 0.2, 0.4], [0.0, 1.0, 0.0]])


class _LookupPipeline:
    """按样本编号查表的桩流水线"""

    def __init__(self, answers):
        self.answers = answers

    def fit(self, train):
        return self

    def predict_probs(self, m):
        values = np.array([[1.0 if c == self.answers(s) else 0.0 for c in CLASSES] for s in m.sample_ids])
        return ProbMatrix(values, CLASSES, m.sample_ids)


def _gaussian_dataset(seed, per_class=40, separation=4.0, dim=4):
    rng = np.random.default_rng(seed)
    centers = separation * np.eye(3, dim)
    labels = tuple(np.repeat(CLASSES, per_class))
    values = np.vstack([centers[i] + rng.normal(size=(per_class, dim)) for i in range(3)])
    matrix = FeatureMatrix(values, tuple(f"f{j}" for j in range(dim)),
                           tuple(f"clip{i:03d}" for i in range(3 * per_class)))
    return Dataset(matrix, labels, CLASSES)


def test_cross_validate_with_stub_pipelines():
    data = _gaussian_dataset(0, per_class=10)
    truth = dict(zip(data.matrix.sample_ids, data.labels))
    plan = make_folds(data.labels, 4, seed=42)

    oracle = cross_validate(data, _LookupPipeline(truth.get), plan)
    assert oracle.uar == 1.0
    assert oracle.n_samples == 30
    assert oracle.fold_plan_digest == plan.digest()

    constant = cross_validate(data, _LookupPipeline(lambda s: "mania"), plan)
    assert_allclose(constant.uar, 1.0 / 3.0)


def test_pooled_probs_are_ordered_by_sample():
    data = _gaussian_dataset(1, per_class=6)
    truth = dict(zip(data.matrix.sample_ids, data.labels))
    probs = cross_validate_probs(data, _LookupPipeline(truth.get), make_folds(data.labels, 3, seed=7))
    assert probs.sample_ids == data.matrix.sample_ids


def test_pooled_uar_does_not_depend_on_fold_order():
    data = _gaussian_dataset(2, per_class=8)
    config = PipelineConfig()
    pipeline = ModalityPipeline(config, ModelParams(c_u=10.0, c_w=10.0, gamma=1.0, alpha=0.5))
    idx = np.arange(data.n_samples)
    first, second = idx[idx % 2 == 0], idx[idx % 2 == 1]
    a = cross_validate(data, pipeline, DevSplit(first, second))
    b = cross_validate(data, pipeline, DevSplit(second, first))
    plan = make_folds(data.labels, 2, seed=0, stratified=False)
    pooled = cross_validate(data, pipeline, plan)
    swapped = cross_validate(data, pipeline, type(plan)(plan.folds[::-1], plan.seed, plan.stratified))
    assert pooled.uar == swapped.uar
    assert a.n_samples + b.n_samples == data.n_samples


def test_nearest_centroid_precondition_and_kelm_cv():
    data = _gaussian_dataset(42)
    values, labels = data.matrix.values, np.asarray(data.labels)
    centroids = np.vstack([values[labels == c].mean(axis=0) for c in CLASSES])
    nearest = np.argmin(((values[:, None, :] - centroids[None]) ** 2).sum(axis=2), axis=1)
    assert uar_score(labels, [CLASSES[i] for i in nearest], CLASSES) > 0.95

    config = PipelineConfig(seed=42)
    result = grid_search(data, make_folds(data.labels, 4, seed=42), config)
    assert result.report.uar >= 0.90
    assert_allclose(result.probs.values.sum(axis=1), 1.0, atol=1e-9)


def test_singleton_grid_equals_single_cross_validation():
    data = _gaussian_dataset(3, per_class=12)
    plan = make_folds(data.labels, 4, seed=42)
    config = PipelineConfig(c_grid=[10.0], gamma_grid=["median"], alpha_grid=[0.4])
    result = grid_search(data, plan, config)
    assert result.params == ModelParams(c_u=10.0, c_w=10.0, gamma="median", alpha=0.4)

    pipeline = ModalityPipeline(config, result.params)
    report = cross_validate(data, pipeline, plan, seed=config.seed)
    assert report.uar == result.report.uar
    assert_array_equal(report.confusion.counts, result.report.confusion.counts)
    assert_allclose(cross_validate_probs(data, pipeline, plan).values, result.probs.values, atol=1e-12)


def test_grid_search_is_exhaustive_and_deterministic():
    data = _gaussian_dataset(4, per_class=10, separation=1.5)
    plan = make_folds(data.labels, 4, seed=42)
    config = PipelineConfig(c_grid=[1.0, 100.0], gamma_grid=[0.25, 4.0], alpha_grid=[0.0, 0.5, 1.0])
    first = grid_search(data, plan, config)
    second = grid_search(data, plan, config)
    assert first.params == second.params
    assert first.n_candidates == 2 * 2 * 2 * 3

    for c in (1.0, 100.0):
        for gamma in (0.25, 4.0):
            for alpha in (0.0, 1.0):
                fixed = cross_validate(data, ModalityPipeline(config, ModelParams(c, c, gamma, alpha)), plan)
                assert first.report.uar >= fixed.uar - 1e-12


def test_grid_search_ties_prefer_small_values():
    data = _gaussian_dataset(5, per_class=8, separation=12.0)
    plan = make_folds(data.labels, 4, seed=42)
    config = PipelineConfig(c_grid=[100.0, 10.0], gamma_grid=[1.0, 0.5], alpha_grid=[1.0, 0.0])
    result = grid_search(data, plan, config)
    assert result.report.uar == 1.0
    assert result.params == ModelParams(c_u=10.0, c_w=10.0, gamma=0.5, alpha=0.0)


def test_segmented_units_aggregate_to_clips():
    rng = np.random.default_rng(6)
    clips = [f"clip{i:02d}" for i in range(12)]
    clip_labels = {c: CLASSES[i % 3] for i, c in enumerate(clips)}
    sample_ids, clip_ids, labels, rows = [], [], [], []
    for i, clip in enumerate(clips):
        n_tasks = 0 if i == 11 else 2
        for t in range(n_tasks):
            sample_ids.append(f"{clip}#t{t + 1}")
            clip_ids.append(clip)
            labels.append(clip_labels[clip])
            rows.append(rng.normal(size=3) + 5.0 * (i % 3))
    matrix = FeatureMatrix(np.array(rows), ("f0", "f1", "f2"), tuple(sample_ids), tuple(clip_ids))
    data = Dataset(matrix, tuple(labels), CLASSES)
    units = EvalUnits.from_dataset(data, clip_labels)
    assert units.n_units == 12 and units.rows[11].size == 0

    truth = dict(zip(sample_ids, labels))
    plan = make_folds(units.labels, 4, seed=42)
    probs = cross_validate_probs(data, _LookupPipeline(truth.get), plan, units)
    assert probs.sample_ids == tuple(clips)
    assert probs.predicted_labels()[11] == "hypomania"
    assert probs.predicted_labels()[:11] == tuple(clip_labels[c] for c in clips[:11])

    config = PipelineConfig(unit="task", c_grid=[10.0], gamma_grid=[0.5], alpha_grid=[0.5])
    result = grid_search(data, plan, config, units)
    assert result.probs.sample_ids == tuple(clips)
    assert result.report.n_samples == 12
