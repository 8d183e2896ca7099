#!/usr/bin/env python3
"""
多模态融合测试
"""
import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.special import softmax

from bdstate.errors import DimensionError, PipelineError
from bdstate.evaluation import aggregate_task_probs, uar_score
from bdstate.fusion import (apply_fusion, early_fuse, fuse_outputs, majority_vote, mm1, sample_dirichlet,
                            weighted_sum2, weighted_sum3_search)
from bdstate.kelm import UNWEIGHTED, WEIGHTED, predict_fused_probs, scores_to_probs, train_kelm
from bdstate.models import FeatureMatrix, FusedElm, ModalityOutput, ProbMatrix

CLASSES = ("remission", "hypomania", "mania")


def _probs(values, ids=None):
    values = np.asarray(values, dtype=np.float64)
    ids = ids or tuple(f"s{i}" for i in range(values.shape[0]))
    return ProbMatrix(values, CLASSES, tuple(ids))


def _one_hot(labels):
    return _probs([[1.0 if c == y else 0.0 for c in CLASSES] for y in labels])


def _noisy_probs(rng, labels, strength):
    index = {c: i for i, c in enumerate(CLASSES)}
    logits = rng.normal(size=(len(labels), 3))
    logits[np.arange(len(labels)), [index[y] for y in labels]] += strength
    return _probs(softmax(logits, axis=1))


def test_majority_vote_with_fallback():
    acoustic = ModalityOutput("acoustic", _one_hot(["mania", "remission", "remission"]))
    linguistic = ModalityOutput("linguistic", _one_hot(["mania", "hypomania", "remission"]))
    visual = ModalityOutput("visual", _one_hot(["remission", "mania", "hypomania"]))
    fused = majority_vote([acoustic, linguistic, visual], "acoustic")
    assert fused == ("mania", "remission", "remission")

    fused = majority_vote([acoustic, linguistic, visual], "visual")
    assert fused == ("mania", "mania", "remission")


def test_majority_vote_requires_three_aligned_outputs():
    a = ModalityOutput("acoustic", _one_hot(["mania"]))
    with pytest.raises(PipelineError):
        majority_vote([a, a], "acoustic")
    with pytest.raises(PipelineError):
        majority_vote([a, a, a], "visual")
    shifted = ModalityOutput("visual", _probs([[1.0, 0.0, 0.0]], ids=["other"]))
    with pytest.raises(DimensionError):
        majority_vote([a, a, shifted], "acoustic")


def test_weighted_sum2_picks_smallest_alpha_on_ties():
    p = _one_hot(["mania", "remission", "hypomania"])
    alpha, fused = weighted_sum2(p, p, [0.5, 0.0, 1.0], ["mania", "remission", "hypomania"])
    assert alpha == 0.0
    assert_allclose(fused.values, p.values)


def test_weighted_sum2_prefers_better_model():
    truth = ["mania", "remission", "hypomania", "mania"]
    good = _one_hot(truth)
    bad = _one_hot(["remission", "remission", "remission", "remission"])
    alpha, fused = weighted_sum2(good, bad, [0.0, 0.25, 0.75, 1.0], truth)
    assert alpha == 0.75
    assert fused.predicted_labels() == tuple(truth)


def test_dirichlet_sampler_statistics():
    draws = np.array([w.alphas for w in sample_dirichlet(100_000, seed=42)])
    assert np.all(np.abs(draws.mean(axis=0) - 1.0 / 3.0) < 0.01)
    assert np.max(np.abs(draws.sum(axis=1) - 1.0)) < 1e-12
    assert np.all(draws >= 0)
    again = np.array([w.alphas for w in sample_dirichlet(100, seed=42)])
    assert_array_equal(again, draws[:100])


def test_dirichlet_sampler_rejects_zero_draws():
    with pytest.raises(PipelineError):
        sample_dirichlet(0)


def test_weighted_sum3_beats_uniform_blend():
    wins = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        truth = list(np.asarray(CLASSES)[rng.permutation(np.arange(45) % 3)])
        p1, p2, p3 = (_noisy_probs(rng, truth, s) for s in (1.0, 1.5, 0.5))
        weights, fused = weighted_sum3_search(p1, p2, p3, truth, n_draws=500, seed=seed)
        found = uar_score(truth, fused.predicted_labels(), CLASSES)
        uniform = _probs((p1.values + p2.values + p3.values) / 3.0)
        if found >= uar_score(truth, uniform.predicted_labels(), CLASSES):
            wins += 1
        assert_allclose(sum(weights.alphas), 1.0, atol=1e-12)
    assert wins >= 18


def test_weighted_sum3_is_deterministic():
    rng = np.random.default_rng(1)
    truth = list(np.asarray(CLASSES)[np.arange(30) % 3])
    ps = [_noisy_probs(rng, truth, 1.0) for _ in range(3)]
    first, _ = weighted_sum3_search(*ps, truth, n_draws=50, seed=9)
    second, _ = weighted_sum3_search(*ps, truth, n_draws=50, seed=9)
    assert first == second


def test_early_fuse():
    a = FeatureMatrix(np.ones((2, 2)), ("x", "y"), ("s0", "s1"))
    b = FeatureMatrix(np.zeros((2, 3)), ("x", "u", "v"), ("s0", "s1"))
    fused = early_fuse([a, b], prefixes=["acoustic", "visual"])
    assert fused.n_features == 5
    assert fused.feature_names[0] == "acoustic__x"
    assert fused.feature_names[2] == "visual__x"
    assert early_fuse([a]) is a

    with pytest.raises(DimensionError):
        early_fuse([a, b])
    with pytest.raises(DimensionError):
        early_fuse([a, FeatureMatrix(np.ones((2, 1)), ("z",), ("s1", "s0"))])
    with pytest.raises(DimensionError):
        early_fuse([a, FeatureMatrix(np.ones((1, 1)), ("z",), ("s0",))])


def test_mm1_anchors():
    assert round(mm1(0.657, [0.522, 0.573, 0.521]), 2) == 0.15
    assert round(mm1(0.648, [0.592, 0.518, 0.518]), 2) == 0.09
    with pytest.raises(PipelineError):
        mm1(0.5, [])


def test_majority_fusion_of_identical_outputs_returns_input():
    rng = np.random.default_rng(2)
    p = _noisy_probs(rng, ["mania", "remission", "hypomania", "mania"], 1.0)
    outputs = [ModalityOutput(m, p) for m in ("acoustic", "linguistic", "visual")]
    result = fuse_outputs(outputs, "majority", None, [0.0, 1.0])
    assert_allclose(result.probs.values, p.values, atol=1e-12)
    assert result.labels == p.predicted_labels()


def test_apply_fusion_reuses_selected_weights():
    rng = np.random.default_rng(3)
    truth = list(np.asarray(CLASSES)[np.arange(12) % 3])
    outputs = [ModalityOutput(m, _noisy_probs(rng, truth, 1.0)) for m in ("acoustic", "linguistic", "visual")]
    selected = fuse_outputs(outputs, "wsum3", truth, [0.0], n_draws=30, seed=4)
    applied = apply_fusion(list(reversed(outputs)), {'method': 'wsum3', **selected.weights})
    assert_allclose(applied.probs.values, selected.probs.values, atol=1e-12)

    pair = fuse_outputs(outputs[:2], "wsum2", truth, [0.0, 0.5, 1.0])
    assert_allclose(apply_fusion(outputs[:2], {'method': 'wsum2', **pair.weights}).probs.values,
                    pair.probs.values)
    with pytest.raises(PipelineError):
        apply_fusion(outputs[:1], {'method': 'wsum2', **pair.weights})


def test_unknown_fusion_method():
    p = _one_hot(["mania"])
    with pytest.raises(PipelineError):
        fuse_outputs([ModalityOutput("a", p)], "stacking", ["mania"], [0.0])


def _random_fused_elm(rng, d):
    labels = list(CLASSES) * 2
    train = rng.normal(size=(len(labels), d))
    gamma = float(rng.uniform(0.05, 2.0))
    unweighted = train_kelm(train, labels, float(rng.uniform(1.0, 100.0)), gamma, UNWEIGHTED, CLASSES)
    weighted = train_kelm(train, labels, float(rng.uniform(1.0, 100.0)), gamma, WEIGHTED, CLASSES)
    return FusedElm(unweighted=unweighted, weighted=weighted, alpha=float(rng.random()))


def _assert_on_simplex(values):
    assert np.all(values >= 0)
    assert np.max(np.abs(values.sum(axis=1) - 1.0)) <= 1e-9


def test_every_probability_path_stays_on_simplex():
    for seed in range(200):
        rng = np.random.default_rng(seed)
        n, d = int(rng.integers(1, 6)), int(rng.integers(1, 4))
        _assert_on_simplex(scores_to_probs(rng.normal(scale=50.0, size=(n, 3))))

        x = rng.normal(scale=2.0, size=(n, d))
        names = ("acoustic", "linguistic", "visual")
        outputs = [ModalityOutput(m, predict_fused_probs(_random_fused_elm(rng, d), x)) for m in names]
        for o in outputs:
            _assert_on_simplex(o.probs.values)
        truth = [CLASSES[i] for i in rng.integers(0, 3, size=n)]

        _, pair = weighted_sum2(outputs[0].probs, outputs[1].probs, [0.0, float(rng.random()), 1.0], truth)
        _assert_on_simplex(pair.values)
        _, triple = weighted_sum3_search(*(o.probs for o in outputs), truth, n_draws=5, seed=seed)
        _assert_on_simplex(triple.values)

        for method, group in (("majority", outputs), ("wsum2", outputs[:2]), ("wsum3", outputs)):
            selected = fuse_outputs(group, method, truth, [0.0, 0.5, 1.0], n_draws=5, seed=seed)
            _assert_on_simplex(selected.probs.values)
            applied = apply_fusion(group, {'method': method, **selected.weights})
            _assert_on_simplex(applied.probs.values)

        per_task = {k + 1: outputs[0].probs.values[k] for k in range(n)}
        _assert_on_simplex(aggregate_task_probs(per_task, CLASSES)[0][None, :])
