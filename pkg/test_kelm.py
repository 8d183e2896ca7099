#!/usr/bin/env python3
"""
核极限学习机测试
"""
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from bdstate.errors import DimensionError, PipelineError, SingularSystemError
from bdstate.evaluation import uar_score
from bdstate.kelm import (UNWEIGHTED, WEIGHTED, blend, class_weights, median_heuristic_gamma,
                          predict_fused_probs, predict_probs, predict_scores, rbf_kernel, scores_to_probs,
                          select_alpha, target_matrix, train_fused_elm, train_kelm)

CLASSES = ("remission", "hypomania", "mania")


def _labels(n, rng, classes=CLASSES):
    return tuple(np.asarray(classes)[rng.permutation(np.arange(n) % len(classes))])


def test_rbf_kernel_values():
    X = np.array([[0.0, 0.0], [1.0, 0.0]])
    K = rbf_kernel(X, X, 0.5)
    assert_array_equal(np.diag(K), [1.0, 1.0])
    assert_allclose(K[0, 1], np.exp(-0.5))
    with pytest.raises(DimensionError):
        rbf_kernel(X, np.zeros((1, 3)), 0.5)
    with pytest.raises(PipelineError):
        rbf_kernel(X, X, 0.0)


def test_self_kernel_is_symmetric_psd():
    X = np.random.default_rng(0).normal(size=(15, 4))
    K = rbf_kernel(X, X, 0.3)
    assert_allclose(K, K.T, atol=1e-12)
    assert np.linalg.eigvalsh(K).min() >= -1e-9


def test_median_heuristic():
    # 平方距离 1, 9, 4 -> 中位数 4
    assert_allclose(median_heuristic_gamma(np.array([[0.0], [1.0], [3.0]])), 0.25)


def test_target_matrix_and_class_weights():
    T = target_matrix(["b", "a", "b"], ["a", "b"])
    assert_array_equal(T, [[-1, 1], [1, -1], [-1, 1]])
    assert_allclose(class_weights(["a", "a", "b"]), [0.5, 0.5, 1.0])


def test_stable_solve_matches_brute_force():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(6, 31))
        X = rng.normal(size=(n, int(rng.integers(2, 7))))
        labels = _labels(n, rng)
        C = float(rng.choice([0.1, 1.0, 10.0, 100.0]))
        gamma = 0.5

        K = rbf_kernel(X, X, gamma)
        T = target_matrix(labels, CLASSES)
        W = np.diag(class_weights(labels))

        unweighted = train_kelm(X, labels, C, gamma, UNWEIGHTED, CLASSES)
        expected = np.linalg.inv(np.eye(n) / C + K) @ T
        assert np.max(np.abs(unweighted.beta - expected)) < 1e-8

        weighted = train_kelm(X, labels, C, gamma, WEIGHTED, CLASSES)
        expected = np.linalg.inv(np.eye(n) / C + W @ K) @ W @ T
        assert np.max(np.abs(weighted.beta - expected)) < 1e-8


def test_interpolation_limit_recovers_training_labels():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(20, 3)) * 10.0
        labels = _labels(20, rng)
        model = train_kelm(X, labels, 1e12, 1.0, UNWEIGHTED, CLASSES)
        predicted = predict_probs(model, X).predicted_labels()
        assert predicted == labels


def test_balanced_weighting_equals_rescaled_regularizer():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(15, 4))
    labels = _labels(15, rng)  # 每类 5 个
    queries = rng.normal(size=(6, 4))
    weighted = train_kelm(X, labels, 10.0, 0.3, WEIGHTED, CLASSES)
    unweighted = train_kelm(X, labels, 10.0 / 5, 0.3, UNWEIGHTED, CLASSES)
    diff = predict_scores(weighted, queries) - predict_scores(unweighted, queries)
    assert np.max(np.abs(diff)) < 1e-8


def test_identity_weights_reproduce_unweighted_model():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(12, 3))
    labels = _labels(12, rng)
    unweighted = train_kelm(X, labels, 5.0, 0.7, UNWEIGHTED, CLASSES)
    identity = train_kelm(X, labels, 5.0, 0.7, WEIGHTED, CLASSES, sample_weights=np.ones(12))
    assert_array_equal(unweighted.beta, identity.beta)


def test_single_class_targets_are_all_ones():
    X = np.arange(4.0)[:, None]
    model = train_kelm(X, ["mania"] * 4, 1.0, 1.0, UNWEIGHTED, ["mania"])
    assert model.beta.shape == (4, 1)
    assert_allclose(predict_probs(model, X).values, 1.0)


def test_ill_conditioned_system_is_rejected():
    X = np.array([[0.0, 1.0], [0.0, 1.0]])
    with pytest.raises(SingularSystemError) as info:
        train_kelm(X, ["a", "b"], 1e15, 1.0, UNWEIGHTED, ["a", "b"])
    assert info.value.rcond < 1e-14


def test_training_input_errors():
    X = np.zeros((3, 2))
    with pytest.raises(DimensionError):
        train_kelm(X, ["a", "b"], 1.0, 1.0)
    with pytest.raises(PipelineError):
        train_kelm(X, ["a", "b", "a"], 0.0, 1.0)
    with pytest.raises(DimensionError):
        train_kelm(X, ["a", "b", "a"], 1.0, 1.0, kernel=np.eye(2))


def test_precomputed_kernel_gives_same_model():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(10, 3))
    labels = _labels(10, rng)
    direct = train_kelm(X, labels, 3.0, 0.4, WEIGHTED, CLASSES)
    cached = train_kelm(X, labels, 3.0, 0.4, WEIGHTED, CLASSES, kernel=rbf_kernel(X, X, 0.4))
    assert_array_equal(direct.beta, cached.beta)


def test_probabilities_are_row_simplex():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(18, 3))
    model = train_kelm(X, _labels(18, rng), 100.0, 0.5, UNWEIGHTED, CLASSES)
    probs = predict_probs(model, rng.normal(size=(7, 3)))
    assert_allclose(probs.values.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(probs.values >= 0)
    assert probs.class_labels == CLASSES


def test_dimension_mismatch_on_predict():
    model = train_kelm(np.eye(3), ["a", "b", "a"], 1.0, 1.0)
    with pytest.raises(DimensionError):
        predict_scores(model, np.zeros((1, 2)))


def _imbalanced(seed, n_major=24, n_minor=6):
    rng = np.random.default_rng(seed)
    labels = ("remission",) * n_major + ("hypomania",) * n_minor + ("mania",) * n_minor
    centers = {"remission": [0.0, 0.0], "hypomania": [1.2, 0.0], "mania": [0.0, 1.2]}
    X = np.array([centers[y] for y in labels]) + rng.normal(size=(len(labels), 2))
    return X, labels


def test_alpha_endpoints_reproduce_submodels():
    X, labels = _imbalanced(0)
    queries = X[:10]
    fused = train_fused_elm(X, labels, X, labels, 10.0, 10.0, 0.5, [0.0, 1.0], CLASSES)
    p_u = predict_probs(fused.unweighted, queries).values
    p_w = predict_probs(fused.weighted, queries).values

    assert_array_equal(predict_fused_probs(replace(fused, alpha=1.0), queries).values, p_u)
    assert_array_equal(predict_fused_probs(replace(fused, alpha=0.0), queries).values, p_w)


def test_blended_dev_uar_dominates_endpoints():
    for seed in range(5):
        X, labels = _imbalanced(seed)
        X_dev, dev_labels = _imbalanced(seed + 100)
        grid = [round(0.05 * i, 2) for i in range(21)]
        fused = train_fused_elm(X, labels, X_dev, dev_labels, 10.0, 10.0, 0.5, grid, CLASSES)

        p_u = scores_to_probs(predict_scores(fused.unweighted, X_dev))
        p_w = scores_to_probs(predict_scores(fused.weighted, X_dev))
        alpha, best = select_alpha(p_u, p_w, dev_labels, CLASSES, grid)
        assert alpha == fused.alpha

        def uar_at(a):
            pred = [CLASSES[i] for i in np.argmax(blend(p_u, p_w, a), axis=1)]
            return uar_score(dev_labels, pred, CLASSES)

        assert best >= max(uar_at(0.0), uar_at(1.0)) - 1e-12


def test_alpha_ties_pick_smallest():
    p = np.array([[0.7, 0.2, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]])
    alpha, score = select_alpha(p, p, CLASSES, CLASSES, [1.0, 0.5, 0.0])
    assert alpha == 0.0
    assert score == 1.0


def test_alpha_grid_validation():
    X, labels = _imbalanced(1)
    with pytest.raises(PipelineError):
        train_fused_elm(X, labels, X, labels, 1.0, 1.0, 0.5, [1.5], CLASSES)
