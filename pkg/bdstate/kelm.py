import logging
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg
from scipy.spatial.distance import pdist
from scipy.special import softmax
from sklearn.metrics.pairwise import rbf_kernel as _sk_rbf_kernel

from .config import Config
from .errors import DimensionError, LabelError, PipelineError, SingularSystemError
from .evaluation import uar_score
from .models import FeatureMatrix, FusedElm, KelmModel, ProbMatrix

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, FeatureMatrix]

UNWEIGHTED = "unweighted"
WEIGHTED = "weighted"


def _as_array(x: ArrayLike) -> np.ndarray:
    if isinstance(x, FeatureMatrix):
        return x.values
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


def rbf_kernel(X: ArrayLike, Y: ArrayLike, gamma: float) -> np.ndarray:
    """K[i, j] = exp(-gamma * ||X_i - Y_j||^2)"""
    X, Y = _as_array(X), _as_array(Y)
    if X.shape[1] != Y.shape[1]:
        raise DimensionError(f"核矩阵: 列数不一致 {X.shape[1]} != {Y.shape[1]}")
    if not gamma > 0:
        raise PipelineError(f"gamma 必须为正: {gamma}")
    if X is Y:
        return _sk_rbf_kernel(X, gamma=gamma)
    return _sk_rbf_kernel(X, Y, gamma=gamma)


def median_heuristic_gamma(X: ArrayLike) -> float:
    """gamma = 1 / 训练行两两平方距离的中位数"""
    X = _as_array(X)
    if X.shape[0] < 2:
        return 1.0
    median = float(np.median(pdist(X, 'sqeuclidean')))
    if median <= 0:
        logger.warning("训练样本两两距离中位数为 0，gamma 取 1.0")
        return 1.0
    return 1.0 / median


def target_matrix(labels: Sequence[str], class_labels: Sequence[str]) -> np.ndarray:
    """+1/-1 独热编码；只有一个类别时全部为 +1"""
    index = {c: i for i, c in enumerate(class_labels)}
    try:
        columns = np.array([index[y] for y in labels], dtype=int)
    except KeyError as e:
        raise LabelError(f"未知的类别标签: {e.args[0]}")
    T = -np.ones((len(labels), len(class_labels)))
    T[np.arange(len(labels)), columns] = 1.0
    return T


def class_weights(labels: Sequence[str]) -> np.ndarray:
    """W_ii = 1 / 与样本 i 同类别的训练样本数"""
    labels = np.asarray(labels)
    _, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    return 1.0 / counts[inverse]


def train_kelm(train: ArrayLike, labels: Sequence[str], C: float, gamma: float,
               weighting: str = UNWEIGHTED, class_labels: Optional[Sequence[str]] = None,
               sample_weights: Optional[np.ndarray] = None,
               kernel: Optional[np.ndarray] = None) -> KelmModel:
    """
    非加权: beta = (I/C + K)^-1 T
    加权:   beta = (I/C + WK)^-1 WT，等价于对称方程组 (W^-1/C + K) beta = T
    """
    X = _as_array(train)
    n = X.shape[0]
    if n < 1:
        raise PipelineError("训练集为空")
    if len(labels) != n:
        raise DimensionError(f"标签数量 {len(labels)} 与训练样本数 {n} 不一致")
    if not C > 0:
        raise PipelineError(f"C 必须为正: {C}")
    if weighting not in (UNWEIGHTED, WEIGHTED):
        raise PipelineError(f"未知的加权方式: {weighting}")

    class_labels = tuple(class_labels) if class_labels is not None else tuple(sorted(set(labels)))
    T = target_matrix(labels, class_labels) if len(class_labels) > 1 else np.ones((n, 1))
    if kernel is not None:
        if kernel.shape != (n, n):
            raise DimensionError(f"预计算核矩阵形状 {kernel.shape} 与训练样本数 {n} 不一致")
        K = kernel
    else:
        K = rbf_kernel(X, X, gamma)

    if sample_weights is not None:
        w = np.asarray(sample_weights, dtype=np.float64)
    elif weighting == WEIGHTED:
        w = class_weights(labels)
    else:
        w = np.ones(n)

    A = K.copy()
    A[np.diag_indices(n)] += 1.0 / (C * w)

    rcond = 1.0 / np.linalg.cond(A)
    if not np.isfinite(rcond) or rcond < Config.RCOND_MIN:
        raise SingularSystemError(f"核 ELM 方程组病态 (C={C}, gamma={gamma})", rcond)
    try:
        beta = scipy.linalg.solve(A, T, assume_a='sym')
    except (scipy.linalg.LinAlgError, ValueError) as e:
        raise SingularSystemError(f"核 ELM 方程组求解失败: {e}", rcond) from e

    return KelmModel(
        train_matrix=X.copy(),
        beta=beta,
        gamma=float(gamma),
        C=float(C),
        weighting=weighting,
        class_labels=class_labels,
    )


def predict_scores(m: KelmModel, X: ArrayLike) -> np.ndarray:
    X = _as_array(X)
    if X.shape[1] != m.train_matrix.shape[1]:
        raise DimensionError(f"预测: 输入 {X.shape[1]} 列，模型训练时 {m.train_matrix.shape[1]} 列")
    return rbf_kernel(X, m.train_matrix, m.gamma) @ m.beta


def scores_to_probs(scores: np.ndarray) -> np.ndarray:
    """逐行 softmax"""
    return softmax(np.asarray(scores, dtype=np.float64), axis=1)


def _sample_ids(X: ArrayLike) -> Tuple[str, ...]:
    if isinstance(X, FeatureMatrix):
        return X.sample_ids
    return tuple(str(i) for i in range(_as_array(X).shape[0]))


def predict_probs(m: KelmModel, X: ArrayLike) -> ProbMatrix:
    return ProbMatrix(scores_to_probs(predict_scores(m, X)), m.class_labels, _sample_ids(X))


def blend(p_unweighted: np.ndarray, p_weighted: np.ndarray, alpha: float) -> np.ndarray:
    return alpha * p_unweighted + (1.0 - alpha) * p_weighted


def predict_fused_probs(fused: FusedElm, X: ArrayLike) -> ProbMatrix:
    """P = alpha * P_unweighted + (1 - alpha) * P_weighted"""
    p_u = scores_to_probs(predict_scores(fused.unweighted, X))
    p_w = scores_to_probs(predict_scores(fused.weighted, X))
    return ProbMatrix(blend(p_u, p_w, fused.alpha), fused.unweighted.class_labels, _sample_ids(X))


def select_alpha(p_unweighted: np.ndarray, p_weighted: np.ndarray, true_labels: Sequence[str],
                 class_labels: Sequence[str], alpha_grid: Sequence[float]) -> Tuple[float, float]:
    """在验证集上选出 UAR 最高的 alpha，并列时取最小的 alpha"""
    best_alpha, best_uar = None, -np.inf
    for alpha in sorted(float(a) for a in alpha_grid):
        predicted = np.argmax(blend(p_unweighted, p_weighted, alpha), axis=1)
        score = uar_score(true_labels, [class_labels[i] for i in predicted], class_labels)
        if score > best_uar:
            best_alpha, best_uar = alpha, score
    return best_alpha, best_uar


def train_fused_elm(train: ArrayLike, labels: Sequence[str], dev: ArrayLike, dev_labels: Sequence[str],
                    C_u: float, C_w: float, gamma: float, alpha_grid: Sequence[float],
                    class_labels: Optional[Sequence[str]] = None) -> FusedElm:
    """训练非加权与加权两个子模型，按验证集 UAR 选择融合系数 alpha"""
    if not alpha_grid or any(not 0 <= a <= 1 for a in alpha_grid):
        raise PipelineError(f"alpha_grid 必须非空且在 [0,1] 内: {alpha_grid}")
    class_labels = tuple(class_labels) if class_labels is not None else tuple(sorted(set(labels)))

    unweighted = train_kelm(train, labels, C_u, gamma, UNWEIGHTED, class_labels)
    weighted = train_kelm(train, labels, C_w, gamma, WEIGHTED, class_labels)

    p_u = scores_to_probs(predict_scores(unweighted, dev))
    p_w = scores_to_probs(predict_scores(weighted, dev))
    alpha, dev_uar = select_alpha(p_u, p_w, dev_labels, class_labels, alpha_grid)

    logger.info(f"融合 ELM: alpha={alpha:.2f}, 验证集 UAR={dev_uar:.4f} (C_u={C_u}, C_w={C_w}, gamma={gamma:.4g})")
    return FusedElm(unweighted=unweighted, weighted=weighted, alpha=alpha)
