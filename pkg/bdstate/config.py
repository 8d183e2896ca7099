import os
from dataclasses import dataclass, field, fields, asdict, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml

from .errors import ConfigError


class Config:
    # 基础配置
    BASE_DIR = Path(__file__).parent.parent

    # 数据路径配置
    DATA_DIR = Path(os.environ.get('BDSTATE_DATA_DIR') or BASE_DIR / 'bd_data')
    OUTPUT_DIR = Path(os.environ.get('BDSTATE_OUTPUT_DIR') or BASE_DIR / 'bd_output')

    # 文件命名
    MANIFEST_NAME = 'manifest.csv'
    TIMESTAMPS_NAME = 'timestamps.csv'
    CONFIG_SNAPSHOT_NAME = 'config.yaml'

    # 类别与模态
    DEFAULT_CLASSES = ("remission", "hypomania", "mania")
    MODALITIES = ("acoustic", "linguistic", "visual")
    SPLITS = ("train", "dev", "test")

    # YMRS 分组阈值: remission <= 7 < hypomania < 20 <= mania
    YMRS_MAX = 60
    YMRS_REMISSION_MAX = 7
    YMRS_MANIA_MIN = 20

    # 任务分组（按诱发情绪）
    TASK_IDS = tuple(range(1, 8))
    EMOTION_GROUPS = {
        "negative": (1, 2, 3),
        "neutral": (4, 5),
        "positive": (6, 7),
    }

    # 模型容器
    CONTAINER_MAGIC = b'BDSTATE1'
    CONTAINER_VERSION = 1

    # 数值阈值
    RCOND_MIN = 1e-14
    PCA_RANK_TOL = 1e-10

    def manifest_path(self, data_dir: Optional[Path] = None) -> Path:
        """返回清单文件路径"""
        return Path(data_dir or self.DATA_DIR) / self.MANIFEST_NAME


FUNCTIONAL_SET_IDS = ("bd10", "ms2", "precomputed")

# 可以按模态覆盖的配置项
MODALITY_KEYS = (
    "functional_set", "use_pca", "pca_variance", "use_tree_select", "tree_n_trees", "tree_max_depth",
    "tree_min_leaf", "use_z", "use_l2", "c_grid", "gamma_grid", "alpha_grid",
)


def _default_alpha_grid() -> List[float]:
    return [round(i * 0.05, 2) for i in range(21)]


def _default_gamma_grid() -> List[Union[float, str]]:
    return [2.0 ** p for p in range(-10, 3)] + ["median"]


@dataclass
class PipelineConfig:
    """单次实验的全部可配置项"""
    functional_set: str = "bd10"
    unit: str = "clip"  # clip, task, emotion
    tasks: Optional[List[int]] = None
    use_pca: bool = False
    pca_variance: float = 0.99
    use_tree_select: bool = False
    tree_n_trees: int = 250
    tree_max_depth: Optional[int] = None
    tree_min_leaf: int = 1
    use_z: bool = True
    use_l2: bool = True
    c_grid: List[float] = field(default_factory=lambda: [1.0, 10.0, 100.0, 1000.0, 1e4, 1e5])
    gamma_grid: List[Union[float, str]] = field(default_factory=_default_gamma_grid)
    alpha_grid: List[float] = field(default_factory=_default_alpha_grid)
    fusion_method: str = "majority"  # majority, wsum2, wsum3, early
    fallback_modality: str = "acoustic"
    seed: int = 42
    cv_folds: int = 4
    stratified: bool = True
    dirichlet_draws: int = 500
    missing_task_class: str = "hypomania"
    class_labels: List[str] = field(default_factory=lambda: list(Config.DEFAULT_CLASSES))
    n_jobs: int = 1
    # 按模态覆盖特征与预处理相关的配置项，例如 {"acoustic": {"use_tree_select": true}}
    modality_overrides: Dict[str, Dict[str, Any]] = field(default_factory=dict)

    def __post_init__(self):
        # PyYAML 把 1e4 之类的写法读成字符串
        try:
            self.c_grid = [float(c) for c in self.c_grid]
            self.alpha_grid = [float(a) for a in self.alpha_grid]
            self.gamma_grid = [g if g == "median" else float(g) for g in self.gamma_grid]
            self.pca_variance = float(self.pca_variance)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"网格取值无法解析为数字: {e}") from e
        if self.modality_overrides is None:
            self.modality_overrides = {}
        self.validate()

    def validate(self):
        """检查配置取值"""
        if self.functional_set not in FUNCTIONAL_SET_IDS:
            raise ConfigError(f"未知的泛函集合: {self.functional_set}")
        if self.unit not in ("clip", "task", "emotion"):
            raise ConfigError(f"未知的分析单元: {self.unit}")
        if self.functional_set == "precomputed" and self.unit != "clip":
            raise ConfigError("预计算特征只能用于片段级分析 (unit=clip)")
        if self.tasks is not None and any(t not in Config.TASK_IDS for t in self.tasks):
            raise ConfigError(f"任务编号必须在 1..7 内: {self.tasks}")
        if not 0 < self.pca_variance <= 1:
            raise ConfigError(f"pca_variance 必须在 (0,1] 内: {self.pca_variance}")
        if self.tree_n_trees < 1 or self.tree_min_leaf < 1:
            raise ConfigError("tree_n_trees 与 tree_min_leaf 必须 >= 1")
        if not self.c_grid or any(c <= 0 for c in self.c_grid):
            raise ConfigError(f"c_grid 必须非空且全部为正: {self.c_grid}")
        if not self.gamma_grid:
            raise ConfigError("gamma_grid 不能为空")
        if any(g != "median" and g <= 0 for g in self.gamma_grid):
            raise ConfigError(f"gamma 必须为正: {self.gamma_grid}")
        if not self.alpha_grid or any(not 0 <= a <= 1 for a in self.alpha_grid):
            raise ConfigError(f"alpha_grid 必须非空且在 [0,1] 内: {self.alpha_grid}")
        if self.fusion_method not in ("majority", "wsum2", "wsum3", "early"):
            raise ConfigError(f"未知的融合方法: {self.fusion_method}")
        if self.cv_folds < 2:
            raise ConfigError(f"cv_folds 必须 >= 2: {self.cv_folds}")
        if self.dirichlet_draws < 1:
            raise ConfigError(f"dirichlet_draws 必须 >= 1: {self.dirichlet_draws}")
        if len(self.class_labels) < 2 or len(set(self.class_labels)) != len(self.class_labels):
            raise ConfigError(f"class_labels 必须至少包含两个互不相同的类别: {self.class_labels}")
        if self.unit != "clip" and self.missing_task_class not in self.class_labels:
            raise ConfigError(f"missing_task_class 不在类别集合中: {self.missing_task_class}")
        self._validate_modality_overrides()

    def _validate_modality_overrides(self):
        if not isinstance(self.modality_overrides, dict):
            raise ConfigError("modality_overrides 必须是 模态 -> 配置项 的映射")
        for modality, overrides in self.modality_overrides.items():
            if not isinstance(overrides, dict):
                raise ConfigError(f"modality_overrides.{modality} 必须是键值映射")
            unknown = sorted(set(overrides) - set(MODALITY_KEYS))
            if unknown:
                raise ConfigError(f"modality_overrides.{modality} 含不能按模态覆盖的配置项: {', '.join(unknown)}")
            self.for_modality(modality)

    def for_modality(self, modality: str) -> 'PipelineConfig':
        """返回应用了该模态覆盖项后的配置"""
        overrides = self.modality_overrides.get(modality)
        if not overrides:
            return self
        try:
            return replace(self, modality_overrides={}, **overrides)
        except ConfigError as e:
            raise ConfigError(f"modality_overrides.{modality}: {e}") from e

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'PipelineConfig':
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"未知的配置项: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(f"配置项类型错误: {e}") from e

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> 'PipelineConfig':
        """从扁平的 YAML 键值文件读取配置"""
        with open(path, 'r', encoding='utf-8') as f:
            data = yaml.safe_load(f) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"配置文件必须是键值映射: {path}")
        return cls.from_dict(data)

    def with_overrides(self, overrides: Dict[str, Any]) -> 'PipelineConfig':
        known = {f.name for f in fields(self)}
        unknown = sorted(set(overrides) - known)
        if unknown:
            raise ConfigError(f"未知的配置项: {', '.join(unknown)}")
        return replace(self, **overrides)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, allow_unicode=True)


def parse_override(item: str) -> Dict[str, Any]:
    """解析命令行 --set key=value，value 按 YAML 解析"""
    if '=' not in item:
        raise ConfigError(f"--set 参数必须形如 key=value: {item}")
    key, raw = item.split('=', 1)
    return {key.strip(): yaml.safe_load(raw)}
