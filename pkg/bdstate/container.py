import logging
import struct
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import simplejson

from .config import Config, PipelineConfig
from .errors import ContainerError
from .models import FeatureSelection, FusedElm, KelmModel, ModelParams, PcaModel, ReportEncoder, ZStats
from .pipeline import FittedModality, TrainedSystem
from .preprocess import PreprocessChain

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
_LENGTH = struct.Struct('<Q')
_DTYPE = '<f8'


class _PayloadWriter:
    """按声明顺序收集数组，记录形状与偏移"""

    def __init__(self):
        self.entries: List[Dict[str, Any]] = []
        self.chunks: List[bytes] = []
        self.offset = 0

    def put(self, name: str, array: np.ndarray) -> str:
        data = np.ascontiguousarray(array, dtype=_DTYPE)
        self.entries.append({'name': name, 'shape': list(data.shape), 'dtype': _DTYPE, 'offset': self.offset})
        chunk = data.tobytes()
        self.chunks.append(chunk)
        self.offset += len(chunk)
        return name


def _kelm_header(prefix: str, m: KelmModel, writer: _PayloadWriter) -> Dict[str, Any]:
    return {
        'C': m.C,
        'gamma': m.gamma,
        'weighting': m.weighting,
        'class_labels': list(m.class_labels),
        'train_matrix': writer.put(f"{prefix}/train_matrix", m.train_matrix),
        'beta': writer.put(f"{prefix}/beta", m.beta),
    }


def _modality_header(name: str, fitted: FittedModality, feature_names, writer: _PayloadWriter) -> Dict[str, Any]:
    chain = fitted.chain
    entry: Dict[str, Any] = {
        'name': name,
        'feature_names': list(feature_names),
        'params': fitted.params.to_dict(),
        'alpha': fitted.model.alpha,
        'chain': {
            'input_dim': chain.input_dim,
            'selection_input_dim': chain.selection_input_dim,
            'output_dim': chain.output_dim,
            'use_l2': chain.use_l2,
        },
        'unweighted': _kelm_header(f"{name}/unweighted", fitted.model.unweighted, writer),
        'weighted': _kelm_header(f"{name}/weighted", fitted.model.weighted, writer),
    }
    if chain.pca is not None:
        entry['pca'] = {
            'component_matrix': writer.put(f"{name}/pca/component_matrix", chain.pca.component_matrix),
            'column_means': writer.put(f"{name}/pca/column_means", chain.pca.column_means),
            'explained_variance_fractions': writer.put(f"{name}/pca/explained_variance_fractions",
                                                       chain.pca.explained_variance_fractions),
        }
    if chain.selection is not None:
        entry['selection'] = {
            'kept_indices': writer.put(f"{name}/selection/kept_indices", chain.selection.kept_indices),
            'importances': writer.put(f"{name}/selection/importances", chain.selection.importances),
        }
    if chain.zstats is not None:
        entry['zstats'] = {
            'fitted_on': chain.zstats.fitted_on,
            'means': writer.put(f"{name}/zstats/means", chain.zstats.means),
            'stds': writer.put(f"{name}/zstats/stds", chain.zstats.stds),
        }
    return entry


def save_container(path: PathLike, system: TrainedSystem):
    """
    单文件格式: 魔数 | 头部长度 (uint64 小端) | UTF-8 JSON 头部 | 按头部声明顺序排列的 float64 小端数组
    """
    path = Path(path)
    writer = _PayloadWriter()
    header = {
        'version': Config.CONTAINER_VERSION,
        'config': system.config.to_dict(),
        'fusion': system.fusion,
        'cv_uars': system.cv_uars,
        'modalities': [_modality_header(name, fitted, system.feature_names[name], writer)
                       for name, fitted in system.modalities.items()],
    }
    header['arrays'] = writer.entries
    header_bytes = simplejson.dumps(header, cls=ReportEncoder, sort_keys=True,
                                    ensure_ascii=False).encode('utf-8')

    path.parent.mkdir(parents=True, exist_ok=True)
    temp_file = path.with_suffix('.tmp')
    try:
        with open(temp_file, 'wb') as f:
            f.write(Config.CONTAINER_MAGIC)
            f.write(_LENGTH.pack(len(header_bytes)))
            f.write(header_bytes)
            for chunk in writer.chunks:
                f.write(chunk)
        temp_file.replace(path)
    except OSError:
        temp_file.unlink(missing_ok=True)
        raise
    logger.info(f"模型已保存: {path} ({len(system.modalities)} 个模型, {path.stat().st_size} 字节)")


class _PayloadReader:
    def __init__(self, entries: List[Dict[str, Any]], payload: bytes):
        self.payload = payload
        self.entries = {e['name']: e for e in entries}

    def get(self, name: str) -> np.ndarray:
        entry = self.entries.get(name)
        if entry is None:
            raise ContainerError(f"容器缺少数组: {name}")
        if entry.get('dtype') != _DTYPE:
            raise ContainerError(f"数组 {name} 的类型不受支持: {entry.get('dtype')}")
        shape = tuple(int(s) for s in entry['shape'])
        count = int(np.prod(shape)) if shape else 1
        offset = int(entry['offset'])
        if offset < 0 or offset + count * 8 > len(self.payload):
            raise ContainerError(f"数组 {name} 超出文件末尾，容器已损坏")
        return np.frombuffer(self.payload, dtype=_DTYPE, count=count, offset=offset).reshape(shape).copy()


def _load_kelm(h: Dict[str, Any], reader: _PayloadReader) -> KelmModel:
    return KelmModel(
        train_matrix=reader.get(h['train_matrix']),
        beta=reader.get(h['beta']),
        gamma=float(h['gamma']),
        C=float(h['C']),
        weighting=h['weighting'],
        class_labels=tuple(h['class_labels']),
    )


def _check_chain(name: str, chain: PreprocessChain, model: FusedElm, n_names: int, declared: Dict[str, Any]):
    """原始维数 -> PCA 后 -> 特征选择后 -> 模型输入，逐级核对"""
    def fail(message: str):
        raise ContainerError(f"{name}: 维度链不一致: {message}")

    if n_names != chain.input_dim:
        fail(f"特征名 {n_names} 个，输入维数 {chain.input_dim}")
    if chain.pca is not None:
        if chain.pca.component_matrix.shape[0] != chain.input_dim or chain.pca.column_means.shape != (chain.input_dim,):
            fail(f"PCA 输入维数与原始维数 {chain.input_dim} 不符")
    if chain.selection is not None:
        kept = chain.selection.kept_indices
        if chain.selection.importances.shape != (chain.selection_input_dim,):
            fail("特征重要性长度与选择前维数不符")
        if kept.size and (kept.min() < 0 or kept.max() >= chain.selection_input_dim):
            fail("保留特征下标越界")
    if chain.zstats is not None:
        if chain.zstats.means.shape != (chain.output_dim,) or chain.zstats.stds.shape != (chain.output_dim,):
            fail(f"Z 标准化参数长度与模型输入维数 {chain.output_dim} 不符")
    if declared.get('output_dim') != chain.output_dim or declared.get('selection_input_dim') != chain.selection_input_dim:
        fail("头部声明的维数与数组不符")
    for part in (model.unweighted, model.weighted):
        if part.train_matrix.ndim != 2 or part.train_matrix.shape[1] != chain.output_dim:
            fail(f"{part.weighting} 模型输入 {part.train_matrix.shape} 与预处理输出 {chain.output_dim} 维不符")
        if part.beta.ndim != 2 or part.beta.shape[0] != part.train_matrix.shape[0]:
            fail(f"{part.weighting} 模型输出权重行数与训练样本数不符")
        if part.beta.shape[1] != (len(part.class_labels) if len(part.class_labels) > 1 else 1):
            fail(f"{part.weighting} 模型输出列数与类别数不符")
    if model.unweighted.class_labels != model.weighted.class_labels:
        fail("两个子模型的类别顺序不一致")


def _load_modality(h: Dict[str, Any], reader: _PayloadReader) -> FittedModality:
    name = h['name']
    declared = h['chain']
    pca = None
    if 'pca' in h:
        pca = PcaModel(
            component_matrix=reader.get(h['pca']['component_matrix']),
            column_means=reader.get(h['pca']['column_means']),
            explained_variance_fractions=reader.get(h['pca']['explained_variance_fractions']),
        )
    selection = None
    if 'selection' in h:
        kept = reader.get(h['selection']['kept_indices'])
        if not np.all(kept == np.round(kept)):
            raise ContainerError(f"{name}: 保留特征下标不是整数")
        selection = FeatureSelection(kept_indices=kept.astype(np.int64),
                                     importances=reader.get(h['selection']['importances']))
    zstats = None
    if 'zstats' in h:
        zstats = ZStats(means=reader.get(h['zstats']['means']), stds=reader.get(h['zstats']['stds']),
                        fitted_on=int(h['zstats']['fitted_on']))

    chain = PreprocessChain(input_dim=int(declared['input_dim']), pca=pca, selection=selection,
                            zstats=zstats, use_l2=bool(declared['use_l2']))
    model = FusedElm(unweighted=_load_kelm(h['unweighted'], reader),
                     weighted=_load_kelm(h['weighted'], reader), alpha=float(h['alpha']))
    _check_chain(name, chain, model, len(h['feature_names']), declared)
    params = h['params']
    return FittedModality(chain=chain, model=model,
                          params=ModelParams(c_u=params['c_u'], c_w=params['c_w'],
                                             gamma=params['gamma'], alpha=params['alpha']))


def load_container(path: PathLike) -> TrainedSystem:
    path = Path(path)
    data = path.read_bytes()
    magic = Config.CONTAINER_MAGIC
    if not data.startswith(magic):
        raise ContainerError(f"{path.name}: 不是模型容器文件")
    start = len(magic) + _LENGTH.size
    if len(data) < start:
        raise ContainerError(f"{path.name}: 文件被截断")
    (header_length,) = _LENGTH.unpack_from(data, len(magic))
    if len(data) < start + header_length:
        raise ContainerError(f"{path.name}: 头部被截断")
    try:
        header = simplejson.loads(data[start:start + header_length].decode('utf-8'))
    except (UnicodeDecodeError, simplejson.JSONDecodeError) as e:
        raise ContainerError(f"{path.name}: 头部无法解析: {e}") from e
    if not isinstance(header, dict):
        raise ContainerError(f"{path.name}: 头部必须是 JSON 对象")

    version = header.get('version')
    if version != Config.CONTAINER_VERSION:
        raise ContainerError(f"{path.name}: 不支持的容器版本 {version}，当前版本 {Config.CONTAINER_VERSION}")

    try:
        system = _load_system(header, data[start + header_length:])
    except ContainerError:
        raise
    except KeyError as e:
        raise ContainerError(f"{path.name}: 头部缺少字段 {e.args[0]}") from e
    except (TypeError, ValueError, AttributeError) as e:
        raise ContainerError(f"{path.name}: 头部字段格式错误: {e}") from e
    logger.info(f"模型已加载: {path} ({len(system.modalities)} 个模型)")
    return system


def _load_system(header: Dict[str, Any], payload: bytes) -> TrainedSystem:
    reader = _PayloadReader(header.get('arrays', []), payload)
    modalities: Dict[str, FittedModality] = {}
    feature_names = {}
    for entry in header['modalities']:
        modalities[entry['name']] = _load_modality(entry, reader)
        feature_names[entry['name']] = tuple(entry['feature_names'])
    if not modalities:
        raise ContainerError("容器中没有任何模型")

    fusion: Optional[Dict[str, Any]] = header.get('fusion')
    return TrainedSystem(
        config=PipelineConfig.from_dict(header['config']),
        modalities=modalities,
        feature_names=feature_names,
        fusion=fusion,
        cv_uars={k: float(v) for k, v in (header.get('cv_uars') or {}).items()},
    )
