import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from .config import Config
from .errors import IngestionError, LabelError
from .evaluation import ymrs_to_class

logger = logging.getLogger(__name__)

PATH_PREFIX = 'path_'


@dataclass(frozen=True)
class ManifestRow:
    sample_id: str
    split: str
    label: Optional[str]
    ymrs: Optional[int]
    paths: Dict[str, Path] = field(default_factory=dict)
    timestamps: Optional[Path] = None


@dataclass(frozen=True)
class Manifest:
    """数据集清单: 每行一个片段"""
    rows: Tuple[ManifestRow, ...]
    modalities: Tuple[str, ...]
    base_dir: Path

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'Manifest':
        """
        读取清单 CSV。必需列: sample_id, split, label 或 ymrs（至少一列）, path_<modality>（至少一列）;
        可选列: timestamps。相对路径相对于清单所在目录解析
        """
        path = Path(path)
        base_dir = path.parent
        with open(path, 'r', encoding='utf-8', newline='') as f:
            reader = csv.DictReader(f)
            header = reader.fieldnames or []
            for required in ('sample_id', 'split'):
                if required not in header:
                    raise IngestionError(f"{path.name}: 清单缺少列 {required}", line_number=1)
            if 'label' not in header and 'ymrs' not in header:
                raise IngestionError(f"{path.name}: 清单必须包含 label 或 ymrs 列", line_number=1)
            modalities = tuple(h[len(PATH_PREFIX):] for h in header if h.startswith(PATH_PREFIX))
            if not modalities:
                raise IngestionError(f"{path.name}: 清单没有任何 path_<modality> 列", line_number=1)

            rows = []
            seen = set()
            for line_number, record in enumerate(reader, 2):
                row = cls._parse_row(record, modalities, base_dir, line_number)
                if row.sample_id in seen:
                    raise IngestionError(f"重复的 sample_id: {row.sample_id}", line_number)
                seen.add(row.sample_id)
                rows.append(row)

        if not rows:
            raise IngestionError(f"{path.name}: 清单没有样本")
        logger.info(f"读取清单 {path.name}: {len(rows)} 个片段, 模态 {list(modalities)}")
        return cls(rows=tuple(rows), modalities=modalities, base_dir=base_dir)

    @staticmethod
    def _parse_row(record: Dict[str, str], modalities: Sequence[str], base_dir: Path,
                   line_number: int) -> ManifestRow:
        sample_id = (record.get('sample_id') or '').strip()
        if not sample_id:
            raise IngestionError("sample_id 为空", line_number)
        split = (record.get('split') or '').strip()
        if split not in Config.SPLITS:
            raise IngestionError(f"无效的 split: {split!r}，应为 {list(Config.SPLITS)} 之一", line_number)

        label = (record.get('label') or '').strip() or None
        ymrs = None
        raw_ymrs = (record.get('ymrs') or '').strip()
        if raw_ymrs:
            try:
                ymrs = int(raw_ymrs)
            except ValueError:
                raise IngestionError(f"YMRS 分数不是整数: {raw_ymrs}", line_number)
            try:
                mapped = ymrs_to_class(ymrs)
            except LabelError as e:
                raise IngestionError(str(e), line_number)
            label = label or mapped

        paths = {}
        for modality in modalities:
            resolved = _resolve(base_dir, record.get(PATH_PREFIX + modality), line_number)
            if resolved is not None:
                paths[modality] = resolved

        timestamps = _resolve(base_dir, record.get('timestamps'), line_number)
        return ManifestRow(sample_id, split, label, ymrs, paths, timestamps)

    def select(self, splits: Sequence[str]) -> List[ManifestRow]:
        unknown = [s for s in splits if s not in Config.SPLITS]
        if unknown:
            raise IngestionError(f"未知的 split: {unknown}")
        selected = [r for r in self.rows if r.split in splits]
        if not selected:
            raise IngestionError(f"清单中没有属于 {list(splits)} 的样本")
        return selected

    @staticmethod
    def labels_of(rows: Sequence[ManifestRow]) -> Tuple[str, ...]:
        """返回各行的类别；缺少标签时报错"""
        missing = [r.sample_id for r in rows if r.label is None]
        if missing:
            raise LabelError(f"以下样本没有标签: {missing[:5]}{'...' if len(missing) > 5 else ''}")
        return tuple(r.label for r in rows)


def _resolve(base_dir: Path, raw: Optional[str], line_number: int) -> Optional[Path]:
    raw = (raw or '').strip()
    if not raw:
        return None
    path = Path(raw)
    if not path.is_absolute():
        path = base_dir / path
    if not path.exists():
        raise IngestionError(f"引用的文件不存在: {path}", line_number)
    return path
