import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import simplejson
import yaml

from .config import Config, PipelineConfig, parse_override
from .container import load_container, save_container
from .errors import PipelineError
from .evaluation import build_report
from .fusion import fuse_outputs, mm1
from .lld_reader import load_label_column, load_prob_table, write_feature_table, write_prob_table
from .manifest import Manifest
from .models import ModalityOutput, dumps_report
from .pipeline import ExperimentRunner
from .synth import SynthSpec, generate_corpus

logger = logging.getLogger(__name__)

MODEL_FILE_NAME = 'model.bdc'


def _split_list(value: Optional[str]) -> Optional[List[str]]:
    if value is None:
        return None
    items = [v.strip() for v in value.split(',') if v.strip()]
    return items or None


def _load_config(args) -> PipelineConfig:
    config = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    overrides: Dict[str, Any] = {}
    for item in args.set or []:
        overrides.update(parse_override(item))
    if args.seed is not None:
        overrides['seed'] = args.seed
    return config.with_overrides(overrides) if overrides else config


def _out_dir(args) -> Path:
    out = Path(args.out) if args.out else Config.OUTPUT_DIR
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest_path(args) -> Path:
    return Path(args.manifest) if args.manifest else Config().manifest_path()


def write_report(path: Path, data: Dict[str, Any]):
    temp_file = path.with_suffix('.tmp')
    with open(temp_file, 'w', encoding='utf-8') as f:
        f.write(dumps_report(data))
    temp_file.replace(path)
    logger.info(f"报告已写出: {path}")


def write_config_snapshot(out: Path, config: PipelineConfig):
    """把本次实际生效的配置写到输出目录，可直接用 --config 复现"""
    path = out / Config.CONFIG_SNAPSHOT_NAME
    temp_file = path.with_suffix('.tmp')
    with open(temp_file, 'w', encoding='utf-8') as f:
        f.write(config.dump())
    temp_file.replace(path)


def cmd_synth(args) -> int:
    modalities = tuple(_split_list(args.modalities) or Config.MODALITIES)
    dims = [int(d) for d in _split_list(args.dims)] if args.dims else [23, 39, 76][:len(modalities)]
    if len(dims) != len(modalities):
        raise PipelineError(f"--dims 个数 {len(dims)} 与模态个数 {len(modalities)} 不一致")
    spec = SynthSpec(
        classes=tuple(_split_list(args.classes) or Config.DEFAULT_CLASSES),
        per_class=args.per_class,
        modalities=modalities,
        dims=dict(zip(modalities, dims)),
        separation=args.separation,
        noise=args.noise,
        informative_fraction=args.informative_fraction,
        n_tasks=args.tasks,
        frames_per_task=args.frames_per_task,
        missing_rate=args.missing_rate,
        dev_per_class=args.dev_per_class,
        test_per_class=args.test_per_class,
        seed=args.seed if args.seed is not None else 42,
        complementary=args.complementary,
        clip_level=tuple(_split_list(args.clip_level) or ()),
    )
    result = generate_corpus(spec, _out_dir(args))
    print(f"清单: {result.manifest_path} ({result.n_clips} 个片段, 各类 {result.class_counts})")
    return 0


def cmd_summarize(args) -> int:
    config = _load_config(args)
    manifest = Manifest.load(_manifest_path(args))
    runner = ExperimentRunner(manifest, config)
    out = _out_dir(args)
    for modality in _split_list(args.modalities) or list(manifest.modalities):
        for split in Config.SPLITS:
            rows = [r for r in manifest.rows if r.split == split]
            if not rows:
                continue
            matrix = runner.feature_matrix(modality, rows)
            clip_labels = {r.sample_id: r.label or '' for r in rows}
            labels = [clip_labels[c] for c in matrix.clips]
            write_feature_table(out / f"features_{modality}_{split}.csv", matrix, labels)
    logger.info(f"特征提取完成: {runner.reader.stats.to_dict()}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    manifest = Manifest.load(_manifest_path(args))
    runner = ExperimentRunner(manifest, config)
    rows = manifest.select(_split_list(args.splits) or ['train'])
    system = runner.train(rows, _split_list(args.modalities))

    out = _out_dir(args)
    save_container(out / MODEL_FILE_NAME, system)
    write_config_snapshot(out, config)
    write_report(out / 'train_summary.json', {
        'cv_uar': system.cv_uars,
        'params': {m: f.params.to_dict() for m, f in system.modalities.items()},
        'fusion': system.fusion,
        'n_clips': len(rows),
        'config': config.to_dict(),
    })
    return 0


def cmd_predict(args) -> int:
    system = load_container(args.model)
    manifest = Manifest.load(_manifest_path(args))
    runner = ExperimentRunner(manifest, system.config)
    rows = manifest.select(_split_list(args.splits) or ['test'])
    outputs, fused = runner.predict(system, rows)

    out = _out_dir(args)
    for output in outputs:
        write_prob_table(out / f"pred_{output.modality}.csv", output.probs)
    if fused is not None:
        write_prob_table(out / "pred_fused.csv", fused.probs, fused.labels)

    if all(r.label is not None for r in rows):
        true_labels = Manifest.labels_of(rows)
        classes = outputs[0].probs.class_labels
        reports = {o.modality: build_report(true_labels, o.labels, classes,
                                            params=system.modalities[o.modality].params.to_dict(),
                                            seed=system.config.seed).to_dict()
                   for o in outputs}
        data: Dict[str, Any] = {'modalities': reports, 'config': system.config.to_dict()}
        if fused is not None:
            fused_report = build_report(true_labels, fused.labels, classes, params=fused.weights,
                                        seed=system.config.seed)
            fused_report.mm1 = mm1(fused_report.uar, [r['uar'] for r in reports.values()])
            data['fusion'] = fused_report.to_dict()
        write_report(out / 'predict_report.json', data)
    return 0


def cmd_cv(args) -> int:
    config = _load_config(args)
    manifest = Manifest.load(_manifest_path(args))
    runner = ExperimentRunner(manifest, config)
    rows = manifest.select(_split_list(args.splits) or ['train'])
    dev_rows = None
    if args.protocol == 'dev':
        dev_rows = manifest.select(_split_list(args.dev_splits) or ['dev'])
    requested = _split_list(args.modalities)
    out = _out_dir(args)
    prefix = args.protocol
    write_config_snapshot(out, config)

    outputs = []
    for modality in runner.run_modalities(requested):
        grid, _ = runner.cross_validate(modality, rows, requested, dev_rows)
        write_report(out / f"{prefix}_{modality}.json", grid.report.to_dict())
        write_prob_table(out / f"{prefix}_{modality}_probs.csv", grid.probs)
        outputs.append(ModalityOutput(modality, grid.probs, grid.report.uar))
        print(f"{modality}: UAR={grid.report.uar:.4f} 参数={grid.params.to_dict()}")

    if runner.can_fuse(len(outputs)):
        scored = list(rows) + list(dev_rows or [])
        clip_labels = dict(zip((r.sample_id for r in scored), Manifest.labels_of(scored)))
        true_labels = [clip_labels[s] for s in outputs[0].probs.sample_ids]
        outcome = runner.fuse(outputs, true_labels)
        write_report(out / f"{prefix}_fusion.json", outcome.report.to_dict())
        write_prob_table(out / f"{prefix}_fusion_probs.csv", outcome.result.probs, outcome.result.labels)
        print(f"融合 {outcome.result.method}: UAR={outcome.report.uar:.4f} MM1={outcome.report.mm1:+.4f}")
    return 0


def _parse_prob_inputs(items: Sequence[str]) -> List[ModalityOutput]:
    outputs = []
    for item in items:
        name, sep, path = item.partition('=')
        if not sep:
            path = item
            name = Path(item).stem
        outputs.append(ModalityOutput(name, load_prob_table(path)))
    return outputs


def cmd_fuse(args) -> int:
    config = _load_config(args)
    outputs = _parse_prob_inputs(args.probs)
    sample_ids = outputs[0].probs.sample_ids

    true_labels = None
    if args.labels:
        labels = load_label_column(args.labels)
        true_labels = [labels[s] for s in sample_ids if s in labels]
        if len(true_labels) != len(sample_ids):
            raise PipelineError(f"{args.labels}: 缺少部分样本的标签")
    elif args.manifest:
        manifest = Manifest.load(args.manifest)
        by_id = {r.sample_id: r for r in manifest.rows}
        missing = [s for s in sample_ids if s not in by_id]
        if missing:
            raise PipelineError(f"清单中没有样本: {missing[:5]}")
        true_labels = list(Manifest.labels_of([by_id[s] for s in sample_ids]))
    if true_labels is None and config.fusion_method != "majority":
        raise PipelineError(f"{config.fusion_method} 融合需要真实标签 (--labels 或 --manifest)")

    classes = outputs[0].probs.class_labels
    if true_labels is not None:
        outputs = [ModalityOutput(o.modality, o.probs,
                                  build_report(true_labels, o.labels, classes).uar) for o in outputs]
    result = fuse_outputs(outputs, config.fusion_method, true_labels, config.alpha_grid,
                          config.fallback_modality, config.dirichlet_draws, config.seed)

    out = _out_dir(args)
    write_prob_table(out / "fused_probs.csv", result.probs, result.labels)
    if true_labels is not None:
        report = build_report(true_labels, result.labels, classes,
                              params={'method': result.method, **result.weights}, seed=config.seed)
        report.mm1 = mm1(report.uar, [o.dev_uar for o in outputs])
        report.config = config.to_dict()
        write_report(out / "fusion_report.json", report.to_dict())
        print(f"融合 {result.method}: UAR={report.uar:.4f} MM1={report.mm1:+.4f}")
    return 0


def cmd_report(args) -> int:
    rows = []
    for path in args.reports:
        with open(path, 'r', encoding='utf-8') as f:
            try:
                data = simplejson.load(f)
            except simplejson.JSONDecodeError as e:
                raise PipelineError(f"{path}: 不是有效的 JSON: {e}") from e
        if 'uar' in data:
            rows.append((Path(path).stem, data))
        for name, sub in (data.get('modalities') or {}).items():
            rows.append((f"{Path(path).stem}:{name}", sub))
        if isinstance(data.get('fusion'), dict) and 'uar' in data['fusion']:
            rows.append((f"{Path(path).stem}:fusion", data['fusion']))
    if not rows:
        raise PipelineError("输入文件中没有评估报告")

    classes = list(rows[0][1]['per_class_recall'])
    print("\t".join(['报告', 'UAR', '准确率', '样本数'] + classes + ['MM1']))
    for name, data in rows:
        recalls = [f"{data['per_class_recall'].get(c, float('nan')):.4f}" for c in classes]
        mm1_text = f"{data['mm1']:+.4f}" if data.get('mm1') is not None else '-'
        print("\t".join([name, f"{data['uar']:.4f}", f"{data['accuracy']:.4f}", str(data['n_samples'])]
                        + recalls + [mm1_text]))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='YAML 配置文件')
    common.add_argument('--seed', type=int, help='覆盖配置中的随机种子')
    common.add_argument('--set', action='append', metavar='KEY=VALUE', help='覆盖任意配置项，可重复')
    common.add_argument('--out', help='输出目录')
    common.add_argument('--verbose', action='store_true', help='输出调试日志')

    parser = argparse.ArgumentParser(prog='bdstate', description='多模态双相障碍状态分类流水线')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('synth', parents=[common], help='生成合成语料')
    p.add_argument('--classes', help='逗号分隔的类别')
    p.add_argument('--per-class', type=int, default=40)
    p.add_argument('--modalities', help='逗号分隔的模态')
    p.add_argument('--dims', help='逗号分隔的各模态描述子维数')
    p.add_argument('--separation', type=float, default=5.0)
    p.add_argument('--noise', type=float, default=1.0)
    p.add_argument('--informative-fraction', type=float, default=1.0)
    p.add_argument('--tasks', type=int, default=7)
    p.add_argument('--frames-per-task', type=int, default=20)
    p.add_argument('--missing-rate', type=float, default=0.0)
    p.add_argument('--dev-per-class', type=int, default=0)
    p.add_argument('--test-per-class', type=int, default=0)
    p.add_argument('--complementary', action='store_true', help='每个模态只区分一对类别')
    p.add_argument('--clip-level', help='逗号分隔，按片段级单行特征写出的模态')
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser('summarize', parents=[common], help='计算泛函特征表')
    p.add_argument('--manifest')
    p.add_argument('--modalities')
    p.set_defaults(handler=cmd_summarize)

    p = sub.add_parser('train', parents=[common], help='选参并训练最终模型')
    p.add_argument('--manifest')
    p.add_argument('--splits', default='train', help='训练使用的 split，如 train,dev')
    p.add_argument('--modalities')
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('predict', parents=[common], help='用保存的模型预测')
    p.add_argument('--model', required=True)
    p.add_argument('--manifest')
    p.add_argument('--splits', default='test')
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser('cv', parents=[common], help='k 折交叉验证或固定验证集上的网格搜索')
    p.add_argument('--manifest')
    p.add_argument('--splits', default='train', help='参与拟合的 split')
    p.add_argument('--protocol', choices=['cv', 'dev'], default='cv',
                   help='cv: 分层 k 折; dev: 在 --splits 上拟合、在 --dev-splits 上选参并报告')
    p.add_argument('--dev-splits', default='dev')
    p.add_argument('--modalities')
    p.set_defaults(handler=cmd_cv)

    p = sub.add_parser('fuse', parents=[common], help='融合若干预测表')
    p.add_argument('--probs', nargs='+', required=True, metavar='[NAME=]PATH')
    p.add_argument('--labels', help='含 sample_id,label 列的标签表')
    p.add_argument('--manifest')
    p.set_defaults(handler=cmd_fuse)

    p = sub.add_parser('report', parents=[common], help='打印评估报告')
    p.add_argument('reports', nargs='+')
    p.set_defaults(handler=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    )
    try:
        return args.handler(args)
    except (PipelineError, OSError, yaml.YAMLError) as e:
        message = str(e).replace('\n', ' ')
        print(f"错误: {message}", file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
