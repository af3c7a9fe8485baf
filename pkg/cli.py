#!/usr/bin/env python3
"""
L-Tuning CLI

Command-line entry point for the label-conditioned prefix/prompt tuning
toolkit: build a frozen toy backbone, generate or load a dataset, train and
evaluate adapters, and run the parameter audit, gradient check and
convergence comparison.

Usage:
    python cli.py <command> [options]

Commands:
    init-backbone   Write a deterministic backbone weight file
    gen-data        Generate the synthetic keyword task
    init-adapter    Write an untrained adapter (zero heads)
    train           Train an adapter on a dataset directory
    eval            Evaluate an adapter on one split
    audit           Compare trainable parameter counts with their formulas
    gradcheck       Finite-difference check of adapter gradients
    compare         Steps-to-threshold comparison across methods and seeds
    benchmark       Train every method once and tabulate validation accuracy

Machine-readable results go to stdout as JSON; logs and tables go to stderr.
Exit codes: 0 ok, 1 usage or config error, 2 I/O or data error, 3 check failed.
"""

import argparse
import logging
import math
import sys
from pathlib import Path

from ltuning.adapters import METHODS, AdapterDims, audit_params, build_adapter, load_adapter, save_adapter
from ltuning.backbone import BackboneConfig, init_backbone, load_weights, save_weights
from ltuning.config import RunConfig, apply_overrides, load_config
from ltuning.data import SynthSpec, gen_synth, load_dataset_dir
from ltuning.env import load_env
from ltuning.errors import (
    AdapterError, BackboneConfigError, ConfigError, DataError, LTuningError, VocabularyOverflowError,
)
from ltuning.evaluation import LabelSet, compare_convergence, evaluate
from ltuning.fileio import dumps_stable
from ltuning.logs import setup_logging
from ltuning.reporting import Console, print_convergence, write_curves_csv, write_metrics_csv, write_results, write_summary
from ltuning.training import check_gradients, train

logger = logging.getLogger('ltuning.cli')

ROOT_DIR = Path(__file__).parent.absolute()

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CHECK = 3

# Micro configuration for gradcheck when no --config is given
GRADCHECK_BACKBONE = BackboneConfig(d=8, m=2, H=2, V=32, max_seq=32, seed=0)
GRADCHECK_L = 3

console = Console()


class ArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def emit(data) -> None:
    """Write a JSON result to stdout."""
    sys.stdout.write(dumps_stable(data))
    sys.stdout.flush()


# Shared loading

def _run_config(args, **overrides) -> RunConfig:
    cfg = load_config(getattr(args, 'config', None))
    return apply_overrides(cfg, overrides).validate()


def _load_backbone(args, cfg: RunConfig):
    if getattr(args, 'backbone', None):
        return load_weights(args.backbone)
    logger.info("[INIT] no --backbone given, initializing one from the config")
    return init_backbone(cfg.backbone)


def _load_data(args, cfg: RunConfig):
    directory = getattr(args, 'data', None) or cfg.data.dir
    if not directory:
        raise ConfigError("no dataset: pass --data or set data.dir in the config")
    return load_dataset_dir(directory, cfg.data.text_column, cfg.data.label_column)


def _label_set(dataset, backbone, length=None) -> LabelSet:
    tokenizer = dataset.tokenizer()
    if len(tokenizer) > backbone.config.V:
        raise VocabularyOverflowError(
            f"dataset vocabulary has {len(tokenizer)} entries but the backbone embeds only V={backbone.config.V}")
    return dataset.label_set(tokenizer, length)


def _train_overrides(args) -> dict:
    return {
        'adapter.method': getattr(args, 'method', None),
        'train.steps': getattr(args, 'steps', None),
        'train.batch': getattr(args, 'batch', None),
        'train.lr': getattr(args, 'lr', None),
        'train.seed': getattr(args, 'seed', None),
        'train.eval_every': getattr(args, 'eval_every', None),
        'train.optimizer': getattr(args, 'optimizer', None),
    }


# Commands

def cmd_init_backbone(args):
    cfg = _run_config(args, **{'backbone.seed': args.seed})
    backbone = init_backbone(cfg.backbone)
    path = save_weights(backbone, args.out)
    emit({
        'path': str(path),
        'checksum': backbone.checksum(),
        'param_count': backbone.parameter_count(),
        'config': cfg.backbone.to_dict(),
    })
    return EXIT_OK


def cmd_gen_data(args):
    cfg = _run_config(args)
    spec = SynthSpec(K=args.classes, seed=args.seed, V=args.vocab_size or cfg.backbone.V)
    dataset = gen_synth(spec, args.train, args.val, out_dir=args.out)
    emit({
        'dir': str(args.out),
        'labels': dataset.label_names,
        'train': len(dataset.splits['train']),
        'val': len(dataset.splits['val']),
        'vocab_size': len(dataset.vocabulary),
    })
    return EXIT_OK


def cmd_init_adapter(args):
    cfg = _run_config(args, **{'adapter.method': args.method})
    backbone = _load_backbone(args, cfg)
    dataset = _load_data(args, cfg)
    labels = _label_set(dataset, backbone, cfg.adapter.l)
    dims = AdapterDims.for_backbone(backbone.config, l=labels.l, K=labels.K, **cfg.adapter.options())
    adapter = build_adapter(cfg.adapter.method, dims, seed=cfg.train.seed)
    path = save_adapter(adapter, args.out)
    emit({'path': str(path), 'method': adapter.method, 'trainable_params': adapter.trainable_count()})
    return EXIT_OK


def cmd_train(args):
    cfg = _run_config(args, **_train_overrides(args))
    cfg.echo()
    backbone = _load_backbone(args, cfg)
    dataset = _load_data(args, cfg)
    labels = _label_set(dataset, backbone, cfg.adapter.l)
    val = dataset.splits.get('val')

    result = train(backbone, cfg.adapter.method, dataset.examples('train'), labels, cfg.train,
                   val=val, adapter_options=cfg.adapter.options())
    save_adapter(result.adapter, args.out)
    if args.metrics:
        write_metrics_csv(result.records, args.metrics)

    val_records = result.val_records()
    summary = {
        'method': cfg.adapter.method,
        'steps': cfg.train.steps,
        'final_train_loss': result.train_losses[-1],
        'val_loss': val_records[-1].loss if val_records else None,
        'val_accuracy': val_records[-1].accuracy if val_records else None,
        'trainable_params': result.adapter.trainable_count(),
        'backbone_checksum': backbone.checksum(),
        'adapter': str(args.out),
    }
    emit(summary)
    return EXIT_OK


def cmd_eval(args):
    cfg = _run_config(args)
    backbone = load_weights(args.backbone)
    adapter = load_adapter(args.adapter)
    dataset = _load_data(args, cfg)
    labels = _label_set(dataset, backbone, adapter.dims.l)
    if labels.K != adapter.dims.K and not adapter.is_nli:
        raise DataError(f"adapter was built for K={adapter.dims.K} labels, dataset has {labels.K}")
    split = args.split or cfg.data.split
    emit(evaluate(backbone, adapter, dataset.examples(split), labels, workers=args.workers))
    return EXIT_OK


def cmd_audit(args):
    cfg = _run_config(args)
    methods = METHODS if args.method == 'all' else [args.method]
    l = args.l or cfg.adapter.l or 8
    reports = []
    for method in methods:
        dims = AdapterDims.for_backbone(cfg.backbone, l=l, K=args.classes, **cfg.adapter.options())
        reports.append(audit_params(method, dims, cfg.backbone))

    console.table('Trainable parameters', ['method', 'formula', 'expected', 'actual', 'match', '% of backbone'],
                  [[r['method'], r['formula'], r['expected'], r['actual'], r['match'], r['trainable_percent']]
                   for r in reports])
    emit(reports[0] if len(reports) == 1 else reports)
    return EXIT_OK if all(r['match'] for r in reports) else EXIT_CHECK


def cmd_gradcheck(args):
    if args.config:
        cfg = _run_config(args)
        backbone_cfg, l = cfg.backbone, cfg.adapter.l or GRADCHECK_L
        options = cfg.adapter.options()
    else:
        backbone_cfg, l, options = GRADCHECK_BACKBONE, GRADCHECK_L, {}
    backbone = init_backbone(backbone_cfg)
    methods = METHODS if args.method == 'all' else [args.method]

    results = {}
    for method in methods:
        dims = AdapterDims.for_backbone(backbone_cfg, l=l, K=args.classes, **options)
        report = check_gradients(backbone, method, dims, seed=args.seed, tolerance=args.tolerance)
        results[method] = report.to_dict()

    console.table('Gradient check', ['method', 'group', 'max relative error'],
                  [[m, g, e] for m, r in results.items() for g, e in sorted(r['errors'].items())])
    emit(results)
    return EXIT_OK if all(r['passed'] for r in results.values()) else EXIT_CHECK


def _seed_list(args, cfg: RunConfig):
    if args.seed_list:
        try:
            seeds = [int(s) for s in args.seed_list.split(',') if s.strip()]
        except ValueError:
            raise ConfigError(f"--seed-list must be comma-separated integers, got '{args.seed_list}'") from None
    else:
        seeds = list(range(cfg.train.seed, cfg.train.seed + args.seeds))
    if not seeds:
        raise ConfigError("compare needs at least one seed (--seeds N with N >= 1, or --seed-list)")
    return seeds


def cmd_compare(args):
    cfg = _run_config(args, **_train_overrides(args))
    cfg.echo()
    methods = [m.strip() for m in args.methods.split(',') if m.strip()]
    unknown = [m for m in methods if m not in METHODS]
    if unknown or not methods:
        raise ConfigError(f"--methods must list methods from {', '.join(METHODS)}, got '{args.methods}'")
    seeds = _seed_list(args, cfg)
    threshold = args.threshold if args.threshold is not None else cfg.train.loss_threshold
    if not (math.isfinite(threshold) and threshold > 0):
        raise ConfigError(f"--threshold must be a positive number, got {threshold}")

    backbone = _load_backbone(args, cfg)
    dataset = _load_data(args, cfg)
    labels = _label_set(dataset, backbone, cfg.adapter.l)
    result = compare_convergence(backbone, methods, dataset.examples('train'), labels, seeds, threshold,
                                 cfg.train, dataset.examples('val'), adapter_options=cfg.adapter.options(),
                                 workers=args.workers)

    out = Path(args.out)
    write_curves_csv(result.curves, out / 'curves.csv')
    write_summary(result, out / 'summary.json')
    print_convergence(console, result, list(result.steps_to_threshold), threshold)
    emit(result.summary())
    return EXIT_OK if not result.failures else EXIT_DATA


def cmd_benchmark(args):
    cfg = _run_config(args, **_train_overrides(args))
    cfg.echo()
    methods = [m.strip() for m in args.methods.split(',') if m.strip()]
    backbone = _load_backbone(args, cfg)
    dataset = _load_data(args, cfg)
    labels = _label_set(dataset, backbone, cfg.adapter.l)
    train_data, val = dataset.examples('train'), dataset.examples('val')

    rows = []
    for method in methods:
        if method not in METHODS:
            raise ConfigError(f"unknown method '{method}'")
        result = train(backbone, method, train_data, labels, cfg.train, val=val,
                       adapter_options=cfg.adapter.options())
        metrics = evaluate(backbone, result.adapter, val, labels)
        audit = audit_params(method, result.adapter.dims, backbone.config)
        val_records = result.val_records()
        rows.append({
            'method': method,
            'trainable_params': audit['actual'],
            'expected_params': audit['expected'],
            'trainable_percent': audit['trainable_percent'],
            'val_accuracy': metrics['accuracy'],
            'final_val_loss': val_records[-1].loss if val_records else None,
        })

    write_results(rows, args.out, xlsx=args.xlsx)
    console.table('Validation accuracy', ['method', 'trainable', '% of backbone', 'val accuracy'],
                  [[r['method'], r['trainable_params'], r['trainable_percent'], r['val_accuracy']] for r in rows])
    emit({'methods': rows})
    return EXIT_OK


# Parser

def _add_train_flags(p):
    p.add_argument('--steps', type=int, help='Training steps (overrides train.steps)')
    p.add_argument('--batch', type=int, help='Batch size, must be even (overrides train.batch)')
    p.add_argument('--lr', type=float, help='Learning rate (overrides train.lr)')
    p.add_argument('--seed', type=int, help='Training seed (overrides train.seed)')
    p.add_argument('--eval-every', dest='eval_every', type=int, help='Validation interval in steps')
    p.add_argument('--optimizer', choices=['adam', 'sgd'], help='Optimizer (overrides train.optimizer)')


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog='cli.py',
        description='L-Tuning: label-conditioned prefix and prompt tuning on a frozen toy backbone',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python cli.py init-backbone --config config.toml --out runs/backbone.ltw
  python cli.py gen-data --classes 4 --train 2000 --val 400 --seed 0 --out runs/synth
  python cli.py train --method lt-prompt --backbone runs/backbone.ltw --data runs/synth --out runs/lt-prompt.ltw --metrics runs/metrics.csv
  python cli.py eval --backbone runs/backbone.ltw --adapter runs/lt-prompt.ltw --data runs/synth --split val
  python cli.py audit --method lt-prompt --config config.toml
  python cli.py gradcheck --method all
  python cli.py compare --methods prompt,lt-prompt --seeds 5 --threshold 0.3 --data runs/synth --out runs/compare
        """
    )
    parser.add_argument('--log-level', dest='log_level', help='DEBUG, INFO, WARNING or ERROR (default: LTUNE_LOG_LEVEL or INFO)')
    subparsers = parser.add_subparsers(dest='command', help='Available commands', parser_class=ArgumentParser)

    # init-backbone
    p = subparsers.add_parser('init-backbone', help='Write a deterministic backbone weight file')
    p.add_argument('--config', help='TOML run config')
    p.add_argument('--seed', type=int, help='Backbone seed (overrides backbone.seed)')
    p.add_argument('--out', required=True, help='Output weight file')

    # gen-data
    p = subparsers.add_parser('gen-data', help='Generate the synthetic keyword task')
    p.add_argument('--config', help='TOML run config (backbone.V bounds the vocabulary)')
    p.add_argument('--classes', type=int, default=4, help='Number of classes K (default: 4)')
    p.add_argument('--train', type=int, default=2000, help='Training examples (default: 2000)')
    p.add_argument('--val', type=int, default=400, help='Validation examples (default: 400)')
    p.add_argument('--seed', type=int, default=0, help='Generator seed (default: 0)')
    p.add_argument('--vocab-size', dest='vocab_size', type=int, help='Vocabulary limit (default: backbone.V)')
    p.add_argument('--out', required=True, help='Output dataset directory')

    # init-adapter
    p = subparsers.add_parser('init-adapter', help='Write an untrained adapter with zero heads')
    p.add_argument('--method', required=True, choices=METHODS, help='Adapter method')
    p.add_argument('--backbone', help='Backbone weight file (default: initialize from config)')
    p.add_argument('--data', help='Dataset directory (labels define K and l)')
    p.add_argument('--config', help='TOML run config')
    p.add_argument('--out', required=True, help='Output adapter file')

    # train
    p = subparsers.add_parser('train', help='Train an adapter')
    p.add_argument('--method', choices=METHODS, help='Adapter method (overrides adapter.method)')
    p.add_argument('--backbone', help='Backbone weight file (default: initialize from config)')
    p.add_argument('--data', help='Dataset directory (overrides data.dir)')
    p.add_argument('--config', help='TOML run config')
    p.add_argument('--out', required=True, help='Output adapter file')
    p.add_argument('--metrics', help='Metrics CSV (step,split,loss,accuracy)')
    _add_train_flags(p)

    # eval
    p = subparsers.add_parser('eval', help='Evaluate an adapter on one split')
    p.add_argument('--backbone', required=True, help='Backbone weight file')
    p.add_argument('--adapter', required=True, help='Adapter weight file')
    p.add_argument('--data', help='Dataset directory (overrides data.dir)')
    p.add_argument('--split', help='Split to evaluate (default: data.split, "val")')
    p.add_argument('--config', help='TOML run config')
    p.add_argument('--workers', type=int, default=1, help='Scoring threads (default: 1)')

    # audit
    p = subparsers.add_parser('audit', help='Check trainable parameter counts against their formulas')
    p.add_argument('--method', required=True, choices=list(METHODS) + ['all'], help='Adapter method or "all"')
    p.add_argument('--config', help='TOML run config')
    p.add_argument('--l', type=int, help='Label length l (default: adapter.l or 8)')
    p.add_argument('--classes', type=int, default=2, help='Number of classes K (default: 2)')

    # gradcheck
    p = subparsers.add_parser('gradcheck', help='Finite-difference check of adapter gradients')
    p.add_argument('--method', required=True, choices=list(METHODS) + ['all'], help='Adapter method or "all"')
    p.add_argument('--config', help='TOML run config (default: d=8, m=2, H=2, l=3 micro config)')
    p.add_argument('--classes', type=int, default=2, help='Number of classes K (default: 2)')
    p.add_argument('--seed', type=int, default=0, help='Seed for the random adapter and batch (default: 0)')
    p.add_argument('--tolerance', type=float, default=1e-4, help='Maximum relative error (default: 1e-4)')

    # compare
    p = subparsers.add_parser('compare', help='Steps to a validation-loss threshold per method and seed')
    p.add_argument('--methods', default='prompt,lt-prompt', help='Comma-separated methods (default: prompt,lt-prompt)')
    p.add_argument('--seeds', type=int, default=5, help='Number of seeds, counted up from train.seed (default: 5)')
    p.add_argument('--seed-list', dest='seed_list', help='Explicit comma-separated seeds (overrides --seeds)')
    p.add_argument('--threshold', type=float, help='Validation loss threshold (default: train.loss_threshold)')
    p.add_argument('--backbone', help='Backbone weight file (default: initialize from config)')
    p.add_argument('--data', help='Dataset directory (overrides data.dir)')
    p.add_argument('--config', help='TOML run config')
    p.add_argument('--out', required=True, help='Output directory for curves.csv and summary.json')
    p.add_argument('--workers', type=int, default=1, help='Parallel training processes (default: 1)')
    _add_train_flags(p)

    # benchmark
    p = subparsers.add_parser('benchmark', help='Train every method once and tabulate validation accuracy')
    p.add_argument('--methods', default=','.join(METHODS), help='Comma-separated methods (default: all)')
    p.add_argument('--backbone', help='Backbone weight file (default: initialize from config)')
    p.add_argument('--data', help='Dataset directory (overrides data.dir)')
    p.add_argument('--config', help='TOML run config')
    p.add_argument('--out', required=True, help='Output directory for results.json')
    p.add_argument('--xlsx', action='store_true', help='Also write results.xlsx')
    _add_train_flags(p)

    return parser


COMMANDS = {
    'init-backbone': cmd_init_backbone,
    'gen-data': cmd_gen_data,
    'init-adapter': cmd_init_adapter,
    'train': cmd_train,
    'eval': cmd_eval,
    'audit': cmd_audit,
    'gradcheck': cmd_gradcheck,
    'compare': cmd_compare,
    'benchmark': cmd_benchmark,
}


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, (ConfigError, AdapterError, BackboneConfigError)):
        return EXIT_USAGE
    return EXIT_DATA


def main(argv=None):
    load_env()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    setup_logging(args.log_level)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE

    try:
        return COMMANDS[args.command](args)
    except (LTuningError, OSError) as e:
        logger.error(f"[ERROR] {args.command}: {e}")
        logger.debug('traceback', exc_info=True)
        return exit_code_for(e)


if __name__ == '__main__':
    sys.exit(main())
