#!/usr/bin/env python3
"""
DiFF Desk Pipeline

Diagnosis-first multi-rater label fusion on a synthetic fundus benchmark:
generate data, pretrain the diagnosis network, build DF-GT labels, train
the Take-and-Give segmentation network, evaluate and render the report.

Usage:
    python main.py <synth|pretrain|dfgt|train|eval|report> --config desk_config.json [options]

Exit codes: 0 success, 1 usage, 2 invalid input, 3 runtime failure.

Author: DiFF Desk Toolkit
"""

import argparse
import logging
import os
import sys
from typing import Dict, List, Optional

import dfgt as dfgt_stage
import diagnet
import tgseg
from checkpoint import CheckpointError
from config import ConfigError, RunConfig, apply_overrides, history_path, load_config
from dataset import SPLITS, DatasetFormatError, TrainHistory, ValidationError, load_dataset, save_splits
from evaluate import (compare_fusions, eval_against_raters, eval_diagnosis, eval_generalization,
                      eval_rater_diagnosis, eval_self_fusion, mean_vcdr, plot_fusion_auc,
                      plot_histories, read_report, summarize_segmentation, write_report)
from metrics import MetricReport
from progress import ProgressTracker
from synthgen import STRUCTURES, generate_dataset
from utils import DFGT_METHODS, seed_everything, setup_logging

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INVALID = 2
EXIT_RUNTIME = 3

logger = logging.getLogger("DiFFDesk")


class MissingArtifactError(RuntimeError):
    """Raised when a stage's upstream artifact does not exist."""


class CLIParser(argparse.ArgumentParser):
    """Argument parser whose usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def require(path: str, produced_by: str) -> str:
    if not os.path.exists(path):
        raise MissingArtifactError(f"missing {path} (run '{produced_by}' first)")
    return path


def _load_split(config: RunConfig, split: str):
    split_dir = require(os.path.join(config.paths.dataset_dir, split), 'synth')
    return load_dataset(split_dir)


def _load_diagnet(config: RunConfig) -> diagnet.DiagnosisNet:
    return diagnet.load_diagnet(require(config.paths.diagnet, 'pretrain'))


def cmd_synth(config: RunConfig, out: Optional[str] = None) -> int:
    """Generate the synthetic benchmark splits."""
    root = out or config.paths.dataset_dir
    splits = generate_dataset(config.synth)
    save_splits(splits, root)

    print(f"Synthetic benchmark written to {root}")
    for split in SPLITS:
        if split in splits:
            dataset = splits[split]
            positives = int(dataset.labels.sum())
            print(f"  {split:<5}: {len(dataset):4d} samples, {positives:4d} positive "
                  f"({100.0 * positives / len(dataset):.1f}%), n={dataset.n} raters")
    return EXIT_OK


def cmd_pretrain(config: RunConfig, out: Optional[str] = None) -> int:
    """Pretrain and freeze the diagnosis network on majority-vote masks."""
    train = _load_split(config, 'train')
    path = out or config.paths.diagnet
    net = diagnet.build(config.diag, train)
    net, history = diagnet.pretrain(net, train, config.diag_hyper)
    diagnet.save_diagnet(net, path)
    history.save(history_path(path))

    print(f"Diagnosis network saved to {path}")
    if history.losses:
        print(f"  loss {history.losses[0]:.4f} -> {history.losses[-1]:.4f} over {len(history)} epochs")
    return EXIT_OK


def cmd_dfgt(config: RunConfig, out: Optional[str] = None) -> int:
    """Build DF-GT labels for the training split."""
    net = _load_diagnet(config)
    train = _load_split(config, 'train')
    path = out or config.paths.dfgt_dir(config.dfgt.method)
    result = dfgt_stage.build_dfgt(net, train, config.dfgt)
    dfgt_stage.save_dfgt(result, path)

    means = result.rater_mean_expertness().mean(axis=0) if len(result.failed) < len(result) else []
    print(f"DF-GT ({config.dfgt.method}) labels written to {path}")
    print(f"  {result.descent_fraction():.1%} of samples at or below the uniform loss, "
          f"{len(result.failed)} failed")
    for name, value in zip(train.metadata.get('raters', []), means):
        print(f"  mean expertness {name:<10} {value:.4f}")
    return EXIT_OK


def cmd_train(config: RunConfig, out: Optional[str] = None) -> int:
    """Train the Take-and-Give segmentation network on DF-GT labels."""
    net = _load_diagnet(config)
    train = _load_split(config, 'train')
    labels = dfgt_stage.load_dfgt(require(config.paths.dfgt_dir(config.dfgt.method), 'dfgt'))
    labels.check_source(train, config.dfgt)
    path = out or config.paths.tgseg

    seg = tgseg.build(config.seg, net)
    seg, history = tgseg.train(seg, labels, train, config.seg_hyper)
    tgseg.save_tgseg(seg, path)
    history.save(history_path(path))

    print(f"TGSegNet (bridges {list(seg.connected)}) saved to {path}")
    if history.losses:
        print(f"  loss {history.losses[0]:.4f} -> {history.losses[-1]:.4f} over {len(history)} epochs")
    return EXIT_OK


def _generalization_nets(config: RunConfig, train) -> List[diagnet.DiagnosisNet]:
    nets = []
    for seed in config.eval.generalization_seeds:
        arch = diagnet.DiagConfig.from_dict({**config.diag.to_dict(), 'seed': seed})
        hyper = diagnet.DiagHyper.from_dict({**config.diag_hyper.to_dict(), 'seed': seed})
        net, _ = diagnet.pretrain(diagnet.build(arch, train), train, hyper)
        nets.append(net)
    return nets


def cmd_eval(config: RunConfig, out: Optional[str] = None) -> int:
    """Score the trained networks and fusion strategies on the evaluation split."""
    method = config.dfgt.method
    net = _load_diagnet(config)
    seg = tgseg.load_tgseg(require(config.paths.tgseg, 'train'))
    train_labels = dfgt_stage.load_dfgt(require(config.paths.dfgt_dir(method), 'dfgt'))
    train = _load_split(config, 'train')
    data = _load_split(config, config.eval.split)
    train_labels.check_source(train, config.dfgt)
    thresholds = config.eval.thresholds

    preds = tgseg.predict_dataset(seg, data)
    targets = dfgt_stage.build_dfgt(net, data, config.dfgt)
    rows = compare_fusions(data, net, config.eval.methods, config.dfgt, {method: targets}, thresholds)
    fused = {row.method: row.fused for row in rows}

    sections: Dict[str, Dict[str, object]] = {}
    table = eval_against_raters(preds, data, thresholds)
    raters = data.metadata.get('raters', [f"r{r}" for r in range(data.n)])
    sections['segmentation'] = {
        f"dice.{STRUCTURES[k] if k < len(STRUCTURES) else k}.{raters[r]}": table[k, r]
        for k in range(data.K) for r in range(data.n)}
    sections['segmentation']['self_fusion_dice'] = eval_self_fusion(
        preds, targets.stack_labels(data.ids), thresholds)
    sections['segmentation']['diagnosis_auc'] = eval_diagnosis(preds, data, net)
    sections['segmentation']['bridges'] = '+'.join(f"B{b}" for b in seg.connected) or 'none'
    summary = summarize_segmentation(preds, targets.stack_labels(data.ids), data, net, thresholds,
                                     train_labels.mean_smoothness())
    sections['summary'] = summary.to_dict()

    sections['fusion'] = {}
    for row in rows:
        sections['fusion'][f"{row.method}.auc"] = row.auc
        sections['fusion'][f"{row.method}.dice_vs_mv"] = row.dice_vs_mv
        sections['fusion'][f"{row.method}.vcdr_positive"] = mean_vcdr(row.fused, data, label=1)

    sections['rater_diagnosis'] = {
        (raters[int(key[1:])] if key.startswith('r') else key): value
        for key, value in eval_rater_diagnosis(data, net).items()}

    if config.eval.generalization_seeds:
        generalization = eval_generalization(fused, data, _generalization_nets(config, train))
        sections['generalization'] = {
            f"{name}.seed{seed}": value
            for name, values in generalization.items()
            for seed, value in zip(config.eval.generalization_seeds, values)}

    expertness = train_labels.rater_mean_expertness()
    sections['dfgt_train'] = {'method': method, 'descent_fraction': train_labels.descent_fraction(),
                              'failed': len(train_labels.failed),
                              'smoothness': train_labels.mean_smoothness()}
    if len(expertness):
        for name, value in zip(raters, expertness.mean(axis=0)):
            sections['dfgt_train'][f"expertness.{name}"] = float(value)

    header = {'config_hash': config.section_hash('synth', 'diag', 'dfgt', 'seg', 'eval'),
              'seed': config.seed, 'split': data.split, 'samples': len(data),
              'thresholds': ','.join(str(t) for t in thresholds)}
    path = out or config.paths.report
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    write_report(path, sections, header)

    print(f"Evaluation report written to {path}")
    for row in rows:
        print(f"  {row.method:<14} AUC {row.auc:.4f}  Dice vs MV {row.dice_vs_mv:.4f}")
    return EXIT_OK


def cmd_report(config: RunConfig, out: Optional[str] = None) -> int:
    """Render plots from the evaluation report and training histories."""
    values = read_report(require(config.paths.report, 'eval'))
    target = out or config.paths.report_dir
    os.makedirs(target, exist_ok=True)

    aucs = {key[len('fusion.'):-len('.auc')]: float(value)
            for key, value in values.items() if key.startswith('fusion.') and key.endswith('.auc')}
    plot_fusion_auc(aucs, os.path.join(target, 'fusion_auc.png'))

    histories = [TrainHistory.load(path) for path in (config.paths.diagnet_history, config.paths.tgseg_history)
                 if os.path.isfile(path)]
    plot_histories(histories, os.path.join(target, 'loss_curves.png'))
    summary = MetricReport.from_flat(values, 'summary.')
    summary.write(os.path.join(target, 'summary.txt'))

    print(f"Plots written to {target}")
    for method, value in aucs.items():
        print(f"  {method:<14} AUC {value:.4f}")
    for key in ('segmentation.self_fusion_dice', 'segmentation.diagnosis_auc', 'dfgt_train.descent_fraction'):
        if key in values:
            print(f"  {key} = {values[key]}")
    for line in summary.to_text().splitlines():
        if not line.startswith('vcdr.values='):
            print(f"  summary.{line}")
    return EXIT_OK


COMMANDS = {
    'synth': cmd_synth,
    'pretrain': cmd_pretrain,
    'dfgt': cmd_dfgt,
    'train': cmd_train,
    'eval': cmd_eval,
    'report': cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = CLIParser(add_help=False)
    common.add_argument("--config", "-c", required=True, help="Path to the JSON run configuration")
    common.add_argument("--seed", type=int, help="Override the global seed")
    common.add_argument("--method", choices=DFGT_METHODS, help="Override the DF-GT parameterisation")
    common.add_argument("--blocks", help="Override the T&G connected blocks, e.g. B1,B2,B3 or none")
    common.add_argument("--out", help="Override the stage output path")
    common.add_argument("--log-level", "-l", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        default="WARNING", help="Logging level (default: WARNING)")
    common.add_argument("--log-file", help="Also log to this file")
    common.add_argument("--quiet", "-q", action="store_true", help="Suppress progress output")

    parser = CLIParser(
        description="Diagnosis-first multi-rater label fusion pipeline",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python main.py synth --config desk_config.json
  python main.py dfgt --config desk_config.json --method expg
  python main.py train --config desk_config.json --blocks B1,B2,B3
  python main.py eval --config desk_config.json --out runs/report/expg.txt
        """
    )
    subparsers = parser.add_subparsers(dest="command", metavar="command")
    subparsers.required = True
    for name, command in COMMANDS.items():
        subparsers.add_parser(name, parents=[common], help=command.__doc__)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for the pipeline."""
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging("ERROR" if args.quiet else args.log_level, args.log_file)

    try:
        config = apply_overrides(load_config(args.config), args.seed, args.method, args.blocks)
    except (ConfigError, ValidationError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_INVALID

    seed_everything(config.seed)
    tracker = ProgressTracker(stream=sys.stderr, enabled=not args.quiet)
    tracker.start()
    try:
        return COMMANDS[args.command](config, args.out)
    except MissingArtifactError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValidationError, DatasetFormatError, ConfigError, CheckpointError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except KeyboardInterrupt:
        print("\nInterrupted by user", file=sys.stderr)
        return 130
    except Exception as e:
        logger.debug("Stage failed", exc_info=True)
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        tracker.stop()
        tracker.print_summary()


if __name__ == "__main__":
    sys.exit(main())
