#!/usr/bin/env python3
"""
Command-line tests: exit codes and a tiny end-to-end pipeline run.
"""

import json
import os
import sys
import tempfile

from config import ConfigError, load_config, parse_blocks
from evaluate import read_report
from fixtures import run_tests
from main import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main

TINY_CONFIG = {
    'version': 1,
    'seed': 0,
    'paths': {'dataset_dir': 'data', 'checkpoint_dir': 'checkpoints', 'report_dir': 'report'},
    'synth': {'train_count': 16, 'val_count': 0, 'test_count': 8, 'h': 32, 'w': 32,
              'disc_radius_range': [6.0, 9.0], 'center_jitter_px': 1.5},
    'diag': {'epochs': 2, 'batch_size': 8, 'learning_rate': 1e-3},
    'dfgt': {'method': 'raw', 'steps': 2},
    'seg': {'epochs': 1, 'batch_size': 8, 'connected_blocks': [1, 2]},
    'eval': {'methods': ['majority_vote', 'dfgt_raw'], 'generalization_seeds': []},
}


def _write_config(directory: str, data=None) -> str:
    path = os.path.join(directory, 'config.json')
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(TINY_CONFIG if data is None else data, f)
    return path


def _exit_code(argv) -> int:
    try:
        return main(argv)
    except SystemExit as e:
        return e.code


def test_usage_errors_exit_1():
    assert _exit_code([]) == EXIT_USAGE
    assert _exit_code(['fly', '--config', 'x.json']) == EXIT_USAGE
    assert _exit_code(['dfgt']) == EXIT_USAGE
    assert _exit_code(['dfgt', '--config', 'x.json', '--method', 'lbfgs']) == EXIT_USAGE


def test_invalid_config_exits_2():
    with tempfile.TemporaryDirectory() as tmp:
        assert _exit_code(['synth', '--config', os.path.join(tmp, 'missing.json'), '-q']) == EXIT_INVALID
        bad = dict(TINY_CONFIG, synth={**TINY_CONFIG['synth'], 'colour': 'red'})
        assert _exit_code(['synth', '--config', _write_config(tmp, bad), '-q']) == EXIT_INVALID
        assert _exit_code(['train', '--config', _write_config(tmp), '--blocks', 'B9', '-q']) == EXIT_INVALID


def test_missing_upstream_artifact_exits_3():
    with tempfile.TemporaryDirectory() as tmp:
        assert _exit_code(['dfgt', '--config', _write_config(tmp), '-q']) == EXIT_RUNTIME
        assert _exit_code(['report', '--config', _write_config(tmp), '-q']) == EXIT_RUNTIME


def test_config_paths_resolve_against_config_file():
    with tempfile.TemporaryDirectory() as tmp:
        config = load_config(_write_config(tmp))
        assert config.paths.dataset_dir == os.path.join(tmp, 'data')
        assert config.paths.dfgt_dir('raw') == os.path.join(tmp, 'checkpoints', 'dfgt_raw')
        assert config.seg.height == config.synth.h == 32
        assert config.dfgt.seed == config.seed


def test_block_parsing():
    assert parse_blocks('B1,B2,B3') == (1, 2, 3)
    assert parse_blocks('{2, 1}') == (1, 2)
    assert parse_blocks('none') == ()
    try:
        parse_blocks('B1,x')
    except ConfigError:
        return
    raise AssertionError("malformed block list accepted")


def test_labels_from_changed_dfgt_settings_exit_2():
    with tempfile.TemporaryDirectory() as tmp:
        config = _write_config(tmp)
        for command in ('synth', 'pretrain', 'dfgt'):
            assert _exit_code([command, '--config', config, '-q']) == EXIT_OK, command
        assert _exit_code(['train', '--config', config, '--seed', '7', '-q']) == EXIT_INVALID

        changed = dict(TINY_CONFIG, dfgt={**TINY_CONFIG['dfgt'], 'steps': 3})
        assert _exit_code(['train', '--config', _write_config(tmp, changed), '-q']) == EXIT_INVALID


def test_pipeline_end_to_end():
    with tempfile.TemporaryDirectory() as tmp:
        config = _write_config(tmp)
        for command in ('synth', 'pretrain', 'dfgt', 'train', 'eval'):
            assert _exit_code([command, '--config', config, '-q']) == EXIT_OK, command

        report = os.path.join(tmp, 'report', 'eval_report.txt')
        with open(report, encoding='utf-8') as f:
            first = f.read()
        values = read_report(report)
        assert 'fusion.majority_vote.auc' in values and 'fusion.dfgt_raw.auc' in values
        assert values['segmentation.bridges'] == 'B1+B2'
        assert float(values['dfgt_train.descent_fraction']) == 1.0
        assert values['summary.samples'] == '8'
        assert 'summary.dice.disc' in values and 'summary.auc' in values
        assert os.path.isfile(os.path.join(tmp, 'checkpoints', 'diagnet_history.json'))
        assert os.path.isfile(os.path.join(tmp, 'checkpoints', 'tgseg_history.json'))

        again = os.path.join(tmp, 'again.txt')
        assert _exit_code(['eval', '--config', config, '--out', again, '-q']) == EXIT_OK
        with open(again, encoding='utf-8') as f:
            assert f.read() == first

        assert _exit_code(['report', '--config', config, '-q']) == EXIT_OK
        assert os.path.isfile(os.path.join(tmp, 'report', 'fusion_auc.png'))
        assert os.path.isfile(os.path.join(tmp, 'report', 'loss_curves.png'))
        with open(os.path.join(tmp, 'report', 'summary.txt'), encoding='utf-8') as f:
            summary = f.read()
        assert 'samples=8\n' in summary and 'dice.cup=' in summary

        alternate = os.path.join(tmp, 'alt', 'net.pt')
        assert _exit_code(['pretrain', '--config', config, '--out', alternate, '-q']) == EXIT_OK
        assert os.path.isfile(os.path.join(tmp, 'alt', 'net_history.json'))


def main_tests():
    print("🧪 Command-line tests")
    print("=" * 60)
    return run_tests(globals())


if __name__ == '__main__':
    sys.exit(1 if main_tests() else 0)
