#!/usr/bin/env python3
"""
Tests for the evaluation harness and the report writers.
"""

import math
import os
import sys
import tempfile

import numpy as np

import diagnet
from dataset import Dataset, TrainHistory
from dfgt import DFGTHyper
from evaluate import (EvalConfig, compare_fusions, eval_against_raters, eval_diagnosis,
                      eval_generalization, eval_rater_diagnosis, eval_self_fusion,
                      majority_vote_labels, mean_vcdr, plot_fusion_auc, plot_histories,
                      read_report, render_report, summarize_segmentation, write_report)
from fixtures import identical_rater_sample, run_tests, small_splits, trained_diagnet
from metrics import MetricReport


def _test_split() -> Dataset:
    return small_splits()['test']


def test_rater_table_scores_a_rater_perfectly_against_itself():
    test = _test_split()
    preds = test.stack_masks()[..., 0]
    table = eval_against_raters(preds, test)
    assert table.shape == (test.K, test.n)
    assert np.all(table[:, 0] == 1.0)
    assert np.all((table >= 0.0) & (table <= 1.0))


def test_misaligned_predictions_rejected():
    test = _test_split()
    try:
        eval_against_raters(np.zeros((len(test) - 1, test.h, test.w, test.K)), test)
    except ValueError:
        return
    raise AssertionError("short prediction stack accepted")


def test_self_fusion_of_identical_stacks():
    labels = majority_vote_labels(_test_split())
    assert eval_self_fusion(labels, labels) == 1.0
    try:
        eval_self_fusion(labels, labels[:-1])
    except ValueError:
        return
    raise AssertionError("misaligned labels accepted")


def test_diagnosis_auc_in_range():
    test = _test_split()
    value = eval_diagnosis(majority_vote_labels(test), test, trained_diagnet())
    assert 0.0 <= value <= 1.0


def test_rater_diagnosis_keys():
    result = eval_rater_diagnosis(_test_split(), trained_diagnet())
    assert sorted(result) == ['no_mask', 'r0', 'r1', 'r2', 'r3']
    assert all(0.0 <= v <= 1.0 for v in result.values())


def test_compare_fusions_puts_majority_vote_first():
    test = _test_split()
    rows = compare_fusions(test, trained_diagnet(), methods=('dfgt_raw',), hyper=DFGTHyper(steps=3))
    assert [row.method for row in rows] == ['majority_vote', 'dfgt_raw']
    assert rows[0].dice_vs_mv == 1.0
    assert rows[1].fused.shape == (len(test), test.h, test.w, test.K)
    assert all(0.0 <= row.auc <= 1.0 for row in rows)


def test_compare_fusions_requires_frozen_net():
    try:
        compare_fusions(_test_split(), diagnet.build(diagnet.DiagConfig()), methods=())
    except ValueError:
        return
    raise AssertionError("unfrozen network accepted")


def test_identical_raters_tie_every_fusion():
    test = _test_split()
    agreeing = Dataset([identical_rater_sample(s) for s in test], 'test')
    rows = compare_fusions(agreeing, trained_diagnet(), methods=('dfgt_raw', 'dfgt_expg'),
                           hyper=DFGTHyper(steps=3))
    assert len({row.auc for row in rows}) == 1
    assert all(row.dice_vs_mv == 1.0 for row in rows)
    assert all(np.array_equal(row.fused, rows[0].fused) for row in rows)


def test_generalization_shape():
    test = _test_split()
    fused = {'majority_vote': majority_vote_labels(test)}
    result = eval_generalization(fused, test, [trained_diagnet(), trained_diagnet()])
    assert list(result) == ['majority_vote'] and len(result['majority_vote']) == 2
    assert result['majority_vote'][0] == result['majority_vote'][1]


def test_positive_cases_have_larger_fused_vcdr():
    test = _test_split()
    labels = majority_vote_labels(test)
    positive = mean_vcdr(labels, test, label=1)
    negative = mean_vcdr(labels, test, label=0)
    assert math.isfinite(positive) and positive > negative


def test_segmentation_summary_report():
    test = _test_split()
    targets = majority_vote_labels(test)
    summary = summarize_segmentation(targets, targets, test, trained_diagnet(), high_freq_fraction=math.nan)
    assert isinstance(summary, MetricReport)
    assert summary.sample_count == len(test)
    assert summary.dice == {'disc': 1.0, 'cup': 1.0}
    assert summary.auc == eval_diagnosis(targets, test, trained_diagnet())
    assert len(summary.vcdrs) == len(test)
    assert summary.high_freq_fraction is None
    flat = summary.to_dict()
    assert flat['samples'] == str(len(test)) and flat['dice.cup'] == '1.000000'
    assert MetricReport.from_flat({f"summary.{k}": v for k, v in flat.items()}, 'summary.').to_dict() == flat


def test_report_is_sorted_and_deterministic():
    sections = {'rater': {'disc.r1': 0.5, 'disc.r0': 0.25}, 'auc': {'majority_vote': 0.875}}
    header = {'seed': 3, 'config_hash': 'abc'}
    text = render_report(sections, header)
    assert text == render_report(sections, header)
    assert text.splitlines() == [
        "# DiFF desk evaluation report",
        "# aggregation=per-image mean",
        "# config_hash=abc",
        "# seed=3",
        "auc.majority_vote=0.875000",
        "rater.disc.r0=0.250000",
        "rater.disc.r1=0.500000",
    ]
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, 'report.txt')
        write_report(path, sections, header)
        assert read_report(path) == {'auc.majority_vote': '0.875000', 'rater.disc.r0': '0.250000',
                                     'rater.disc.r1': '0.500000'}


def test_plots_are_written():
    history = TrainHistory('pretrain')
    for loss in (0.7, 0.5, 0.4):
        history.record(loss)
    with tempfile.TemporaryDirectory() as tmp:
        bars = os.path.join(tmp, 'fusion_auc.png')
        curves = os.path.join(tmp, 'loss_curves.png')
        plot_fusion_auc({'majority_vote': 0.7, 'dfgt_expg': 0.8}, bars)
        plot_histories([history], curves)
        assert os.path.getsize(bars) > 0 and os.path.getsize(curves) > 0


def test_eval_config_validation():
    for config in (EvalConfig(thresholds=()), EvalConfig(thresholds=(0.0, 0.5)),
                   EvalConfig(methods=('staple',))):
        try:
            config.validate()
        except ValueError:
            continue
        raise AssertionError(f"invalid eval config accepted: {config}")
    assert EvalConfig.from_dict(EvalConfig().to_dict()) == EvalConfig()


def main():
    print("🧪 Evaluation harness tests")
    print("=" * 60)
    return run_tests(globals())


if __name__ == '__main__':
    sys.exit(1 if main() else 0)
