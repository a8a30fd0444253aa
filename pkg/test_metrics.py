#!/usr/bin/env python3
"""
Tests for Dice, AUC, vCDR and the spectral smoothness measure.
"""

import itertools
import sys

import numpy as np

from fixtures import run_tests
from metrics import (MetricReport, UndefinedBiomarkerError, UndefinedMetricError, auc,
                     high_freq_energy, mean_high_freq_energy, rater_vcdrs, soft_dice, vcdr,
                     vertical_extent)


def _brute_force_auc(scores, labels):
    pairs = [(p, q) for p, q in itertools.product(range(len(scores)), repeat=2)
             if labels[p] == 1 and labels[q] == 0]
    wins = sum(1.0 if scores[p] > scores[q] else 0.5 if scores[p] == scores[q] else 0.0 for p, q in pairs)
    return wins / len(pairs)


def test_auc_known_value():
    assert abs(auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) - 0.75) < 1e-12


def test_auc_perfect_and_inverted():
    assert abs(auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) - 1.0) < 1e-12
    assert abs(auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1])) < 1e-12


def test_auc_ties_count_half():
    assert abs(auc([0.5, 0.5], [0, 1]) - 0.5) < 1e-12
    assert abs(auc([0.3, 0.5, 0.5, 0.7], [0, 0, 1, 1]) - 0.875) < 1e-12


def test_auc_matches_pair_count():
    rng = np.random.default_rng(0)
    for _ in range(100):
        size = int(rng.integers(2, 21))
        scores = np.round(rng.uniform(size=size), 1)
        labels = rng.integers(0, 2, size=size)
        labels[:2] = [0, 1]
        assert abs(auc(scores, labels) - _brute_force_auc(scores, labels)) < 1e-12


def test_auc_single_class_undefined():
    try:
        auc([0.1, 0.2], [1, 1])
    except UndefinedMetricError:
        return
    raise AssertionError("single-class AUC did not raise")


def test_auc_rejects_non_binary_labels():
    try:
        auc([0.1, 0.2, 0.3], [0, 1, 2])
    except ValueError:
        return
    raise AssertionError("label 2 accepted")


def test_dice_identity_and_disjoint():
    grid = np.zeros((8, 8))
    grid[2:5, 2:5] = 0.8
    assert soft_dice(grid, grid) == 1.0
    other = np.zeros((8, 8))
    other[6:, 6:] = 0.8
    assert soft_dice(grid, other, thresholds=(0.5,)) == 0.0


def test_dice_empty_threshold_counts_one():
    pred = np.full((4, 4), 0.2)
    gt = np.full((4, 4), 0.2)
    gt[0, 0] = 0.9
    # t=0.1: pred all, gt all -> 1; t=0.5: pred empty, gt one pixel -> 0; t=0.95: both empty -> 1
    assert abs(soft_dice(pred, gt, (0.1, 0.5, 0.95)) - 2.0 / 3.0) < 1e-12


def test_dice_matches_set_definition():
    rng = np.random.default_rng(1)
    for _ in range(100):
        h, w = rng.integers(1, 17, size=2)
        pred, gt = rng.uniform(size=(2, h, w))
        scores = []
        for t in (0.1, 0.3, 0.5, 0.7, 0.9):
            a = {tuple(p) for p in np.argwhere(pred > t)}
            b = {tuple(p) for p in np.argwhere(gt > t)}
            scores.append(1.0 if not a and not b else 2.0 * len(a & b) / (len(a) + len(b)))
        assert abs(soft_dice(pred, gt) - np.mean(scores)) < 1e-12


def test_dice_shape_mismatch():
    try:
        soft_dice(np.zeros((4, 4)), np.zeros((4, 5)))
    except ValueError:
        return
    raise AssertionError("shape mismatch accepted")


def test_vertical_extent():
    grid = np.zeros((10, 10))
    grid[3:7, 4] = 1.0
    assert vertical_extent(grid, 0.5) == 4
    assert vertical_extent(np.zeros((5, 5)), 0.5) == 0


def test_vcdr_ratio_and_empty_cup():
    disc = np.zeros((20, 20))
    disc[2:18, 5:15] = 1.0
    cup = np.zeros((20, 20))
    cup[6:14, 8:12] = 1.0
    assert vcdr(cup, disc) == 0.5
    assert vcdr(np.zeros((20, 20)), disc) == 0.0


def test_vcdr_cap():
    disc = np.zeros((20, 20))
    disc[9:11, :] = 1.0
    cup = np.ones((20, 20))
    assert vcdr(cup, disc) == 1.5


def test_vcdr_empty_disc():
    try:
        vcdr(np.ones((4, 4)), np.zeros((4, 4)))
    except UndefinedBiomarkerError:
        return
    raise AssertionError("empty disc did not raise")


def test_rater_vcdrs():
    masks = np.zeros((10, 10, 2, 2))
    masks[1:9, :, 0, :] = 1.0
    masks[3:7, :, 1, 0] = 1.0
    masks[1:9, :, 1, 1] = 1.0
    assert rater_vcdrs(masks) == [0.5, 1.0]


def test_high_freq_energy_constant_and_checkerboard():
    assert high_freq_energy(np.full((8, 8), 0.3), 0.25) == 0.0
    checker = np.indices((8, 8)).sum(axis=0) % 2
    assert abs(high_freq_energy(checker, 0.25) - 1.0) < 1e-12


def test_high_freq_energy_smooth_below_noise():
    yy, xx = np.mgrid[0:32, 0:32]
    smooth = np.sin(2 * np.pi * yy / 32) + np.cos(2 * np.pi * xx / 32)
    noise = np.random.default_rng(3).standard_normal((32, 32))
    assert high_freq_energy(smooth, 0.25) < 1e-9
    assert high_freq_energy(noise, 0.25) > 0.5


def test_high_freq_energy_rejects_small_grid():
    try:
        high_freq_energy(np.zeros((3, 8)), 0.25)
    except ValueError:
        return
    raise AssertionError("3-row grid accepted")


def test_mean_high_freq_energy_of_uniform_map():
    assert mean_high_freq_energy(np.full((8, 8, 2, 3), 1.0 / 3)) == 0.0


def test_metric_report_format():
    report = MetricReport(dice={'disc': 0.5}, auc=0.75, vcdrs=[0.4, 0.6], sample_count=2)
    assert report.to_text() == ("auc=0.750000\ndice.disc=0.500000\nsamples=2\n"
                                "vcdr.count=2\nvcdr.mean=0.500000\nvcdr.values=0.400000,0.600000\n")
    nested = {f"summary.{key}": value for key, value in report.to_dict().items()}
    nested['fusion.auc'] = '0.1'
    assert MetricReport.from_flat(nested, 'summary.') == report
    try:
        MetricReport(auc=1.5)
    except ValueError:
        return
    raise AssertionError("AUC above 1 accepted")


def main():
    print("🧪 Metric tests")
    print("=" * 60)
    return run_tests(globals())


if __name__ == '__main__':
    sys.exit(1 if main() else 0)
