#!/usr/bin/env python3
"""
Tests for diagnosis-first ground truth construction.
"""

import json
import math
import os
import sys
import tempfile

import numpy as np
import torch
from pubsub import pub

import dfgt
import diagnet
from dataset import DatasetFormatError, check_fused_label
from dfgt import (DFGT_MANIFEST, DFGTHyper, ExpertnessGenerator, OptimizationAborted, StaleLabelsError,
                  build_dfgt, coordinate_grid, load_dfgt, logits_to_spectrum, optimize_expg,
                  optimize_fourier, optimize_raw, optimize_transrob, save_dfgt, spectrum_to_logits)
from evaluate import mean_vcdr
from fixtures import identical_rater_sample, run_tests, small_splits, trained_diagnet
from fusion import fuse, majority_vote
from metrics import auc, mean_high_freq_energy


def _sample(index: int = 0):
    return small_splits()['train'][index]


def _bce(net, sample, fused_values) -> float:
    with torch.no_grad():
        loss = diagnet.diagnosis_loss(net, diagnet.images_to_tensor(sample.image),
                                      diagnet.images_to_tensor(fused_values),
                                      torch.tensor([float(sample.label)]))
    return float(loss)


def test_invalid_hyper_rejected():
    for hyper in (DFGTHyper(steps=0), DFGTHyper(method='lbfgs'), DFGTHyper(step_size=0.0),
                  DFGTHyper(scale_range=(1.1, 1.0))):
        try:
            optimize_raw(trained_diagnet(), _sample(), hyper)
        except ValueError:
            continue
        raise AssertionError(f"invalid hyper accepted: {hyper}")


def test_unfrozen_net_rejected():
    net = diagnet.build(diagnet.DiagConfig())
    try:
        optimize_raw(net, _sample(), DFGTHyper(steps=1))
    except ValueError:
        return
    raise AssertionError("unfrozen network accepted")


def test_identical_raters_stay_uniform():
    sample = identical_rater_sample(_sample(1))
    for method in ('raw', 'transrob', 'fourier', 'expg'):
        weights, trace = dfgt.OPTIMIZERS[method](trained_diagnet(), sample, DFGTHyper(steps=10, method=method))
        assert np.abs(weights.weights - 0.25).max() < 1e-4, method
        assert max(trace) - min(trace) < 1e-6, method


def test_raw_descends_from_uniform():
    net = trained_diagnet()
    strict = 0
    for index in range(3):
        sample = _sample(index)
        weights, trace = optimize_raw(net, sample, DFGTHyper(steps=20))
        assert len(trace) == 21
        assert min(trace) <= trace[0]
        strict += min(trace) < trace[0]
        assert np.abs(weights.weights.sum(axis=-1) - 1.0).max() < 1e-9
        assert abs(_bce(net, sample, fuse(sample.masks, weights).values) - min(trace)) < 1e-3
    assert strict > 0


def test_first_trace_entry_is_uniform_loss():
    net = trained_diagnet()
    sample = _sample(2)
    expected = _bce(net, sample, majority_vote(sample.masks).values)
    for method in ('raw', 'fourier', 'expg'):
        _, trace = dfgt.OPTIMIZERS[method](net, sample, DFGTHyper(steps=2, method=method))
        assert abs(trace[0] - expected) < 1e-4, method


def test_transrob_without_transforms_equals_raw():
    net = trained_diagnet()
    sample = _sample(3)
    hyper = DFGTHyper(steps=8, rotation_deg=0.0, scale_range=(1.0, 1.0), translate_px=0.0)
    raw, raw_trace = optimize_raw(net, sample, hyper)
    robust, robust_trace = optimize_transrob(net, sample, hyper)
    assert np.array_equal(raw.weights, robust.weights)
    assert raw_trace == robust_trace


def test_transrob_is_reproducible():
    net = trained_diagnet()
    sample = _sample(4)
    hyper = DFGTHyper(steps=8, method='transrob', seed=3)
    first, trace = optimize_transrob(net, sample, hyper)
    second, _ = optimize_transrob(net, sample, hyper)
    assert np.array_equal(first.weights, second.weights)
    assert min(trace) <= trace[0]


def test_zero_spectrum_is_zero_logits():
    spectrum = torch.zeros((6, 8, 5, 2), dtype=torch.float64)
    for decay in (False, True):
        assert torch.count_nonzero(spectrum_to_logits(spectrum, 8, 8, 2, 3, decay)) == 0


def test_logits_survive_spectrum_round_trip():
    logits = torch.randn(12, 10, 2, 3, dtype=torch.float64)
    for decay in (False, True):
        back = spectrum_to_logits(logits_to_spectrum(logits, decay), 12, 10, 2, 3, decay)
        assert torch.allclose(back, logits, atol=1e-6)


def test_expg_starts_uniform_and_is_deterministic():
    generator = ExpertnessGenerator(2, 4)
    assert torch.count_nonzero(generator(coordinate_grid(8, 8))) == 0

    net = trained_diagnet()
    sample = _sample(5)
    hyper = DFGTHyper(steps=6, method='expg')
    first, _, trace = optimize_expg(net, sample, hyper)
    second, _, _ = optimize_expg(net, sample, hyper)
    assert np.array_equal(first.weights, second.weights)
    assert min(trace) <= trace[0]


def test_expg_is_smoother_than_raw():
    net = trained_diagnet()
    sample = _sample(6)
    raw, _ = optimize_raw(net, sample, DFGTHyper(steps=30))
    generated, _, _ = optimize_expg(net, sample, DFGTHyper(steps=30, method='expg'))
    assert mean_high_freq_energy(generated.weights) < mean_high_freq_energy(raw.weights)


def test_spectral_decay_smooths_fourier_maps():
    net = trained_diagnet()
    sample = _sample(7)
    flat, _ = optimize_fourier(net, sample, DFGTHyper(steps=30, method='fourier'))
    decayed, _ = optimize_fourier(net, sample, DFGTHyper(steps=30, method='fourier', fourier_decay=True))
    assert mean_high_freq_energy(decayed.weights) < mean_high_freq_energy(flat.weights)


def test_build_dfgt_labels_and_events():
    train = small_splits()['train'].select(range(3))
    events = []

    def listener(stage, sample_id, index, total, initial_loss, final_loss, failed):
        events.append((stage, sample_id, index, total, failed))

    pub.subscribe(listener, 'sample_optimized')
    try:
        result = build_dfgt(trained_diagnet(), train, DFGTHyper(steps=5, method='raw'))
    finally:
        pub.unsubscribe(listener, 'sample_optimized')

    assert result.ids == train.ids
    result.check_alignment(train)
    assert result.descent_fraction() == 1.0
    assert result.rater_mean_expertness().shape == (3, 4)
    for sample in train:
        assert check_fused_label(result.label(sample.sample_id), sample.masks) == []
    assert [e[2] for e in events] == [1, 2, 3]
    assert all(e[0] == 'dfgt' and e[3] == 3 and not e[4] for e in events)


def test_dfgt_round_trip_is_exact():
    train = small_splits()['train'].select(range(2))
    result = build_dfgt(trained_diagnet(), train, DFGTHyper(steps=3, method='fourier'))
    with tempfile.TemporaryDirectory() as tmp:
        save_dfgt(result, tmp)
        loaded = load_dfgt(tmp)
    assert loaded.method == 'fourier' and loaded.hyper == result.hyper
    assert loaded.ids == result.ids
    assert np.array_equal(loaded.stack_labels(), result.stack_labels())
    assert loaded.final_losses == result.final_losses
    assert loaded.source_hash == result.source_hash
    assert loaded.smoothness == result.smoothness and len(loaded.smoothness) == 2


def test_failed_sample_keeps_majority_vote():
    train = small_splits()['train'].select(range(3))
    doomed = train.ids[1]
    original = dfgt.OPTIMIZERS['raw']

    def flaky(net, sample, hyper):
        if sample.sample_id == doomed:
            raise OptimizationAborted(sample.sample_id, 2)
        return original(net, sample, hyper)

    dfgt.OPTIMIZERS['raw'] = flaky
    try:
        result = build_dfgt(trained_diagnet(), train, DFGTHyper(steps=3))
    finally:
        dfgt.OPTIMIZERS['raw'] = original

    assert result.failed == [doomed]
    assert np.abs(result.label(doomed).values - majority_vote(train[1].masks).values).max() <= 1.0 / 65535
    assert math.isnan(result.initial_losses[doomed])
    assert result.rater_mean_expertness().shape == (2, 4)
    with tempfile.TemporaryDirectory() as tmp:
        save_dfgt(result, tmp)
        loaded = load_dfgt(tmp)
    assert loaded.failed == [doomed] and math.isnan(loaded.final_losses[doomed])
    assert np.array_equal(loaded.label(doomed).values, result.label(doomed).values)


def test_shared_generator_keeps_best_iterate_per_sample():
    train = small_splits()['train'].select(range(4))
    result = build_dfgt(trained_diagnet(), train, DFGTHyper(steps=6, method='expg', expg_shared=True))
    assert len(result) == 4 and not result.failed
    assert result.descent_fraction() == 1.0


def test_shared_generator_drops_only_the_nan_sample():
    train = small_splits()['train'].select(range(4))
    doomed = train.ids[2]
    target = float(train[2].image.sum())
    original = dfgt.diagnosis_loss

    def nan_for_doomed(net, images, masks, labels, reduction='mean'):
        losses = original(net, images, masks, labels, reduction=reduction)
        if reduction != 'none':
            return losses
        sums = images.flatten(1).sum(dim=1).double()
        hit = (sums - target).abs() <= 1e-4 * abs(target)
        return torch.where(hit, torch.full_like(losses, math.nan), losses)

    dfgt.diagnosis_loss = nan_for_doomed
    try:
        result = build_dfgt(trained_diagnet(), train, DFGTHyper(steps=6, method='expg', expg_shared=True))
    finally:
        dfgt.diagnosis_loss = original

    assert result.failed == [doomed]
    assert len(result) == 4
    assert result.descent_fraction() == 1.0
    assert result.label(doomed).provenance.value == 'majority_vote'
    for sample in train:
        if sample.sample_id != doomed:
            assert math.isfinite(result.final_losses[sample.sample_id])
            assert result.label(sample.sample_id).provenance == result.hyper.provenance


def test_labels_from_other_settings_are_stale():
    train = small_splits()['train'].select(range(2))
    hyper = DFGTHyper(steps=2)
    result = build_dfgt(trained_diagnet(), train, hyper)
    result.check_source(train, hyper)
    for dataset, other in ((train, DFGTHyper(steps=3)),
                           (small_splits()['train'].select(range(1, 3)), hyper)):
        try:
            result.check_source(dataset, other)
        except StaleLabelsError:
            continue
        raise AssertionError("stale DF-GT labels accepted")
    assert issubclass(StaleLabelsError, DatasetFormatError)


def test_tampered_hyper_snapshot_rejected():
    train = small_splits()['train'].select(range(1))
    result = build_dfgt(trained_diagnet(), train, DFGTHyper(steps=1))
    with tempfile.TemporaryDirectory() as tmp:
        save_dfgt(result, tmp)
        manifest_path = os.path.join(tmp, DFGT_MANIFEST)
        with open(manifest_path, 'r', encoding='utf-8') as f:
            manifest = json.load(f)
        manifest['hyper']['steps'] = 99
        with open(manifest_path, 'w', encoding='utf-8') as f:
            json.dump(manifest, f)
        try:
            load_dfgt(tmp)
        except DatasetFormatError:
            return
    raise AssertionError("edited hyper snapshot accepted")


def test_smoothness_ordering_over_twenty_samples():
    net = trained_diagnet()
    train = small_splits()['train'].select(range(20))
    energy = {}
    for method, extra in (('raw', {}), ('transrob', {}), ('fourier', {'fourier_decay': True}), ('expg', {})):
        hyper = DFGTHyper(steps=30, method=method, **extra)
        maps = [dfgt.OPTIMIZERS[method](net, sample, hyper)[0] for sample in train]
        energy[method] = float(np.mean([mean_high_freq_energy(m.weights) for m in maps]))
    assert energy['expg'] <= 0.5 * energy['raw'], energy
    assert energy['transrob'] <= energy['raw'], energy
    assert energy['fourier'] <= energy['raw'], energy


def test_expg_labels_beat_majority_vote():
    net = trained_diagnet()
    test = small_splits()['test']
    result = build_dfgt(net, test, DFGTHyper(steps=30, method='expg'))
    assert result.descent_fraction() >= 0.9

    images = test.stack_images()
    mv = np.stack([majority_vote(s.masks).values for s in test])
    optimized = np.stack([fuse(s.masks, result.expertness[s.sample_id]).values for s in test])
    mv_auc = auc(diagnet.predict_batch(net, images, mv), test.labels)
    expg_auc = auc(diagnet.predict_batch(net, images, optimized), test.labels)
    assert expg_auc >= mv_auc, (expg_auc, mv_auc)

    assert mean_vcdr(result.stack_labels(test.ids), test) >= mean_vcdr(mv, test)

    positives = [i for i, s in enumerate(test) if s.label == 1]
    informed = result.rater_mean_expertness()[positives, test.n - 1].mean()
    assert informed > 1.0 / test.n


def test_check_alignment_rejects_other_split():
    train = small_splits()['train'].select(range(2))
    result = build_dfgt(trained_diagnet(), train, DFGTHyper(steps=1))
    try:
        result.check_alignment(small_splits()['test'])
    except ValueError:
        return
    raise AssertionError("misaligned DF-GT accepted")


def main():
    print("🧪 DF-GT optimizer tests")
    print("=" * 60)
    return run_tests(globals())


if __name__ == '__main__':
    sys.exit(1 if main() else 0)
