#!/usr/bin/env python3
"""
Tests for the multi-rater data types and the on-disk dataset format.
"""

import json
import os
import sys
import tempfile

import numpy as np
from PIL import Image

from dataset import (DatasetFormatError, Dataset, ExpertnessMap, FusedLabel, MultiRaterSample,
                     Provenance, TrainHistory, ValidationError, check_fused_label, load_dataset,
                     load_splits, quantize16, read_mask_png, save_dataset, save_splits,
                     validate_sample, write_mask_png)
from fixtures import random_sample, run_tests, small_spec, small_splits
from synthgen import generate_dataset


def test_valid_sample_has_no_violations():
    assert validate_sample(random_sample()) == []


def test_sample_violations_are_reported():
    rng = np.random.default_rng(1)
    masks = rng.uniform(size=(8, 8, 2, 3))
    masks[0, 0, 0, 0] = 1.5
    sample = MultiRaterSample('bad', rng.uniform(size=(8, 8)), masks, 2)
    violations = validate_sample(sample)
    assert any(v.startswith('label') for v in violations)
    assert any(v.startswith('masks: values') for v in violations)


def test_single_rater_rejected():
    sample = MultiRaterSample('one', np.zeros((4, 4, 1)), np.zeros((4, 4, 2, 1)), 0)
    assert any('n must be >= 2' in v for v in validate_sample(sample))


def test_dataset_rejects_mixed_dimensions():
    try:
        Dataset([random_sample('a'), random_sample('b', n=4)], 'train')
    except ValidationError as e:
        assert 'sample b' in str(e)
    else:
        raise AssertionError("mixed rater counts accepted")


def test_dataset_rejects_duplicate_ids():
    try:
        Dataset([random_sample('a'), random_sample('a', seed=3)], 'train')
    except ValidationError:
        return
    raise AssertionError("duplicate ids accepted")


def test_expertness_map_checks_simplex():
    weights = np.full((4, 4, 2, 3), 1.0 / 3)
    assert np.allclose(ExpertnessMap(weights).rater_means(), 1.0 / 3)
    weights[0, 0, 0, 0] = 0.5
    try:
        ExpertnessMap(weights)
    except ValidationError:
        return
    raise AssertionError("weights off the simplex accepted")


def test_fused_label_bounds():
    masks = np.stack([np.zeros((4, 4, 1)), np.full((4, 4, 1), 0.5)], axis=-1)
    assert check_fused_label(FusedLabel(np.full((4, 4, 1), 0.25), Provenance.DFGT_RAW), masks) == []
    violations = check_fused_label(FusedLabel(np.full((4, 4, 1), 0.75), Provenance.DFGT_RAW), masks)
    assert len(violations) == 1 and 'above' in violations[0]
    try:
        FusedLabel(np.full((4, 4, 1), 1.2), Provenance.MAJORITY_VOTE)
    except ValidationError:
        return
    raise AssertionError("fused label outside [0, 1] accepted")


def test_mask_png_round_trip_is_exact_on_grid():
    values = quantize16(np.random.default_rng(2).uniform(size=(9, 7)))
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, 'mask.png')
        write_mask_png(values, path)
        assert np.array_equal(read_mask_png(path), values)


def test_mask_png_rejects_8bit():
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, 'mask.png')
        Image.fromarray(np.zeros((4, 4), dtype=np.uint8)).save(path)
        try:
            read_mask_png(path)
        except DatasetFormatError:
            return
    raise AssertionError("8-bit mask accepted")


def test_dataset_round_trip():
    train = small_splits()['train']
    with tempfile.TemporaryDirectory() as tmp:
        save_dataset(train, tmp)
        loaded = load_dataset(tmp)
    assert loaded.equals(train)
    assert loaded.ids == train.ids
    assert np.array_equal(loaded.labels, train.labels)


def test_splits_round_trip():
    splits = small_splits()
    with tempfile.TemporaryDirectory() as tmp:
        save_splits(splits, tmp)
        loaded = load_splits(tmp)
    assert sorted(loaded) == sorted(splits)
    assert all(loaded[name].equals(splits[name]) for name in splits)


def _tree_bytes(root: str):
    files = {}
    for folder, _, names in os.walk(root):
        for name in names:
            path = os.path.join(folder, name)
            with open(path, 'rb') as f:
                files[os.path.relpath(path, root)] = f.read()
    return files


def test_regenerated_splits_are_byte_identical():
    with tempfile.TemporaryDirectory() as tmp:
        first, second = os.path.join(tmp, 'a'), os.path.join(tmp, 'b')
        save_splits(generate_dataset(small_spec(seed=6, train=4, test=2)), first)
        save_splits(generate_dataset(small_spec(seed=6, train=4, test=2)), second)
        files = _tree_bytes(first)
        assert 'train/manifest.json' in files
        assert files == _tree_bytes(second)
        save_splits(load_splits(first), second)
        assert files == _tree_bytes(second)


def test_missing_manifest():
    with tempfile.TemporaryDirectory() as tmp:
        try:
            load_dataset(tmp)
        except DatasetFormatError as e:
            assert 'manifest.json' in str(e)
            return
    raise AssertionError("missing manifest not detected")


def test_wrong_mask_size_names_sample():
    dataset = Dataset([random_sample('a'), random_sample('b', seed=5)], 'val')
    with tempfile.TemporaryDirectory() as tmp:
        save_dataset(dataset, tmp)
        with open(os.path.join(tmp, 'manifest.json'), encoding='utf-8') as f:
            manifest = json.load(f)
        for k in range(2):
            for name in manifest['samples'][1]['masks'][k]:
                write_mask_png(np.zeros((10, 10)), os.path.join(tmp, name))
        try:
            load_dataset(tmp)
        except ValidationError as e:
            assert 'sample b' in str(e)
            return
    raise AssertionError("mask size mismatch not detected")


def test_train_history_round_trip():
    history = TrainHistory('pretrain')
    history.record(0.7)
    history.record(0.4, {'accuracy': 0.8})
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, 'history.json')
        history.save(path)
        loaded = TrainHistory.load(path)
    assert loaded.stage == 'pretrain'
    assert loaded.losses == [0.7, 0.4]
    assert loaded.records[1].metrics == {'accuracy': 0.8}


def test_train_history_rejects_gaps():
    try:
        TrainHistory.from_dict({'stage': 'x', 'records': [{'epoch': 2, 'loss': 1.0}]})
    except ValidationError:
        return
    raise AssertionError("epoch gap accepted")


def main():
    print("🧪 Dataset format tests")
    print("=" * 60)
    return run_tests(globals())


if __name__ == '__main__':
    sys.exit(1 if main() else 0)
