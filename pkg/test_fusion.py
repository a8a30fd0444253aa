#!/usr/bin/env python3
"""
Tests for expertness normalisation and weighted label fusion.
"""

import sys

import numpy as np
import torch

from dataset import Provenance, ValidationError, check_fused_label
from fixtures import random_sample, run_tests
from fusion import (ExpertnessLogits, fuse, fuse_tensor, majority_vote, normalize_expertness,
                    softmax_expertness, uniform_expertness)


def test_zero_logits_are_uniform():
    weights = normalize_expertness(ExpertnessLogits.zeros(4, 4, 2, 3)).weights
    assert np.allclose(weights, 1.0 / 3, atol=1e-12)


def test_softmax_is_on_simplex_for_extreme_logits():
    logits = np.random.default_rng(0).normal(scale=300.0, size=(5, 5, 2, 4))
    weights = normalize_expertness(logits).weights
    assert np.all(weights >= 0.0)
    assert np.abs(weights.sum(axis=-1) - 1.0).max() < 1e-12


def test_non_finite_logits_rejected():
    values = np.zeros((2, 2, 1, 2))
    values[0, 0, 0, 0] = np.inf
    try:
        normalize_expertness(values)
    except ValueError:
        pass
    else:
        raise AssertionError("infinite logit accepted")
    try:
        ExpertnessLogits(values)
    except ValueError:
        return
    raise AssertionError("infinite logit accepted by ExpertnessLogits")


def test_majority_vote_equals_uniform_fusion():
    masks = random_sample(n=4).masks
    vote = majority_vote(masks)
    uniform = fuse(masks, uniform_expertness(16, 16, 2, 4))
    assert np.array_equal(vote.values, uniform.values)
    assert vote.provenance == Provenance.MAJORITY_VOTE
    assert np.allclose(vote.values, masks.astype(np.float64).mean(axis=-1), atol=1e-6)


def test_fusion_stays_in_rater_hull():
    rng = np.random.default_rng(4)
    masks = random_sample(n=5, seed=4).masks
    for _ in range(5):
        expertness = normalize_expertness(rng.normal(scale=5.0, size=masks.shape))
        label = fuse(masks, expertness)
        assert check_fused_label(label, masks) == []


def test_one_hot_expertness_selects_rater():
    masks = random_sample(n=3, seed=7).masks
    logits = np.full(masks.shape, -50.0)
    logits[..., 2] = 50.0
    label = fuse(masks, normalize_expertness(logits))
    assert np.allclose(label.values, masks[..., 2], atol=1e-6)


def test_agreeing_raters_fuse_to_common_value():
    masks = np.repeat(random_sample(n=2, seed=2).masks[..., :1], 3, axis=-1)
    expertness = normalize_expertness(np.random.default_rng(2).normal(size=masks.shape))
    assert np.array_equal(fuse(masks, expertness).values, masks[..., 0])


def test_fuse_shape_mismatch():
    try:
        fuse(np.zeros((4, 4, 2, 3)), uniform_expertness(4, 4, 2, 2))
    except ValueError:
        return
    raise AssertionError("mismatched expertness accepted")


def test_majority_vote_needs_two_raters():
    try:
        majority_vote(np.zeros((4, 4, 1, 1)))
    except (ValueError, ValidationError):
        return
    raise AssertionError("single rater accepted")


def test_tensor_fusion_matches_numpy():
    masks = random_sample(n=3, seed=5).masks
    logits = np.random.default_rng(5).normal(size=masks.shape)
    expected = fuse(masks, normalize_expertness(logits)).values
    weights = softmax_expertness(torch.tensor(logits))
    fused = fuse_tensor(torch.tensor(masks, dtype=torch.float64), weights).numpy()
    assert np.allclose(fused, expected, atol=1e-6)


def test_tensor_fusion_gradient_vanishes_where_raters_agree():
    masks = torch.ones(3, 3, 1, 4) * 0.7
    logits = torch.randn(3, 3, 1, 4, dtype=torch.float64, requires_grad=True)
    fuse_tensor(masks.double(), softmax_expertness(logits)).sum().backward()
    assert torch.count_nonzero(logits.grad) == 0


def main():
    print("🧪 Fusion tests")
    print("=" * 60)
    return run_tests(globals())


if __name__ == '__main__':
    sys.exit(1 if main() else 0)
