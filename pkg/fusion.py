"""
Label Fusion Algebra

Softmax normalisation of expertness logits, weighted fusion of rater masks
and the majority-vote baseline. Numpy functions produce the domain types;
the torch counterparts carry gradients for the expertness optimizers.

Both paths compute the convex combination in reference-offset form,
s_1 + sum_i m_i * (s_i - s_1), so pixels where all raters agree fuse to
their common value whatever the weights are.

Author: DiFF Desk Toolkit
"""

from dataclasses import dataclass

import numpy as np
import torch

from dataset import ExpertnessMap, FusedLabel, Provenance


@dataclass(frozen=True, eq=False)
class ExpertnessLogits:
    """Unconstrained pre-softmax expertness (h x w x K x n)."""
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 4:
            raise ValueError(f"expertness logits: expected h x w x K x n grid, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("expertness logits: non-finite values")
        values.flags.writeable = False
        object.__setattr__(self, 'values', values)

    @classmethod
    def zeros(cls, h: int, w: int, K: int, n: int) -> 'ExpertnessLogits':
        return cls(np.zeros((h, w, K, n)))


def normalize_expertness(logits) -> ExpertnessMap:
    """
    Softmax over the rater axis at every (pixel, structure).

    Args:
        logits: ExpertnessLogits or an h x w x K x n array

    Returns:
        ExpertnessMap

    Raises:
        ValueError: If any logit is non-finite
    """
    values = logits.values if isinstance(logits, ExpertnessLogits) else np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("normalize_expertness: non-finite logits")
    shifted = values - values.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return ExpertnessMap(exp / exp.sum(axis=-1, keepdims=True))


def uniform_expertness(h: int, w: int, K: int, n: int) -> ExpertnessMap:
    """Every rater weighted 1/n everywhere."""
    return ExpertnessMap(np.full((h, w, K, n), 1.0 / n))


def fuse(masks, expertness: ExpertnessMap,
         provenance: Provenance = Provenance.DFGT_RAW) -> FusedLabel:
    """
    Weighted fusion s (.) m of rater masks.

    Args:
        masks: h x w x K x n rater masks
        expertness: Matching ExpertnessMap
        provenance: Provenance recorded on the result

    Returns:
        FusedLabel bounded pixelwise by the rater minimum and maximum
    """
    masks = np.asarray(masks, dtype=np.float64)
    weights = expertness.weights
    if masks.shape != weights.shape:
        raise ValueError(f"fuse: masks {masks.shape} and expertness {weights.shape} differ in shape")

    reference = masks[..., 0]
    values = reference + ((masks - reference[..., None]) * weights).sum(axis=-1)
    values = np.clip(values, masks.min(axis=-1), masks.max(axis=-1))
    return FusedLabel(values, provenance)


def majority_vote(masks) -> FusedLabel:
    """Pixelwise mean over raters."""
    masks = np.asarray(masks)
    if masks.ndim != 4 or masks.shape[3] < 2:
        raise ValueError(f"majority_vote: need h x w x K x n masks with n >= 2, got {masks.shape}")
    h, w, K, n = masks.shape
    return fuse(masks, uniform_expertness(h, w, K, n), Provenance.MAJORITY_VOTE)


def softmax_expertness(logits: torch.Tensor) -> torch.Tensor:
    """Torch softmax over the trailing rater axis."""
    return torch.softmax(logits, dim=-1)


def fuse_tensor(masks: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """
    Differentiable fusion over the trailing rater axis.

    Args:
        masks: (..., n) rater masks
        weights: (..., n) expertness, rows summing to 1

    Returns:
        (...) fused values
    """
    reference = masks[..., :1]
    return reference[..., 0] + ((masks - reference) * weights).sum(dim=-1)
