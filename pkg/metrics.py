"""
Segmentation and Diagnosis Metrics

Soft Dice over binarization thresholds, ROC AUC, the vertical
cup-to-disc ratio biomarker and the spectral high-frequency energy fraction
used to judge how smooth an expertness map is.

Author: DiFF Desk Toolkit
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from sklearn.metrics import roc_auc_score

from utils import DEFAULT_THRESHOLDS

VCDR_REPORT_CAP = 1.5


class UndefinedMetricError(ValueError):
    """Raised when a metric is undefined for the given input."""


class UndefinedBiomarkerError(UndefinedMetricError):
    """Raised when vCDR is requested for an empty disc."""


def _dice(a: np.ndarray, b: np.ndarray) -> float:
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def soft_dice(pred, gt, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> float:
    """
    Dice averaged over binarizations of prediction and soft ground truth.

    A value strictly greater than the threshold is foreground. A threshold
    at which both binarized sets are empty contributes 1.0.

    Args:
        pred: Predicted probability grid
        gt: Soft ground truth grid of the same shape
        thresholds: Binarization levels in (0, 1)

    Returns:
        Mean Dice over thresholds, in [0, 1]
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"soft_dice: shape mismatch {pred.shape} vs {gt.shape}")
    if not thresholds:
        raise ValueError("soft_dice: at least one threshold required")

    scores = [_dice(pred > t, gt > t) for t in thresholds]
    return float(np.mean(scores))


def auc(scores, labels) -> float:
    """
    Area under the ROC curve of scores against binary labels.

    Tied scores across classes count half, as in the Mann-Whitney statistic.

    Raises:
        UndefinedMetricError: If only one class is present
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"auc: {scores.size} scores for {labels.size} labels")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("auc: labels must be 0 or 1")
    if np.unique(labels).size < 2:
        raise UndefinedMetricError("auc: both classes must be present")
    return float(roc_auc_score(labels.astype(np.int64), scores))


def vertical_extent(grid, threshold: float) -> int:
    """Number of rows spanned by foreground (value > threshold), 0 if empty."""
    rows = np.flatnonzero((np.asarray(grid) > threshold).any(axis=1))
    if rows.size == 0:
        return 0
    return int(rows[-1] - rows[0] + 1)


def vcdr(cup, disc, binarize_threshold: float = 0.5) -> float:
    """
    Vertical cup-to-disc ratio.

    Args:
        cup: Cup probability grid
        disc: Disc probability grid of the same shape
        binarize_threshold: Foreground threshold

    Returns:
        Ratio of vertical extents, 0 for an empty cup, capped at 1.5

    Raises:
        UndefinedBiomarkerError: If the binarized disc is empty
    """
    cup = np.asarray(cup)
    disc = np.asarray(disc)
    if cup.shape != disc.shape:
        raise ValueError(f"vcdr: shape mismatch {cup.shape} vs {disc.shape}")

    disc_extent = vertical_extent(disc, binarize_threshold)
    if disc_extent == 0:
        raise UndefinedBiomarkerError("vcdr: disc is empty")
    ratio = vertical_extent(cup, binarize_threshold) / disc_extent
    return float(min(ratio, VCDR_REPORT_CAP))


def rater_vcdrs(masks, threshold: float = 0.5, disc: int = 0, cup: int = 1) -> List[float]:
    """vCDR of every rater of one h x w x K x n mask grid."""
    masks = np.asarray(masks)
    return [vcdr(masks[:, :, cup, r], masks[:, :, disc, r], threshold) for r in range(masks.shape[3])]


def high_freq_energy(grid, cutoff_fraction: float) -> float:
    """
    Fraction of spectral energy above a radial frequency cutoff.

    The mean-subtracted grid is transformed with a 2-D DFT; radial
    frequencies are measured in units of the Nyquist frequency.

    Args:
        grid: h x w grid, h and w >= 4
        cutoff_fraction: Cutoff as a fraction of Nyquist, in (0, 1)

    Returns:
        Energy fraction in [0, 1]; 0 for a constant grid
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2 or min(grid.shape) < 4:
        raise ValueError(f"high_freq_energy: need an h x w grid with h, w >= 4, got {grid.shape}")
    if not 0.0 < cutoff_fraction < 1.0:
        raise ValueError(f"high_freq_energy: cutoff_fraction must lie in (0, 1), got {cutoff_fraction}")

    spectrum = np.fft.fft2(grid - grid.mean())
    energy = np.abs(spectrum) ** 2
    total = energy.sum()
    if total <= 0.0:
        return 0.0

    fy = np.fft.fftfreq(grid.shape[0])[:, None]
    fx = np.fft.fftfreq(grid.shape[1])[None, :]
    radius = np.sqrt(fy ** 2 + fx ** 2) / 0.5
    return float(min(1.0, energy[radius > cutoff_fraction].sum() / total))


def mean_high_freq_energy(weights, cutoff_fraction: float = 0.25) -> float:
    """Mean high_freq_energy over every (structure, rater) plane of an h x w x K x n map."""
    weights = np.asarray(weights)
    values = [high_freq_energy(weights[:, :, k, r], cutoff_fraction)
              for k in range(weights.shape[2]) for r in range(weights.shape[3])]
    return float(np.mean(values))


@dataclass
class MetricReport:
    """Summary of one evaluation run."""
    dice: Dict[str, float] = field(default_factory=dict)
    auc: Optional[float] = None
    vcdrs: Optional[List[float]] = None
    high_freq_fraction: Optional[float] = None
    sample_count: int = 0

    def __post_init__(self):
        for name, value in self.dice.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"MetricReport: dice[{name}]={value} outside [0, 1]")
        if self.auc is not None and not 0.0 <= self.auc <= 1.0:
            raise ValueError(f"MetricReport: auc={self.auc} outside [0, 1]")

    def to_dict(self) -> Dict[str, str]:
        flat = {'samples': str(self.sample_count)}
        for name, value in self.dice.items():
            flat[f"dice.{name}"] = f"{value:.6f}"
        if self.auc is not None:
            flat['auc'] = f"{self.auc:.6f}"
        if self.vcdrs is not None:
            flat['vcdr.mean'] = f"{np.mean(self.vcdrs):.6f}" if self.vcdrs else 'nan'
            flat['vcdr.count'] = str(len(self.vcdrs))
            flat['vcdr.values'] = ','.join(f"{v:.6f}" for v in self.vcdrs)
        if self.high_freq_fraction is not None:
            flat['high_freq_fraction'] = f"{self.high_freq_fraction:.6f}"
        return flat

    @classmethod
    def from_flat(cls, values: Dict[str, str], prefix: str = '') -> 'MetricReport':
        """Rebuild a report from `to_dict` lines, optionally nested under `prefix`."""
        own = {key[len(prefix):]: value for key, value in values.items() if key.startswith(prefix)}
        if 'samples' not in own:
            raise ValueError(f"MetricReport: no '{prefix}samples' entry")
        vcdrs = None
        if 'vcdr.count' in own:
            text = own.get('vcdr.values', '')
            vcdrs = [float(v) for v in text.split(',')] if text else []
        return cls(dice={key[len('dice.'):]: float(value) for key, value in own.items()
                         if key.startswith('dice.')},
                   auc=float(own['auc']) if 'auc' in own else None,
                   vcdrs=vcdrs,
                   high_freq_fraction=(float(own['high_freq_fraction'])
                                       if 'high_freq_fraction' in own else None),
                   sample_count=int(own['samples']))

    def to_text(self) -> str:
        return ''.join(f"{key}={value}\n" for key, value in sorted(self.to_dict().items()))

    def write(self, path: str):
        with open(path, 'w', encoding='utf-8') as f:
            f.write(self.to_text())
