"""
Evaluation Harness

Per-rater and self-fusion soft Dice of predicted maps, diagnosis AUC of
masks through a frozen diagnosis network, fusion-strategy comparison and
the report/plot writers. Every Dice figure is a per-image soft Dice
averaged over images.

Author: DiFF Desk Toolkit
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np

from dataset import Dataset, TrainHistory
from dfgt import DFGTDataset, DFGTHyper, build_dfgt
from diagnet import DiagnosisNet, predict_batch
from fusion import majority_vote
from metrics import MetricReport, UndefinedBiomarkerError, auc, soft_dice, vcdr
from synthgen import CUP, DISC, STRUCTURES
from utils import DEFAULT_THRESHOLDS, FUSION_METHODS

AGGREGATION = 'per-image mean'

logger = logging.getLogger("Evaluator")


@dataclass
class EvalConfig:
    """What to score and how."""
    split: str = 'test'
    thresholds: Tuple[float, ...] = DEFAULT_THRESHOLDS
    methods: Tuple[str, ...] = FUSION_METHODS
    generalization_seeds: Tuple[int, ...] = (1, 2)
    seed: int = 0

    def validate(self):
        if not self.thresholds:
            raise ValueError("eval: thresholds must be nonempty")
        for t in self.thresholds:
            if not 0.0 < t < 1.0:
                raise ValueError(f"eval: threshold {t} outside (0, 1)")
        unknown = [m for m in self.methods if m not in FUSION_METHODS]
        if unknown:
            raise ValueError(f"eval: unknown fusion methods {unknown}")

    def to_dict(self) -> Dict:
        data = asdict(self)
        for key in ('thresholds', 'methods', 'generalization_seeds'):
            data[key] = list(data[key])
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'EvalConfig':
        data = dict(data)
        for key in ('thresholds', 'methods', 'generalization_seeds'):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass
class FusionRow:
    """One fusion strategy scored through the frozen diagnosis network."""
    method: str
    auc: float
    dice_vs_mv: float
    fused: Optional[np.ndarray] = field(default=None, repr=False)


def _check_aligned(preds: np.ndarray, dataset: Dataset):
    preds = np.asarray(preds)
    expected = (len(dataset), dataset.h, dataset.w, dataset.K)
    if preds.shape != expected:
        raise ValueError(f"predictions {preds.shape} are not aligned with dataset {expected}")


def eval_against_raters(preds, dataset: Dataset,
                        thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> np.ndarray:
    """
    Mean per-image soft Dice of predictions against every rater.

    Returns:
        K x n table; entry (k, r) scores structure k against rater r
    """
    preds = np.asarray(preds)
    _check_aligned(preds, dataset)
    table = np.zeros((dataset.K, dataset.n))
    for pred, sample in zip(preds, dataset):
        for k in range(dataset.K):
            for r in range(dataset.n):
                table[k, r] += soft_dice(pred[:, :, k], sample.masks[:, :, k, r], thresholds)
    return table / len(dataset)


def eval_self_fusion(preds, labels, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> float:
    """Mean per-image soft Dice of predictions against the fused labels they were trained on."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"predictions {preds.shape} and fused labels {labels.shape} are not aligned")
    return float(np.mean([soft_dice(p, g, thresholds) for p, g in zip(preds, labels)]))


def eval_diagnosis(preds, dataset: Dataset, net: DiagnosisNet) -> float:
    """
    AUC of the frozen network fed each image with its predicted mask.

    Raises:
        UndefinedMetricError: If the split holds a single class
    """
    preds = np.asarray(preds)
    _check_aligned(preds, dataset)
    scores = predict_batch(net, dataset.stack_images(), preds)
    return auc(scores, dataset.labels)


def eval_rater_diagnosis(dataset: Dataset, net: DiagnosisNet) -> Dict[str, float]:
    """AUC when each single rater's masks, or no mask at all, are fed to the network."""
    images = dataset.stack_images()
    masks = dataset.stack_masks()
    result = {}
    for r in range(dataset.n):
        result[f"r{r}"] = auc(predict_batch(net, images, masks[..., r]), dataset.labels)
    result['no_mask'] = auc(predict_batch(net, images, np.zeros_like(masks[..., 0])), dataset.labels)
    return result


def majority_vote_labels(dataset: Dataset) -> np.ndarray:
    return np.stack([majority_vote(s.masks).values for s in dataset])


def fused_label_sets(dataset: Dataset, net: DiagnosisNet, methods: Sequence[str],
                     hyper: DFGTHyper,
                     precomputed: Optional[Dict[str, DFGTDataset]] = None) -> Dict[str, np.ndarray]:
    """
    N x h x w x K fused labels of every requested fusion method.

    DF-GT methods reuse `precomputed` results keyed by method name and are
    optimized on the dataset otherwise.
    """
    precomputed = precomputed or {}
    labels = {}
    for method in methods:
        if method == 'majority_vote':
            labels[method] = majority_vote_labels(dataset)
            continue
        name = method[len('dfgt_'):]
        dfgt = precomputed.get(name)
        if dfgt is None:
            method_hyper = DFGTHyper.from_dict({**hyper.to_dict(), 'method': name})
            dfgt = build_dfgt(net, dataset, method_hyper)
        dfgt.check_alignment(dataset)
        labels[method] = dfgt.stack_labels(dataset.ids)
    return labels


def compare_fusions(dataset: Dataset, net: DiagnosisNet, methods: Sequence[str] = FUSION_METHODS,
                    hyper: Optional[DFGTHyper] = None,
                    precomputed: Optional[Dict[str, DFGTDataset]] = None,
                    thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> List[FusionRow]:
    """
    Score fusion strategies: diagnosis AUC of each fused label set and its
    mean soft Dice against majority vote. The majority-vote row is always
    present and comes first.
    """
    if not net.frozen:
        raise ValueError("compare_fusions: diagnosis network must be frozen")
    methods = ['majority_vote'] + [m for m in methods if m != 'majority_vote']
    labels = fused_label_sets(dataset, net, methods, hyper or DFGTHyper(), precomputed)
    reference = labels['majority_vote']
    rows = []
    for method in methods:
        rows.append(FusionRow(method, eval_diagnosis(labels[method], dataset, net),
                              eval_self_fusion(labels[method], reference, thresholds), labels[method]))
        logger.info(f"{method}: AUC {rows[-1].auc:.4f}, Dice vs MV {rows[-1].dice_vs_mv:.4f}")
    return rows


def eval_generalization(fused: Dict[str, np.ndarray], dataset: Dataset,
                        nets: Sequence[DiagnosisNet]) -> Dict[str, List[float]]:
    """AUC of every fused label set through independently trained diagnosis networks."""
    return {method: [eval_diagnosis(labels, dataset, net) for net in nets]
            for method, labels in fused.items()}


def mean_vcdr(fused, dataset: Dataset, label: int = 1, threshold: float = 0.5) -> float:
    """
    Mean vCDR of fused labels over samples with the given diagnosis label.
    Samples with an empty fused disc are skipped.
    """
    fused = np.asarray(fused)
    _check_aligned(fused, dataset)
    values = []
    for grid, sample in zip(fused, dataset):
        if sample.label != label:
            continue
        try:
            values.append(vcdr(grid[:, :, CUP], grid[:, :, DISC], threshold))
        except UndefinedBiomarkerError:
            logger.warning(f"{sample.sample_id}: empty fused disc, skipped in mean vCDR")
    if not values:
        return float('nan')
    return float(np.mean(values))


def summarize_segmentation(preds, targets, dataset: Dataset, net: DiagnosisNet,
                           thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
                           high_freq_fraction: Optional[float] = None) -> MetricReport:
    """
    Per-structure Dice of predictions against their fused targets, the
    diagnosis AUC of the predictions and the vCDR of every predicted mask.
    """
    preds = np.asarray(preds)
    targets = np.asarray(targets)
    _check_aligned(preds, dataset)
    if preds.shape != targets.shape:
        raise ValueError(f"predictions {preds.shape} and targets {targets.shape} are not aligned")

    dice = {}
    for k in range(dataset.K):
        name = STRUCTURES[k] if k < len(STRUCTURES) else str(k)
        dice[name] = float(np.mean([soft_dice(p[:, :, k], g[:, :, k], thresholds)
                                    for p, g in zip(preds, targets)]))
    vcdrs = []
    for grid in preds:
        try:
            vcdrs.append(vcdr(grid[:, :, CUP], grid[:, :, DISC]))
        except UndefinedBiomarkerError:
            continue
    if high_freq_fraction is not None and not np.isfinite(high_freq_fraction):
        high_freq_fraction = None
    return MetricReport(dice=dice, auc=eval_diagnosis(preds, dataset, net), vcdrs=vcdrs,
                        high_freq_fraction=high_freq_fraction, sample_count=len(dataset))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _format(value) -> str:
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.6f}"
    return str(value)


def render_report(sections: Dict[str, Dict[str, object]], header: Dict[str, object]) -> str:
    """Sorted `section.key=value` lines under a `#` header; no timestamps."""
    lines = ["# DiFF desk evaluation report", f"# aggregation={AGGREGATION}"]
    lines.extend(f"# {key}={_format(value)}" for key, value in sorted(header.items()))
    flat = {f"{section}.{key}": _format(value)
            for section, values in sections.items() for key, value in values.items()}
    lines.extend(f"{key}={value}" for key, value in sorted(flat.items()))
    return "\n".join(lines) + "\n"


def write_report(path: str, sections: Dict[str, Dict[str, object]], header: Dict[str, object]) -> str:
    text = render_report(sections, header)
    with open(path, 'w', encoding='utf-8') as f:
        f.write(text)
    logger.info(f"Wrote report to {path}")
    return text


def read_report(path: str) -> Dict[str, str]:
    """Parse the key=value body of a report (header lines skipped)."""
    values = {}
    with open(path, 'r', encoding='utf-8') as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            key, _, value = line.partition('=')
            values[key] = value
    return values


def plot_fusion_auc(rows: Dict[str, float], path: str):
    """Bar chart of diagnosis AUC per fusion method."""
    methods = list(rows)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(range(len(methods)), [rows[m] for m in methods], color='steelblue')
    ax.set_xticks(range(len(methods)))
    ax.set_xticklabels(methods, rotation=30, ha='right')
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel('diagnosis AUC')
    ax.set_title('Fusion strategies through the frozen diagnosis network')
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={'Software': None})
    plt.close(fig)


def plot_histories(histories: Sequence[TrainHistory], path: str):
    """Loss curves of training stages."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for history in histories:
        ax.plot([r.epoch for r in history.records], history.losses, label=history.stage)
    ax.set_xlabel('epoch')
    ax.set_ylabel('mean loss')
    if histories:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={'Software': None})
    plt.close(fig)
