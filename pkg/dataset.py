"""
Multi-Rater Dataset Types and On-Disk Format

This module defines the shared domain types of the pipeline (multi-rater
samples, expertness maps, fused labels, datasets, training histories),
validates their invariants and reads/writes the dataset directory format:
a JSON manifest plus one PNG per image and one 16-bit PNG per
(structure, rater) mask.

Author: DiFF Desk Toolkit
"""

import json
import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence

import numpy as np
from PIL import Image

from utils import FORMAT_VERSION

MANIFEST_NAME = 'manifest.json'
SPLITS = ('train', 'val', 'test')

_MAX16 = 65535.0
_MAX8 = 255.0

logger = logging.getLogger("Dataset")


class DatasetFormatError(ValueError):
    """Raised when a dataset directory does not follow the on-disk format."""


class ValidationError(ValueError):
    """Raised when data violates a domain type invariant."""


class Provenance(str, Enum):
    """Where a fused label came from."""
    MAJORITY_VOTE = 'majority_vote'
    DFGT_RAW = 'dfgt_raw'
    DFGT_TRANSROB = 'dfgt_transrob'
    DFGT_FOURIER = 'dfgt_fourier'
    DFGT_EXPG = 'dfgt_expg'


def quantize16(values) -> np.ndarray:
    """Project values in [0, 1] onto the stored 16-bit grid (float32)."""
    arr = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    codes = np.round(arr * _MAX16).astype(np.uint16)
    return codes.astype(np.float32) / np.float32(_MAX16)


def quantize8(values) -> np.ndarray:
    """Project values in [0, 1] onto the stored 8-bit grid (float32)."""
    arr = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    codes = np.round(arr * _MAX8).astype(np.uint8)
    return codes.astype(np.float32) / np.float32(_MAX8)


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class MultiRaterSample:
    """
    One raw image, n rater masks per structure channel and a binary label.

    Arrays are copied to float32 and made read-only on construction.
    Invariants are not enforced here; use validate_sample() to inspect a
    sample and Dataset to admit it.
    """
    sample_id: str
    image: np.ndarray
    masks: np.ndarray
    label: int

    def __post_init__(self):
        image = np.array(self.image, dtype=np.float32)
        if image.ndim == 2:
            image = image[:, :, None]
        masks = np.array(self.masks, dtype=np.float32)
        object.__setattr__(self, 'image', _readonly(image))
        object.__setattr__(self, 'masks', _readonly(masks))
        object.__setattr__(self, 'label', int(self.label))

    @property
    def h(self) -> int:
        return self.image.shape[0]

    @property
    def w(self) -> int:
        return self.image.shape[1]

    @property
    def c(self) -> int:
        return self.image.shape[2]

    @property
    def K(self) -> int:
        return self.masks.shape[2]

    @property
    def n(self) -> int:
        return self.masks.shape[3]

    def equals(self, other: 'MultiRaterSample') -> bool:
        """Field-for-field equality (arrays compared exactly)."""
        return (self.sample_id == other.sample_id
                and self.label == other.label
                and self.image.shape == other.image.shape
                and self.masks.shape == other.masks.shape
                and np.array_equal(self.image, other.image)
                and np.array_equal(self.masks, other.masks))


def validate_sample(sample: MultiRaterSample) -> List[str]:
    """
    Check every MultiRaterSample invariant.

    Args:
        sample: Sample to inspect

    Returns:
        List of violation descriptions, empty iff the sample is valid
    """
    violations = []

    if not isinstance(sample.sample_id, str) or not sample.sample_id:
        violations.append("sample_id: must be a non-empty string")

    if sample.label not in (0, 1):
        violations.append(f"label: must be 0 or 1, got {sample.label}")

    image, masks = sample.image, sample.masks
    if image.ndim != 3:
        violations.append(f"image: expected h x w x c grid, got shape {image.shape}")
    elif not np.all(np.isfinite(image)) or image.min() < 0.0 or image.max() > 1.0:
        violations.append(f"image: values must lie in [0, 1] "
                          f"(range [{np.nanmin(image):.4g}, {np.nanmax(image):.4g}])")

    if masks.ndim != 4:
        violations.append(f"masks: expected h x w x K x n grid, got shape {masks.shape}")
        return violations

    if not np.all(np.isfinite(masks)) or masks.min() < 0.0 or masks.max() > 1.0:
        violations.append(f"masks: values must lie in [0, 1] "
                          f"(range [{np.nanmin(masks):.4g}, {np.nanmax(masks):.4g}])")

    if masks.shape[3] < 2:
        violations.append(f"masks: rater count n must be >= 2, got {masks.shape[3]}")

    if masks.shape[2] < 1:
        violations.append(f"masks: structure count K must be >= 1, got {masks.shape[2]}")

    if image.ndim == 3 and image.shape[:2] != masks.shape[:2]:
        violations.append(f"masks: spatial size {masks.shape[:2]} does not match "
                          f"image spatial size {image.shape[:2]}")

    return violations


@dataclass(frozen=True, eq=False)
class ExpertnessMap:
    """Per-pixel, per-structure convex rater weights (h x w x K x n)."""
    weights: np.ndarray

    TOLERANCE = 1e-5

    def __post_init__(self):
        weights = np.array(self.weights, dtype=np.float64)
        if weights.ndim != 4:
            raise ValidationError(f"expertness: expected h x w x K x n grid, got shape {weights.shape}")
        if not np.all(np.isfinite(weights)):
            raise ValidationError("expertness: non-finite weights")
        if weights.min() < 0.0 or weights.max() > 1.0:
            raise ValidationError("expertness: weights must lie in [0, 1]")
        deviation = np.abs(weights.sum(axis=-1) - 1.0).max()
        if deviation > self.TOLERANCE:
            raise ValidationError(f"expertness: rater weights sum to 1 only within {deviation:.3g}")
        object.__setattr__(self, 'weights', _readonly(weights))

    @property
    def n(self) -> int:
        return self.weights.shape[3]

    def rater_means(self) -> np.ndarray:
        """Mean weight of each rater over pixels and structures."""
        return self.weights.mean(axis=(0, 1, 2))


@dataclass(frozen=True, eq=False)
class FusedLabel:
    """Soft ground truth (h x w x K) in [0, 1] with its provenance."""
    values: np.ndarray
    provenance: Provenance

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float32)
        if values.ndim != 3:
            raise ValidationError(f"fused label: expected h x w x K grid, got shape {values.shape}")
        if not np.all(np.isfinite(values)) or values.min() < 0.0 or values.max() > 1.0:
            raise ValidationError("fused label: values must lie in [0, 1]")
        object.__setattr__(self, 'values', _readonly(values))
        object.__setattr__(self, 'provenance', Provenance(self.provenance))


def check_fused_label(label: FusedLabel, masks: np.ndarray, tolerance: float = 1e-6) -> List[str]:
    """
    Check the convex-hull bound of a fused label against its source masks.

    Returns:
        List of violation descriptions, empty iff the bound holds
    """
    masks = np.asarray(masks, dtype=np.float64)
    if masks.shape[:3] != label.values.shape:
        return [f"fused label: shape {label.values.shape} does not match masks {masks.shape[:3]}"]
    values = label.values.astype(np.float64)
    below = (masks.min(axis=-1) - values).max()
    above = (values - masks.max(axis=-1)).max()
    violations = []
    if below > tolerance:
        violations.append(f"fused label: {below:.3g} below the rater minimum")
    if above > tolerance:
        violations.append(f"fused label: {above:.3g} above the rater maximum")
    return violations


class Dataset:
    """
    Ordered collection of multi-rater samples sharing n, K, h, w and c.

    Raises:
        ValidationError: If any sample is invalid, dimensions disagree or
            sample ids repeat
    """

    def __init__(self, samples: Sequence[MultiRaterSample], split: str,
                 metadata: Optional[Dict] = None):
        if split not in SPLITS:
            raise ValidationError(f"split must be one of {SPLITS}, got {split!r}")
        if not samples:
            raise ValidationError("dataset must contain at least one sample")

        for sample in samples:
            violations = validate_sample(sample)
            if violations:
                raise ValidationError(f"sample {sample.sample_id}: " + "; ".join(violations))

        first = samples[0]
        dims = (first.n, first.K, first.h, first.w, first.c)
        seen = set()
        for sample in samples:
            if (sample.n, sample.K, sample.h, sample.w, sample.c) != dims:
                raise ValidationError(
                    f"sample {sample.sample_id}: dimensions "
                    f"(n={sample.n}, K={sample.K}, h={sample.h}, w={sample.w}, c={sample.c}) "
                    f"differ from (n={dims[0]}, K={dims[1]}, h={dims[2]}, w={dims[3]}, c={dims[4]})")
            if sample.sample_id in seen:
                raise ValidationError(f"duplicate sample_id {sample.sample_id}")
            seen.add(sample.sample_id)

        self.samples = tuple(samples)
        self.split = split
        self.n, self.K, self.h, self.w, self.c = dims
        # JSON normalisation keeps metadata identical across save/load
        extra = json.loads(json.dumps(metadata or {}, sort_keys=True))
        extra.update({'n': self.n, 'K': self.K, 'h': self.h, 'w': self.w, 'c': self.c})
        self.metadata = extra

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, index: int) -> MultiRaterSample:
        return self.samples[index]

    @property
    def ids(self) -> List[str]:
        return [s.sample_id for s in self.samples]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def stack_images(self) -> np.ndarray:
        """Images as one N x h x w x c array."""
        return np.stack([s.image for s in self.samples])

    def stack_masks(self) -> np.ndarray:
        """Rater masks as one N x h x w x K x n array."""
        return np.stack([s.masks for s in self.samples])

    def select(self, indices: Sequence[int]) -> 'Dataset':
        """Sub-dataset with the given sample positions (order kept)."""
        return Dataset([self.samples[i] for i in indices], self.split, self.metadata)

    def equals(self, other: 'Dataset') -> bool:
        return (self.split == other.split
                and self.metadata == other.metadata
                and len(self) == len(other)
                and all(a.equals(b) for a, b in zip(self.samples, other.samples)))


@dataclass
class EpochRecord:
    """One training epoch summary."""
    epoch: int
    loss: float
    metrics: Dict[str, float] = field(default_factory=dict)


class TrainHistory:
    """Per-epoch loss records, epochs numbered 1, 2, 3, ..."""

    def __init__(self, stage: str = 'train'):
        self.stage = stage
        self.records: List[EpochRecord] = []

    def record(self, loss: float, metrics: Optional[Dict[str, float]] = None) -> EpochRecord:
        entry = EpochRecord(len(self.records) + 1, float(loss), dict(metrics or {}))
        self.records.append(entry)
        return entry

    @property
    def losses(self) -> List[float]:
        return [r.loss for r in self.records]

    def __len__(self) -> int:
        return len(self.records)

    def to_dict(self) -> Dict:
        return {
            'stage': self.stage,
            'records': [{'epoch': r.epoch, 'loss': r.loss, 'metrics': r.metrics} for r in self.records]
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'TrainHistory':
        history = cls(data.get('stage', 'train'))
        for expected, entry in enumerate(data.get('records', []), start=1):
            if entry['epoch'] != expected:
                raise ValidationError(f"history: epoch {entry['epoch']} out of order (expected {expected})")
            history.record(entry['loss'], entry.get('metrics'))
        return history

    def save(self, path: str):
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str) -> 'TrainHistory':
        with open(path, 'r', encoding='utf-8') as f:
            return cls.from_dict(json.load(f))


# ---------------------------------------------------------------------------
# PNG codec
# ---------------------------------------------------------------------------

def write_mask_png(values: np.ndarray, path: str):
    """Write an h x w grid in [0, 1] as a 16-bit grayscale PNG (0 <-> 0.0, 65535 <-> 1.0)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"mask grid must be h x w, got shape {arr.shape}")
    codes = np.round(np.clip(arr, 0.0, 1.0) * _MAX16).astype(np.uint16)
    Image.fromarray(codes).save(path, format='PNG')


def read_mask_png(path: str) -> np.ndarray:
    """Read a 16-bit grayscale PNG into an h x w float32 grid."""
    with Image.open(path) as img:
        if img.mode not in ('I;16', 'I;16B', 'I;16L', 'I'):
            raise DatasetFormatError(f"{path}: expected 16-bit grayscale PNG, got mode {img.mode}")
        codes = np.array(img)
    return codes.astype(np.float32) / np.float32(_MAX16)


def write_image_png(image: np.ndarray, path: str):
    """Write an h x w x c image; c=1 as 16-bit grayscale, c=3 as 8-bit RGB."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.shape[2] == 1:
        write_mask_png(arr[:, :, 0], path)
    elif arr.shape[2] == 3:
        codes = np.round(np.clip(arr, 0.0, 1.0) * _MAX8).astype(np.uint8)
        Image.fromarray(codes).save(path, format='PNG')
    else:
        raise ValueError(f"images must have 1 or 3 channels, got {arr.shape[2]}")


def read_image_png(path: str) -> np.ndarray:
    """Read an image PNG into an h x w x c float32 grid."""
    with Image.open(path) as img:
        mode = img.mode
        codes = np.array(img)
    if mode in ('I;16', 'I;16B', 'I;16L', 'I'):
        return (codes.astype(np.float32) / np.float32(_MAX16))[:, :, None]
    if mode == 'L':
        return (codes.astype(np.float32) / np.float32(_MAX8))[:, :, None]
    if mode == 'RGB':
        return codes.astype(np.float32) / np.float32(_MAX8)
    raise DatasetFormatError(f"{path}: unsupported image mode {mode}")


def mask_file_name(sample_id: str, structure: int, rater: int) -> str:
    return f"{sample_id}_s{structure}_r{rater}.png"


def _write_json_atomic(data: Dict, path: str):
    tmp_path = path + '.tmp'
    with open(tmp_path, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write('\n')
    os.replace(tmp_path, path)


# ---------------------------------------------------------------------------
# Dataset directories
# ---------------------------------------------------------------------------

def save_dataset(dataset: Dataset, path: str):
    """
    Write a dataset directory: image and mask PNGs first, manifest last.

    Args:
        dataset: Valid dataset
        path: Target directory (created if missing)

    Raises:
        OSError: If the directory or files cannot be written
    """
    os.makedirs(path, exist_ok=True)

    entries = []
    for sample in dataset:
        image_name = f"{sample.sample_id}.png"
        write_image_png(sample.image, os.path.join(path, image_name))

        mask_names = []
        for k in range(dataset.K):
            names = []
            for r in range(dataset.n):
                name = mask_file_name(sample.sample_id, k, r)
                write_mask_png(sample.masks[:, :, k, r], os.path.join(path, name))
                names.append(name)
            mask_names.append(names)

        entries.append({
            'id': sample.sample_id,
            'label': sample.label,
            'image': image_name,
            'masks': mask_names
        })

    extra = {key: value for key, value in dataset.metadata.items()
             if key not in ('n', 'K', 'h', 'w', 'c')}
    manifest = {
        'version': FORMAT_VERSION,
        'split': dataset.split,
        'n': dataset.n,
        'K': dataset.K,
        'h': dataset.h,
        'w': dataset.w,
        'c': dataset.c,
        'metadata': extra,
        'samples': entries
    }
    _write_json_atomic(manifest, os.path.join(path, MANIFEST_NAME))
    logger.info(f"Saved {len(dataset)} {dataset.split} samples to {path}")


def _read_manifest(path: str) -> Dict:
    manifest_path = os.path.join(path, MANIFEST_NAME)
    if not os.path.isfile(manifest_path):
        raise DatasetFormatError(f"{path}: missing {MANIFEST_NAME}")
    try:
        with open(manifest_path, 'r', encoding='utf-8') as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{manifest_path}: invalid JSON ({e})")

    for key in ('version', 'split', 'n', 'K', 'h', 'w', 'c', 'samples'):
        if key not in manifest:
            raise DatasetFormatError(f"{manifest_path}: missing key '{key}'")
    if manifest['version'] != FORMAT_VERSION:
        raise DatasetFormatError(f"{manifest_path}: unsupported version {manifest['version']}")
    return manifest


def load_dataset(path: str) -> Dataset:
    """
    Load and validate a dataset directory.

    Args:
        path: Directory containing manifest.json

    Returns:
        Dataset in manifest order

    Raises:
        DatasetFormatError: If the manifest is missing or malformed
        ValidationError: If any sample violates an invariant or the manifest
            dimensions
    """
    manifest = _read_manifest(path)
    n, K = manifest['n'], manifest['K']
    h, w, c = manifest['h'], manifest['w'], manifest['c']

    samples = []
    for entry in manifest['samples']:
        try:
            sample_id = entry['id']
            image = read_image_png(os.path.join(path, entry['image']))
            mask_names = entry['masks']
            label = entry['label']
        except KeyError as e:
            raise DatasetFormatError(f"{path}: sample entry missing key {e}")
        except FileNotFoundError as e:
            raise DatasetFormatError(f"{path}: {e}")

        if len(mask_names) != K or any(len(names) != n for names in mask_names):
            raise ValidationError(f"sample {sample_id}: manifest lists a mask grid other than K={K} x n={n}")

        planes = []
        for k in range(K):
            row = []
            for r in range(n):
                mask_path = os.path.join(path, mask_names[k][r])
                if not os.path.isfile(mask_path):
                    raise DatasetFormatError(f"sample {sample_id}: missing mask file {mask_names[k][r]}")
                row.append(read_mask_png(mask_path))
            shapes = {plane.shape for plane in row}
            if len(shapes) != 1:
                raise ValidationError(f"sample {sample_id}: rater masks of structure {k} differ in size")
            planes.append(np.stack(row, axis=-1))
        shapes = {plane.shape for plane in planes}
        if len(shapes) != 1:
            raise ValidationError(f"sample {sample_id}: structure masks differ in size")
        masks = np.stack(planes, axis=2)

        sample = MultiRaterSample(sample_id, image, masks, label)
        violations = validate_sample(sample)
        if violations:
            raise ValidationError(f"sample {sample_id}: " + "; ".join(violations))
        if (sample.h, sample.w, sample.c) != (h, w, c):
            raise ValidationError(f"sample {sample_id}: image is {sample.h}x{sample.w}x{sample.c}, "
                                  f"manifest declares {h}x{w}x{c}")
        samples.append(sample)

    dataset = Dataset(samples, manifest['split'], manifest.get('metadata', {}))
    logger.info(f"Loaded {len(dataset)} {dataset.split} samples from {path}")
    return dataset


def save_splits(splits: Dict[str, Dataset], root: str):
    """Write each split to root/<split>/."""
    for split, dataset in splits.items():
        save_dataset(dataset, os.path.join(root, split))


def load_splits(root: str) -> Dict[str, Dataset]:
    """Load every split directory present under root."""
    splits = {}
    for split in SPLITS:
        split_dir = os.path.join(root, split)
        if os.path.isdir(split_dir):
            splits[split] = load_dataset(split_dir)
    if not splits:
        raise DatasetFormatError(f"{root}: no split directories found")
    return splits
