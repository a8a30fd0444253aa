"""
Synthetic Multi-Rater Fundus Benchmark

Generates disc/cup images whose diagnosis label is decided by the latent
vertical cup-to-disc ratio, then annotates every image with a panel of
raters that over- or under-segment the cup, jitter boundaries, blur, or
(when diagnosis-informed) enlarge the cup on positive cases.

Author: DiFF Desk Toolkit
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from dataset import Dataset, MultiRaterSample, ValidationError, quantize16, quantize8
from metrics import vcdr
from utils import config_hash, derive_seed

STRUCTURES = ('disc', 'cup')
DISC, CUP = 0, 1

logger = logging.getLogger("SynthGen")


@dataclass(frozen=True)
class RaterProfile:
    """
    Annotation habits of one synthetic rater.

    cup_scale multiplies the cup extent about its centroid; a
    diagnosis-informed rater multiplies it further by positive_boost on
    positive cases.
    """
    name: str = 'rater'
    cup_scale: float = 1.0
    boundary_jitter_px: float = 0.0
    diagnosis_informed: bool = False
    positive_boost: float = 1.2
    smoothing_radius_px: float = 0.0

    def validate(self):
        if self.cup_scale <= 0:
            raise ValidationError(f"rater {self.name}: cup_scale must be > 0")
        if self.boundary_jitter_px < 0 or self.smoothing_radius_px < 0:
            raise ValidationError(f"rater {self.name}: jitter and smoothing must be non-negative")
        if self.positive_boost <= 0:
            raise ValidationError(f"rater {self.name}: positive_boost must be > 0")

    def effective_cup_scale(self, label: int) -> float:
        if self.diagnosis_informed and label == 1:
            return self.cup_scale * self.positive_boost
        return self.cup_scale


def default_raters() -> List[RaterProfile]:
    return [
        RaterProfile('identity'),
        RaterProfile('over', cup_scale=1.15, boundary_jitter_px=1.0, smoothing_radius_px=0.5),
        RaterProfile('under', cup_scale=0.85, boundary_jitter_px=1.0, smoothing_radius_px=0.5),
        RaterProfile('informed', cup_scale=1.0, boundary_jitter_px=0.5,
                     diagnosis_informed=True, positive_boost=1.2),
    ]


@dataclass
class SynthSpec:
    """Everything that determines a synthetic benchmark."""
    train_count: int = 200
    val_count: int = 50
    test_count: int = 100
    h: int = 64
    w: int = 64
    c: int = 1
    raters: List[RaterProfile] = field(default_factory=default_raters)
    vcdr_threshold: float = 0.6
    disc_radius_range: Tuple[float, float] = (12.0, 18.0)
    vcdr_range: Tuple[float, float] = (0.3, 0.8)
    center_jitter_px: float = 3.0
    boundary_ramp_px: float = 1.5
    texture_amplitude: float = 0.05
    streak_count: int = 3
    seed: int = 0

    @property
    def n(self) -> int:
        return len(self.raters)

    @property
    def K(self) -> int:
        return len(STRUCTURES)

    def counts(self) -> Dict[str, int]:
        return {'train': self.train_count, 'val': self.val_count, 'test': self.test_count}

    def validate(self):
        """
        Raises:
            ValidationError: If any field is out of range
        """
        if min(self.train_count, self.val_count, self.test_count) < 0:
            raise ValidationError("synth: sample counts must be non-negative")
        if self.train_count + self.val_count + self.test_count == 0:
            raise ValidationError("synth: at least one sample required")
        if self.h < 16 or self.w < 16:
            raise ValidationError(f"synth: image must be at least 16x16, got {self.h}x{self.w}")
        if self.c not in (1, 3):
            raise ValidationError(f"synth: c must be 1 or 3, got {self.c}")
        if self.n < 2:
            raise ValidationError(f"synth: need at least 2 raters, got {self.n}")
        for rater in self.raters:
            rater.validate()
        if not 0.0 < self.vcdr_threshold < 1.0:
            raise ValidationError("synth: vcdr_threshold must lie in (0, 1)")
        lo, hi = self.vcdr_range
        if not 0.0 < lo < self.vcdr_threshold < hi < 1.0:
            raise ValidationError(f"synth: vcdr_range {self.vcdr_range} must straddle {self.vcdr_threshold}")
        r_lo, r_hi = self.disc_radius_range
        if not 0.0 < r_lo <= r_hi:
            raise ValidationError(f"synth: invalid disc_radius_range {self.disc_radius_range}")
        if 2 * (r_hi + self.center_jitter_px) + 2 >= min(self.h, self.w):
            raise ValidationError("synth: disc does not fit in the image")
        if self.boundary_ramp_px <= 0 or self.center_jitter_px < 0:
            raise ValidationError("synth: ramp must be > 0 and center jitter >= 0")
        if self.texture_amplitude < 0 or self.streak_count < 0:
            raise ValidationError("synth: noise spec must be non-negative")

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['disc_radius_range'] = list(self.disc_radius_range)
        data['vcdr_range'] = list(self.vcdr_range)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'SynthSpec':
        data = dict(data)
        if 'raters' in data:
            data['raters'] = [r if isinstance(r, RaterProfile) else RaterProfile(**r) for r in data['raters']]
        for key in ('disc_radius_range', 'vcdr_range'):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


def default_spec(seed: int = 0) -> SynthSpec:
    return SynthSpec(seed=seed)


def render_ellipse(h: int, w: int, cy: float, cx: float, ry: float, rx: float,
                   ramp: float = 1.5) -> np.ndarray:
    """
    Filled ellipse with a linear soft boundary.

    Pixel (i, j) has its center at (i + 0.5, j + 0.5); the value is 0.5
    exactly on the ellipse and ramps linearly to 0/1 over `ramp` pixels.
    """
    yy = (np.arange(h) + 0.5)[:, None]
    xx = (np.arange(w) + 0.5)[None, :]
    rho = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    return np.clip(0.5 - (rho - 1.0) * np.sqrt(ry * rx) / ramp, 0.0, 1.0)


def generate_latent(spec: SynthSpec, rng: np.random.Generator,
                    target_vcdr: Optional[float] = None) -> Tuple[np.ndarray, Dict]:
    """
    Draw one latent (pre-rater) disc/cup geometry.

    Returns:
        (h x w x 2 latent masks, geometry dict with the measured latent vCDR)
    """
    h, w = spec.h, spec.w
    jitter = spec.center_jitter_px
    cy = h / 2 + rng.uniform(-jitter, jitter)
    cx = w / 2 + rng.uniform(-jitter, jitter)
    disc_ry = rng.uniform(*spec.disc_radius_range)
    disc_rx = disc_ry * rng.uniform(0.9, 1.0)
    ratio = target_vcdr if target_vcdr is not None else rng.uniform(*spec.vcdr_range)
    cup_ry = ratio * disc_ry
    cup_rx = cup_ry * rng.uniform(0.85, 1.0)
    cup_cx = cx + rng.uniform(-1.0, 1.0)

    disc = render_ellipse(h, w, cy, cx, disc_ry, disc_rx, spec.boundary_ramp_px)
    cup = np.minimum(render_ellipse(h, w, cy, cup_cx, cup_ry, cup_rx, spec.boundary_ramp_px), disc)
    latent = quantize16(np.stack([disc, cup], axis=2))

    geometry = {
        'center': (cy, cx),
        'disc_radii': (disc_ry, disc_rx),
        'cup_radii': (cup_ry, cup_rx),
        'vcdr': vcdr(latent[:, :, CUP], latent[:, :, DISC], 0.5)
    }
    return latent, geometry


def render_image(spec: SynthSpec, latent: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Fundus-like image: smoothed texture, bright disc, faint cup, dark streaks."""
    h, w = spec.h, spec.w
    texture = gaussian_filter(rng.standard_normal((h, w)), sigma=2.0)
    texture /= np.abs(texture).max() + 1e-12

    image = 0.25 + spec.texture_amplitude * texture
    image += 0.35 * gaussian_filter(latent[:, :, DISC].astype(np.float64), 1.0)
    image += 0.15 * gaussian_filter(latent[:, :, CUP].astype(np.float64), 2.5)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for _ in range(spec.streak_count):
        angle = rng.uniform(0, np.pi)
        offset = rng.uniform(-0.4, 0.4) * min(h, w)
        width = rng.uniform(0.6, 1.5)
        distance = (yy - h / 2) * np.cos(angle) - (xx - w / 2) * np.sin(angle) - offset
        image -= 0.12 * np.exp(-(distance / width) ** 2)

    image = np.clip(image, 0.0, 1.0)
    if spec.c == 1:
        return quantize16(image[:, :, None])
    tint = np.array([1.0, 0.8, 0.6])
    return quantize8(image[:, :, None] * tint[None, None, :])


def _scale_about_centroid(grid: np.ndarray, scale: float) -> np.ndarray:
    total = grid.sum()
    if total <= 0:
        return grid.copy()
    yy, xx = np.mgrid[0:grid.shape[0], 0:grid.shape[1]].astype(np.float64)
    cy = (grid * yy).sum() / total
    cx = (grid * xx).sum() / total
    coords = [cy + (yy - cy) / scale, cx + (xx - cx) / scale]
    return map_coordinates(grid, coords, order=1, mode='constant', cval=0.0)


def _jitter_boundary(grid: np.ndarray, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    h, w = grid.shape
    sigma = max(h, w) / 8.0
    displacement = []
    for _ in range(2):
        noise = gaussian_filter(rng.standard_normal((h, w)), sigma=sigma)
        displacement.append(noise / (np.abs(noise).max() + 1e-12) * amplitude)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return map_coordinates(grid, [yy + displacement[0], xx + displacement[1]], order=1, mode='nearest')


def _annotate(latent: np.ndarray, profile: RaterProfile, label: int,
              rng: np.random.Generator) -> Tuple[np.ndarray, bool]:
    disc = latent[:, :, DISC].astype(np.float64)
    cup = latent[:, :, CUP].astype(np.float64)

    scale = profile.effective_cup_scale(label)
    if scale != 1.0:
        cup = _scale_about_centroid(cup, scale)

    if profile.boundary_jitter_px > 0:
        disc = _jitter_boundary(disc, profile.boundary_jitter_px, rng)
        cup = _jitter_boundary(cup, profile.boundary_jitter_px, rng)

    if profile.smoothing_radius_px > 0:
        disc = gaussian_filter(disc, profile.smoothing_radius_px)
        cup = gaussian_filter(cup, profile.smoothing_radius_px)

    disc = np.clip(disc, 0.0, 1.0)
    cup = np.clip(cup, 0.0, 1.0)
    clipped = bool((cup > disc).any())
    cup = np.minimum(cup, disc)
    return np.stack([disc, cup], axis=2), clipped


def rater_annotate(latent_masks: np.ndarray, profile: RaterProfile, label: int,
                   rng_state: Union[np.random.Generator, int]) -> np.ndarray:
    """
    Annotate latent disc/cup masks the way one rater would.

    Args:
        latent_masks: h x w x 2 latent (disc, cup) masks
        profile: Rater habits
        label: Diagnosis label of the case (gates the positive-case boost)
        rng_state: numpy Generator or integer seed

    Returns:
        h x w x 2 masks in [0, 1], cup never exceeding disc
    """
    rng = rng_state if isinstance(rng_state, np.random.Generator) else np.random.default_rng(rng_state)
    masks, _ = _annotate(np.asarray(latent_masks), profile, label, rng)
    return masks


def stratified_vcdr_targets(spec: SynthSpec, split: str, count: int) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(spec.seed, f"{split}:strata"))
    lo, hi = spec.vcdr_range
    strata = (np.arange(count) + rng.uniform(size=count)) / max(count, 1)
    return lo + rng.permutation(strata) * (hi - lo)


def generate_sample(spec: SynthSpec, split: str, index: int,
                    target_vcdr: Optional[float] = None) -> Tuple[MultiRaterSample, np.ndarray, Dict]:
    """
    Generate one sample from its own (seed, split, index) random stream.

    Returns:
        (sample, latent h x w x 2 masks, info dict with latent vCDR and clipped raters)
    """
    rng = np.random.default_rng(derive_seed(spec.seed, f"{split}:{index}"))
    latent, geometry = generate_latent(spec, rng, target_vcdr)
    label = int(geometry['vcdr'] > spec.vcdr_threshold)
    image = render_image(spec, latent, rng)

    rater_masks = []
    clipped = []
    for r, profile in enumerate(spec.raters):
        masks, was_clipped = _annotate(latent, profile, label, rng)
        rater_masks.append(quantize16(masks))
        if was_clipped:
            clipped.append(r)

    sample_id = f"{split}_{index:04d}"
    sample = MultiRaterSample(sample_id, image, np.stack(rater_masks, axis=-1), label)
    return sample, latent, {'vcdr': geometry['vcdr'], 'clipped': clipped}


def generate_dataset(spec: SynthSpec) -> Dict[str, Dataset]:
    """
    Generate the train/val/test splits of a synthetic benchmark.

    Args:
        spec: Validated generator spec

    Returns:
        Dict split -> Dataset (splits with zero samples omitted)
    """
    spec.validate()
    spec_dict = spec.to_dict()
    splits = {}

    for split, count in spec.counts().items():
        if count == 0:
            continue
        targets = stratified_vcdr_targets(spec, split, count)
        samples = []
        latent_vcdr = {}
        clipped = []
        for index in range(count):
            sample, _, info = generate_sample(spec, split, index, targets[index])
            samples.append(sample)
            latent_vcdr[sample.sample_id] = round(info['vcdr'], 6)
            clipped.extend(f"{sample.sample_id}:r{r}" for r in info['clipped'])

        if clipped:
            logger.warning(f"{split}: {len(clipped)} rater cups clipped to the disc")

        metadata = {
            'generator': 'synthgen',
            'seed': spec.seed,
            'synth_spec': spec_dict,
            'spec_hash': config_hash(spec_dict),
            'vcdr_threshold': spec.vcdr_threshold,
            'structures': list(STRUCTURES),
            'raters': [r.name for r in spec.raters],
            'latent_vcdr': latent_vcdr,
            'clipped_annotations': clipped
        }
        dataset = Dataset(samples, split, metadata)
        positives = int(dataset.labels.sum())
        logger.info(f"Generated {split}: {count} samples, {positives} positive "
                    f"({100.0 * positives / count:.1f}%)")
        splits[split] = dataset

    return splits


def latent_masks(spec: SynthSpec, split: str) -> List[np.ndarray]:
    """Latent (true) h x w x 2 masks of every sample of a generated split, in order."""
    count = spec.counts()[split]
    targets = stratified_vcdr_targets(spec, split, count)
    return [generate_sample(spec, split, index, targets[index])[1] for index in range(count)]
