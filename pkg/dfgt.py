"""
Diagnosis-First Ground Truth Optimizer

For every training sample, finds the expertness map whose fused label
minimises the frozen diagnosis network's loss. Four interchangeable
parameterisations of the map are supported:

    raw       pre-softmax logits optimised directly
    transrob  logits optimised through random small rotations, scalings
              and translations
    fourier   logits parameterised by their real 2-D spectrum
    expg      logits generated by a coordinate network (ExpG)

Every optimizer starts from the uniform map (majority vote), descends
with Adam and keeps the best iterate it has seen, so the returned map
never scores worse than the uniform start.

Author: DiFF Desk Toolkit
"""

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pubsub import pub

from dataset import (Dataset, DatasetFormatError, ExpertnessMap, FusedLabel, MultiRaterSample,
                     Provenance, _write_json_atomic, quantize16, read_mask_png, write_mask_png)
from diagnet import DiagnosisNet, _dtype, diagnosis_loss, images_to_tensor
from fusion import (ExpertnessLogits, fuse, fuse_tensor, normalize_expertness, softmax_expertness,
                    uniform_expertness)
from metrics import mean_high_freq_energy
from utils import DFGT_METHODS, FORMAT_VERSION, config_hash, derive_seed

DFGT_MANIFEST = 'dfgt_manifest.json'

logger = logging.getLogger("DFGTOptimizer")


class StaleLabelsError(DatasetFormatError):
    """Raised when DF-GT labels were built from another dataset or hyper set."""


class OptimizationAborted(RuntimeError):
    """Raised when a per-sample optimization hits a non-finite loss."""

    def __init__(self, sample_id: str, step: int, message: str = "non-finite diagnosis loss"):
        super().__init__(f"sample {sample_id}: {message} at step {step}")
        self.sample_id = sample_id
        self.step = step


@dataclass
class DFGTHyper:
    """Per-sample optimization settings."""
    steps: int = 125
    step_size: float = 1e-2
    method: str = 'raw'
    betas: Tuple[float, float] = (0.9, 0.999)
    rotation_deg: float = 5.0
    scale_range: Tuple[float, float] = (0.95, 1.05)
    translate_px: float = 2.0
    fourier_decay: bool = False
    expg_hidden: int = 64
    expg_shared: bool = False
    seed: int = 0

    def validate(self):
        if self.steps < 1:
            raise ValueError(f"dfgt: steps must be >= 1, got {self.steps}")
        if not self.step_size > 0:
            raise ValueError(f"dfgt: step_size must be positive, got {self.step_size}")
        if self.method not in DFGT_METHODS:
            raise ValueError(f"dfgt: method must be one of {DFGT_METHODS}, got {self.method!r}")
        low, high = self.scale_range
        if not 0 < low <= high:
            raise ValueError(f"dfgt: invalid scale_range {self.scale_range}")
        if self.rotation_deg < 0 or self.translate_px < 0:
            raise ValueError("dfgt: rotation_deg and translate_px must be >= 0")
        if self.expg_hidden < 1:
            raise ValueError("dfgt: expg_hidden must be >= 1")

    @property
    def provenance(self) -> Provenance:
        return Provenance(f"dfgt_{self.method}")

    @property
    def identity_transform(self) -> bool:
        return self.rotation_deg == 0 and tuple(self.scale_range) == (1.0, 1.0) and self.translate_px == 0

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['betas'] = list(self.betas)
        data['scale_range'] = list(self.scale_range)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'DFGTHyper':
        data = dict(data)
        for key in ('betas', 'scale_range'):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


class _Problem:
    """One sample's tensors and its diagnosis loss as a function of logits."""

    def __init__(self, net: DiagnosisNet, sample: MultiRaterSample):
        if not net.frozen:
            raise ValueError("dfgt: diagnosis network must be frozen")
        config = net.config
        if (sample.c, sample.K) != (config.image_channels, config.structures):
            raise ValueError(f"dfgt: sample {sample.sample_id} has c={sample.c}, K={sample.K}; "
                             f"network expects c={config.image_channels}, K={config.structures}")
        self.net = net
        self.sample = sample
        self.dtype = _dtype(net)
        self.image = images_to_tensor(sample.image, self.dtype)
        self.masks = torch.as_tensor(sample.masks, dtype=self.dtype)
        self.label = torch.tensor([float(sample.label)], dtype=self.dtype)

    def loss(self, logits: torch.Tensor) -> torch.Tensor:
        fused = fuse_tensor(self.masks, softmax_expertness(logits))
        return diagnosis_loss(self.net, self.image, fused.permute(2, 0, 1).unsqueeze(0), self.label)


def _descend(problem: _Problem, parameters: List[torch.Tensor], logits_fn: Callable[[], torch.Tensor],
             hyper: DFGTHyper, train_logits_fn: Optional[Callable[[], torch.Tensor]] = None
             ) -> Tuple[np.ndarray, List[float]]:
    """
    Adam descent on the diagnosis loss with best-iterate retention.

    Args:
        problem: Sample and loss
        parameters: Tensors Adam updates
        logits_fn: Maps parameters to the h x w x K x n logits that are scored
        hyper: Step count and step size
        train_logits_fn: Stochastic variant used for the update direction

    Returns:
        (best logits as float64 array, loss of every scored iterate)
    """
    sample_id = problem.sample.sample_id
    optimizer = torch.optim.Adam(parameters, lr=hyper.step_size, betas=tuple(hyper.betas))
    trace: List[float] = []
    best_loss = math.inf
    best_logits = None

    def keep(loss_value: float, logits: torch.Tensor, step: int):
        nonlocal best_loss, best_logits
        if not math.isfinite(loss_value):
            raise OptimizationAborted(sample_id, step)
        trace.append(loss_value)
        if loss_value < best_loss:
            best_loss = loss_value
            best_logits = logits.detach().clone()

    for step in range(hyper.steps):
        optimizer.zero_grad()
        if train_logits_fn is None:
            logits = logits_fn()
            loss = problem.loss(logits)
            keep(float(loss), logits, step)
        else:
            if step == 0:
                with torch.no_grad():
                    logits = logits_fn()
                    keep(float(problem.loss(logits)), logits, step)
            loss = problem.loss(train_logits_fn())
            if not torch.isfinite(loss):
                raise OptimizationAborted(sample_id, step)
        loss.backward()
        optimizer.step()

        if train_logits_fn is not None:
            with torch.no_grad():
                logits = logits_fn()
                keep(float(problem.loss(logits)), logits, step + 1)

    if train_logits_fn is None:
        with torch.no_grad():
            logits = logits_fn()
            keep(float(problem.loss(logits)), logits, hyper.steps)

    return best_logits.cpu().numpy().astype(np.float64), trace


def _zero_logits(problem: _Problem) -> torch.Tensor:
    sample = problem.sample
    return torch.zeros((sample.h, sample.w, sample.K, sample.n), dtype=problem.dtype, requires_grad=True)


def optimize_raw(net: DiagnosisNet, sample: MultiRaterSample,
                 hyper: DFGTHyper) -> Tuple[ExpertnessMap, List[float]]:
    """
    Optimize expertness logits directly, starting from uniform expertness.

    Returns:
        (expertness map, loss trace with the uniform loss first)

    Raises:
        ValueError: If hyper is invalid or the net is not frozen
        OptimizationAborted: On a non-finite loss
    """
    hyper.validate()
    problem = _Problem(net, sample)
    logits = _zero_logits(problem)
    best, trace = _descend(problem, [logits], lambda: logits, hyper)
    return normalize_expertness(ExpertnessLogits(best)), trace


def random_transform(hyper: DFGTHyper, rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """
    Sample a small affine transform as a 2 x 3 sampling matrix in the
    normalised [-1, 1] coordinates used by grid sampling.
    """
    angle = math.radians(rng.uniform(-hyper.rotation_deg, hyper.rotation_deg))
    scale = rng.uniform(*hyper.scale_range)
    ty = rng.uniform(-hyper.translate_px, hyper.translate_px) * 2.0 / h
    tx = rng.uniform(-hyper.translate_px, hyper.translate_px) * 2.0 / w
    cos, sin = math.cos(angle) / scale, math.sin(angle) / scale
    return np.array([[cos, -sin, tx], [sin, cos, ty]])


def apply_transform(logits: torch.Tensor, theta: np.ndarray) -> torch.Tensor:
    """Resample an h x w x K x n logit grid through an affine transform (border padding)."""
    h, w, K, n = logits.shape
    planes = logits.reshape(h, w, K * n).permute(2, 0, 1).unsqueeze(0)
    theta_t = torch.as_tensor(theta, dtype=logits.dtype).unsqueeze(0)
    grid = F.affine_grid(theta_t, list(planes.shape), align_corners=False)
    moved = F.grid_sample(planes, grid, mode='bilinear', padding_mode='border', align_corners=False)
    return moved[0].permute(1, 2, 0).reshape(h, w, K, n)


def optimize_transrob(net: DiagnosisNet, sample: MultiRaterSample,
                      hyper: DFGTHyper) -> Tuple[ExpertnessMap, List[float]]:
    """
    Optimize logits through a random small transform at every step.

    The update direction is the gradient of the loss at T(logits), mapped
    back to the untransformed logits by autograd; scoring and the returned
    map use the untransformed logits. All-zero transform ranges reduce to
    optimize_raw exactly.
    """
    hyper.validate()
    if hyper.identity_transform:
        return optimize_raw(net, sample, hyper)

    problem = _Problem(net, sample)
    logits = _zero_logits(problem)
    rng = np.random.default_rng(derive_seed(hyper.seed, sample.sample_id))

    def transformed() -> torch.Tensor:
        return apply_transform(logits, random_transform(hyper, rng, sample.h, sample.w))

    best, trace = _descend(problem, [logits], lambda: logits, hyper, transformed)
    return normalize_expertness(ExpertnessLogits(best)), trace


def _spectrum_scale(h: int, w: int, decay: bool, dtype: torch.dtype) -> torch.Tensor:
    if not decay:
        return torch.ones((h, w // 2 + 1), dtype=dtype)
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    radius = np.sqrt(fy ** 2 + fx ** 2)
    size = max(h, w)
    # 1 at the lowest frequency, falling as 1/f
    return torch.as_tensor(1.0 / (np.maximum(radius, 1.0 / size) * size), dtype=dtype)


def spectrum_to_logits(spectrum: torch.Tensor, h: int, w: int, K: int, n: int,
                       decay: bool = False) -> torch.Tensor:
    """
    Inverse real 2-D DFT of a (K*n, h, w//2+1, 2) spectrum into h x w x K x n logits.
    """
    coefficients = torch.view_as_complex(spectrum) * _spectrum_scale(h, w, decay, spectrum.dtype)
    planes = torch.fft.irfft2(coefficients, s=(h, w), norm='ortho')
    return planes.permute(1, 2, 0).reshape(h, w, K, n)


def logits_to_spectrum(logits: torch.Tensor, decay: bool = False) -> torch.Tensor:
    """Forward counterpart of spectrum_to_logits."""
    h, w, K, n = logits.shape
    planes = logits.reshape(h, w, K * n).permute(2, 0, 1)
    coefficients = torch.fft.rfft2(planes, norm='ortho') / _spectrum_scale(h, w, decay, logits.dtype)
    return torch.view_as_real(coefficients).contiguous()


def optimize_fourier(net: DiagnosisNet, sample: MultiRaterSample,
                     hyper: DFGTHyper) -> Tuple[ExpertnessMap, List[float]]:
    """Optimize the real spectrum of the logits; the zero spectrum is uniform expertness."""
    hyper.validate()
    problem = _Problem(net, sample)
    h, w, K, n = sample.h, sample.w, sample.K, sample.n
    spectrum = torch.zeros((K * n, h, w // 2 + 1, 2), dtype=problem.dtype, requires_grad=True)

    def logits() -> torch.Tensor:
        return spectrum_to_logits(spectrum, h, w, K, n, hyper.fourier_decay)

    best, trace = _descend(problem, [spectrum], logits, hyper)
    return normalize_expertness(ExpertnessLogits(best)), trace


class ExpertnessGenerator(nn.Module):
    """
    ExpG: a four-layer coordinate network mapping each (y, x) in [-1, 1]^2
    to K*n expertness logits, applied at every pixel with 1x1 convolutions.

    The output layer starts at zero so the first generated map is uniform.
    """

    def __init__(self, K: int, n: int, hidden: int = 64):
        super().__init__()
        self.K = K
        self.n = n
        self.layers = nn.Sequential(
            nn.Conv2d(2, hidden, 1), nn.Tanh(),
            nn.Conv2d(hidden, hidden, 1), nn.Tanh(),
            nn.Conv2d(hidden, hidden, 1), nn.Tanh(),
            nn.Conv2d(hidden, K * n, 1))
        nn.init.zeros_(self.layers[-1].weight)
        nn.init.zeros_(self.layers[-1].bias)

    def forward(self, coordinates: torch.Tensor) -> torch.Tensor:
        """(1, 2, h, w) coordinates -> h x w x K x n logits."""
        out = self.layers(coordinates)[0]
        h, w = out.shape[1:]
        return out.permute(1, 2, 0).reshape(h, w, self.K, self.n)


def coordinate_grid(h: int, w: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(1, 2, h, w) grid of row and column coordinates normalised to [-1, 1]."""
    ys = torch.linspace(-1.0, 1.0, h, dtype=dtype)
    xs = torch.linspace(-1.0, 1.0, w, dtype=dtype)
    grid_y, grid_x = torch.meshgrid(ys, xs, indexing='ij')
    return torch.stack([grid_y, grid_x]).unsqueeze(0)


def build_generator(K: int, n: int, hyper: DFGTHyper, key: str,
                    dtype: torch.dtype = torch.float32) -> ExpertnessGenerator:
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(hyper.seed, key))
        generator = ExpertnessGenerator(K, n, hyper.expg_hidden)
    return generator.to(dtype)


def optimize_expg(net: DiagnosisNet, sample: MultiRaterSample,
                  hyper: DFGTHyper) -> Tuple[ExpertnessMap, ExpertnessGenerator, List[float]]:
    """
    Optimize a fresh expertness generator for one sample.

    Returns:
        (generated expertness map, trained generator, loss trace)
    """
    hyper.validate()
    problem = _Problem(net, sample)
    generator = build_generator(sample.K, sample.n, hyper, sample.sample_id, problem.dtype)
    coordinates = coordinate_grid(sample.h, sample.w, problem.dtype)

    best, trace = _descend(problem, list(generator.parameters()), lambda: generator(coordinates), hyper)
    generator.eval()
    return normalize_expertness(ExpertnessLogits(best)), generator, trace


def optimize_expg_shared(net: DiagnosisNet, dataset: Dataset, hyper: DFGTHyper
                         ) -> Tuple[Dict[str, ExpertnessMap], ExpertnessGenerator, Dict[str, List[float]]]:
    """
    Optimize one generator jointly over every sample (mean loss).

    The generator sees coordinates only, so every iterate is a single map
    shared by all samples; each sample keeps the iterate that scored best
    for it. A sample whose loss turns non-finite leaves the joint objective
    and is missing from the returned maps; its trace stops at the step
    before the abort.
    """
    hyper.validate()
    problems = [_Problem(net, sample) for sample in dataset]
    dtype = problems[0].dtype
    generator = build_generator(dataset.K, dataset.n, hyper, 'shared', dtype)
    coordinates = coordinate_grid(dataset.h, dataset.w, dtype)
    images = torch.cat([p.image for p in problems])
    masks = torch.stack([p.masks for p in problems])
    labels = torch.cat([p.label for p in problems])
    optimizer = torch.optim.Adam(generator.parameters(), lr=hyper.step_size, betas=tuple(hyper.betas))

    active = list(range(len(problems)))

    def per_sample(logits: torch.Tensor) -> torch.Tensor:
        fused = fuse_tensor(masks[active], softmax_expertness(logits).unsqueeze(0))
        return diagnosis_loss(net, images[active], fused.permute(0, 3, 1, 2), labels[active], reduction='none')

    traces = {p.sample.sample_id: [] for p in problems}
    best_loss = {sample_id: math.inf for sample_id in traces}
    best_logits: Dict[str, torch.Tensor] = {}

    def keep(losses: torch.Tensor, logits: torch.Tensor, step: int) -> bool:
        dropped = []
        for index, value in zip(active, losses.tolist()):
            sample_id = problems[index].sample.sample_id
            if not math.isfinite(value):
                logger.warning(f"{OptimizationAborted(sample_id, step)}; dropped from the shared generator")
                dropped.append(index)
                continue
            traces[sample_id].append(value)
            if value < best_loss[sample_id]:
                best_loss[sample_id] = value
                best_logits[sample_id] = logits.detach().clone()
        for index in dropped:
            active.remove(index)
            best_logits.pop(problems[index].sample.sample_id, None)
        return bool(dropped)

    for step in range(hyper.steps + 1):
        optimizer.zero_grad()
        logits = generator(coordinates)
        losses = per_sample(logits)
        if keep(losses.detach(), logits, step) and active:
            losses = per_sample(logits)
        if step == hyper.steps or not active:
            break
        losses.mean().backward()
        optimizer.step()

    generator.eval()
    maps = {sample_id: normalize_expertness(ExpertnessLogits(logits.cpu().numpy()))
            for sample_id, logits in best_logits.items()}
    return maps, generator, traces


OPTIMIZERS = {
    'raw': optimize_raw,
    'transrob': optimize_transrob,
    'fourier': optimize_fourier,
    'expg': lambda net, sample, hyper: _drop_generator(optimize_expg(net, sample, hyper)),
}


def _drop_generator(result):
    expertness, _, trace = result
    return expertness, trace


def fuse_for_storage(masks: np.ndarray, expertness: ExpertnessMap, provenance: Provenance) -> FusedLabel:
    """Fuse and project onto the 16-bit grid so the label survives a PNG round trip."""
    masks = np.asarray(masks, dtype=np.float64)
    values = quantize16(fuse(masks, expertness, provenance).values).astype(np.float64)
    values = np.clip(values, masks.min(axis=-1), masks.max(axis=-1))
    return FusedLabel(values, provenance)


@dataclass
class DFGTDataset:
    """Per-sample DF-GT labels of one split, with losses and hyper snapshot."""
    method: str
    hyper: DFGTHyper
    labels: Dict[str, FusedLabel]
    initial_losses: Dict[str, float]
    final_losses: Dict[str, float]
    rater_means: Dict[str, List[float]]
    failed: List[str] = field(default_factory=list)
    source_hash: str = ''
    expertness: Dict[str, ExpertnessMap] = field(default_factory=dict)
    smoothness: Dict[str, float] = field(default_factory=dict)

    @property
    def ids(self) -> List[str]:
        return list(self.labels)

    def __len__(self) -> int:
        return len(self.labels)

    def label(self, sample_id: str) -> FusedLabel:
        return self.labels[sample_id]

    def stack_labels(self, ids: Optional[List[str]] = None) -> np.ndarray:
        """Fused labels as one N x h x w x K array (dataset order by default)."""
        return np.stack([self.labels[sample_id].values for sample_id in (ids or self.ids)])

    def rater_mean_expertness(self) -> np.ndarray:
        """N x n mean expertness of every rater, failed samples excluded."""
        rows = [self.rater_means[sample_id] for sample_id in self.ids if sample_id not in self.failed]
        return np.array(rows, dtype=np.float64)

    def descent_fraction(self) -> float:
        """Fraction of samples whose final loss does not exceed the uniform loss."""
        done = [i for i in self.ids if i not in self.failed]
        if not done:
            return 0.0
        return sum(self.final_losses[i] <= self.initial_losses[i] for i in done) / len(done)

    def mean_smoothness(self) -> float:
        """Mean high-frequency energy of the optimized maps; NaN when none were kept."""
        values = [self.smoothness[i] for i in self.ids if i in self.smoothness]
        return float(np.mean(values)) if values else math.nan

    def check_alignment(self, dataset: Dataset):
        if self.ids != dataset.ids:
            raise ValueError(f"DF-GT labels ({len(self)} samples) do not match dataset "
                             f"'{dataset.split}' ({len(dataset)} samples) sample for sample")

    def check_source(self, dataset: Dataset, hyper: DFGTHyper):
        """
        Raises:
            StaleLabelsError: If the labels were not built from this dataset
                with these optimization settings
        """
        expected = source_hash(dataset, hyper)
        if self.source_hash != expected:
            raise StaleLabelsError(f"DF-GT ({self.method}) labels were built from another dataset or "
                                   f"dfgt config (hash {self.source_hash[:12] or 'missing'}, expected "
                                   f"{expected[:12]}); rerun 'dfgt'")


def source_hash(dataset: Dataset, hyper: DFGTHyper) -> str:
    """Content address of the inputs a DF-GT label set depends on."""
    return config_hash({'dataset': dataset.metadata, 'ids': dataset.ids, 'dfgt': hyper})


def build_dfgt(net: DiagnosisNet, dataset: Dataset, hyper: DFGTHyper) -> DFGTDataset:
    """
    Run the selected optimizer on every sample of a split.

    A sample whose optimization aborts is recorded in `failed` and keeps its
    majority-vote label; the batch continues.
    """
    hyper.validate()
    if not net.frozen:
        raise ValueError("build_dfgt: diagnosis network must be frozen")

    provenance = hyper.provenance
    labels, initial, final, means, expertness, smoothness = {}, {}, {}, {}, {}, {}
    failed: List[str] = []
    shared = None
    if hyper.method == 'expg' and hyper.expg_shared:
        shared_maps, _, shared_traces = optimize_expg_shared(net, dataset, hyper)
        shared = (shared_maps, shared_traces)

    logger.info(f"Optimizing {hyper.method} expertness for {len(dataset)} samples ({hyper.steps} steps each)")
    for index, sample in enumerate(dataset):
        sample_id = sample.sample_id
        try:
            if shared is not None:
                if sample_id not in shared[0]:
                    raise OptimizationAborted(sample_id, len(shared[1][sample_id]))
                weights, trace = shared[0][sample_id], shared[1][sample_id]
            else:
                weights, trace = OPTIMIZERS[hyper.method](net, sample, hyper)
            labels[sample_id] = fuse_for_storage(sample.masks, weights, provenance)
            initial[sample_id] = trace[0]
            final[sample_id] = min(trace)
            means[sample_id] = [float(v) for v in weights.rater_means()]
            expertness[sample_id] = weights
            smoothness[sample_id] = mean_high_freq_energy(weights.weights)
        except OptimizationAborted as e:
            logger.warning(f"{e}; keeping the majority-vote label")
            failed.append(sample_id)
            uniform = uniform_expertness(sample.h, sample.w, sample.K, sample.n)
            labels[sample_id] = fuse_for_storage(sample.masks, uniform, Provenance.MAJORITY_VOTE)
            initial[sample_id] = final[sample_id] = math.nan
            means[sample_id] = [1.0 / sample.n] * sample.n

        pub.sendMessage('sample_optimized', stage='dfgt', sample_id=sample_id, index=index + 1,
                        total=len(dataset), initial_loss=initial[sample_id],
                        final_loss=final[sample_id], failed=sample_id in failed)
        logger.debug(f"{sample_id}: loss {initial[sample_id]:.4f} -> {final[sample_id]:.4f}")

    result = DFGTDataset(hyper.method, hyper, labels, initial, final, means, failed,
                         source_hash(dataset, hyper),
                         expertness, smoothness)
    if failed:
        logger.warning(f"{len(failed)} of {len(dataset)} samples failed to optimize")
    logger.info(f"DF-GT ({hyper.method}): {result.descent_fraction():.1%} of samples at or below the uniform loss")
    return result


def fused_file_name(sample_id: str, structure: int) -> str:
    return f"{sample_id}_s{structure}.png"


def _json_float(value: float):
    return None if math.isnan(value) else value


def save_dfgt(dfgt: DFGTDataset, path: str):
    """
    Write fused labels as 16-bit PNGs plus a JSON manifest recording the
    method, hyper snapshot and per-sample losses. The manifest is written
    last.
    """
    os.makedirs(path, exist_ok=True)
    samples = []
    for sample_id, label in dfgt.labels.items():
        for k in range(label.values.shape[2]):
            write_mask_png(label.values[:, :, k], os.path.join(path, fused_file_name(sample_id, k)))
        samples.append({
            'id': sample_id,
            'provenance': label.provenance.value,
            'initial_loss': _json_float(dfgt.initial_losses[sample_id]),
            'final_loss': _json_float(dfgt.final_losses[sample_id]),
            'rater_means': dfgt.rater_means[sample_id],
            'smoothness': dfgt.smoothness.get(sample_id),
            'failed': sample_id in dfgt.failed
        })
    manifest = {
        'version': FORMAT_VERSION,
        'method': dfgt.method,
        'hyper': dfgt.hyper.to_dict(),
        'hyper_hash': config_hash(dfgt.hyper),
        'source_hash': dfgt.source_hash,
        'K': int(next(iter(dfgt.labels.values())).values.shape[2]),
        'samples': samples
    }
    _write_json_atomic(manifest, os.path.join(path, DFGT_MANIFEST))
    logger.info(f"Saved {len(dfgt)} DF-GT labels to {path}")


def load_dfgt(path: str) -> DFGTDataset:
    """
    Read a DF-GT directory written by save_dfgt.

    Raises:
        DatasetFormatError: If the manifest or a label file is missing or malformed
    """
    manifest_path = os.path.join(path, DFGT_MANIFEST)
    if not os.path.isfile(manifest_path):
        raise DatasetFormatError(f"{path}: missing {DFGT_MANIFEST}")
    try:
        with open(manifest_path, 'r', encoding='utf-8') as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{manifest_path}: invalid JSON ({e})")
    if manifest.get('version') != FORMAT_VERSION:
        raise DatasetFormatError(f"{manifest_path}: unsupported version {manifest.get('version')}")
    hyper = DFGTHyper.from_dict(manifest['hyper'])
    if manifest.get('hyper_hash') != config_hash(hyper):
        raise DatasetFormatError(f"{manifest_path}: hyper snapshot does not match its recorded hash")

    labels, initial, final, means, smoothness, failed = {}, {}, {}, {}, {}, []
    for entry in manifest['samples']:
        sample_id = entry['id']
        planes = []
        for k in range(manifest['K']):
            plane_path = os.path.join(path, fused_file_name(sample_id, k))
            if not os.path.isfile(plane_path):
                raise DatasetFormatError(f"{path}: missing fused label {fused_file_name(sample_id, k)}")
            planes.append(read_mask_png(plane_path))
        labels[sample_id] = FusedLabel(np.stack(planes, axis=-1), Provenance(entry['provenance']))
        initial[sample_id] = math.nan if entry['initial_loss'] is None else entry['initial_loss']
        final[sample_id] = math.nan if entry['final_loss'] is None else entry['final_loss']
        means[sample_id] = entry['rater_means']
        if entry.get('smoothness') is not None:
            smoothness[sample_id] = entry['smoothness']
        if entry['failed']:
            failed.append(sample_id)

    return DFGTDataset(manifest['method'], hyper, labels,
                       initial, final, means, failed, manifest.get('source_hash', ''),
                       smoothness=smoothness)
