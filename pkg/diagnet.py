"""
Segmentation-Assisted Diagnosis Network

A residual CNN fed with the concatenation of the raw image and a soft
segmentation mask. It is pretrained on majority-vote masks, then frozen;
the frozen network supplies the diagnosis loss, its gradient with respect
to expertness logits, and per-block features for the Give Modules.

Author: DiFF Desk Toolkit
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pubsub import pub

from checkpoint import load_checkpoint, save_checkpoint
from dataset import Dataset, TrainHistory
from fusion import ExpertnessLogits, fuse_tensor, majority_vote, softmax_expertness

logger = logging.getLogger("DiagnosisNet")


class NumericalError(ArithmeticError):
    """Raised when a loss becomes non-finite; carries diagnostics."""

    def __init__(self, message: str, diagnostics: Optional[Dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class DiagConfig:
    """Architecture of the diagnosis network."""
    image_channels: int = 1
    structures: int = 2
    widths: Tuple[int, ...] = (16, 32, 64, 128)
    seed: int = 0

    @property
    def in_channels(self) -> int:
        return self.image_channels + self.structures

    @property
    def block_count(self) -> int:
        return len(self.widths)

    def validate(self):
        if self.image_channels < 1 or self.structures < 1:
            raise ValueError("diag config: image_channels and structures must be >= 1")
        if not self.widths or min(self.widths) < 1:
            raise ValueError("diag config: widths must be positive")

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['widths'] = list(self.widths)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'DiagConfig':
        data = dict(data)
        if 'widths' in data:
            data['widths'] = tuple(data['widths'])
        return cls(**data)


@dataclass
class DiagHyper:
    """Pretraining schedule."""
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    seed: int = 0

    def validate(self):
        if self.epochs < 0:
            raise ValueError("diag hyper: epochs must be >= 0")
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("diag hyper: batch_size and learning_rate must be positive")

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['betas'] = list(self.betas)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'DiagHyper':
        data = dict(data)
        if 'betas' in data:
            data['betas'] = tuple(data['betas'])
        return cls(**data)


class ResidualBlock(nn.Module):
    """Two 3x3 convolutions with a strided 1x1 shortcut; halves the spatial size."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 2):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.shortcut = nn.Conv2d(in_channels, out_channels, 1, stride=stride)
        self.act = nn.SiLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.conv2(self.act(self.conv1(x))) + self.shortcut(x))


class DiagnosisNet(nn.Module):
    """
    Residual classifier over image (+) mask.

    Blocks B1..BB each halve the spatial size; global average pooling
    feeds a single-logit head.
    """

    def __init__(self, config: DiagConfig):
        super().__init__()
        self.frozen = False
        self.config = config
        channels = [config.in_channels] + list(config.widths)
        self.blocks = nn.ModuleList(
            ResidualBlock(channels[i], channels[i + 1]) for i in range(config.block_count))
        self.head = nn.Linear(config.widths[-1], 1)

    def train(self, mode: bool = True):
        return super().train(mode and not self.frozen)

    def freeze(self) -> 'DiagnosisNet':
        """Stop all parameter updates for good."""
        for parameter in self.parameters():
            parameter.requires_grad_(False)
        self.frozen = True
        self.eval()
        return self

    def _input(self, images: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        x = torch.cat([images, masks], dim=1)
        if x.shape[1] != self.config.in_channels:
            raise ValueError(f"diagnosis net expects {self.config.in_channels} input channels "
                             f"(image {self.config.image_channels} + mask {self.config.structures}), "
                             f"got {images.shape[1]} + {masks.shape[1]}")
        return x

    def features(self, images: torch.Tensor, masks: torch.Tensor) -> List[torch.Tensor]:
        """Per-block outputs, each (B, C_k, H / 2^k, W / 2^k)."""
        x = self._input(images, masks)
        outputs = []
        for block in self.blocks:
            x = block(x)
            outputs.append(x)
        return outputs

    def forward(self, images: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        """Disease logits, shape (B,)."""
        x = self.features(images, masks)[-1]
        return self.head(x.mean(dim=(2, 3))).squeeze(1)


def _dtype(net: nn.Module) -> torch.dtype:
    return next(net.parameters()).dtype


def images_to_tensor(images: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """N x h x w x c (or h x w x c) array -> (N, c, h, w) tensor."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.as_tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)), dtype=dtype)


def build(config: DiagConfig, dataset: Optional[Dataset] = None) -> DiagnosisNet:
    """
    Create a diagnosis network deterministically from config.seed.

    Args:
        config: Architecture config
        dataset: Optional dataset whose channel counts must match

    Raises:
        ValueError: If the config is invalid or does not fit the dataset
    """
    config.validate()
    if dataset is not None:
        check_compatible(config, dataset)
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        net = DiagnosisNet(config)
    logger.debug(f"Built diagnosis net {config.widths} with {config.in_channels} input channels")
    return net


def check_compatible(config: DiagConfig, dataset: Dataset):
    if (config.image_channels, config.structures) != (dataset.c, dataset.K):
        raise ValueError(f"diagnosis net expects c={config.image_channels}, K={config.structures}; "
                         f"dataset has c={dataset.c}, K={dataset.K}")


def diagnosis_loss(net: DiagnosisNet, images: torch.Tensor, masks: torch.Tensor,
                   labels: torch.Tensor, reduction: str = 'mean') -> torch.Tensor:
    """Binary cross entropy of the network's disease probability against labels."""
    return F.binary_cross_entropy_with_logits(net(images, masks), labels, reduction=reduction)


def pretrain(net: DiagnosisNet, dataset: Dataset, hyper: DiagHyper) -> Tuple[DiagnosisNet, TrainHistory]:
    """
    Train on (image, majority-vote mask, label), then freeze.

    Args:
        net: Unfrozen network
        dataset: Training split with both classes present
        hyper: Schedule

    Returns:
        (frozen network, per-epoch loss history)

    Raises:
        ValueError: If the net is frozen, the dataset single-class or
            channel counts disagree
        NumericalError: If an epoch loss becomes non-finite
    """
    hyper.validate()
    if net.frozen:
        raise ValueError("pretrain: network is frozen")
    check_compatible(net.config, dataset)
    labels = dataset.labels
    if len(set(labels.tolist())) < 2:
        raise ValueError("pretrain: training set must contain both classes")

    history = TrainHistory('pretrain')
    if hyper.epochs == 0:
        return net.freeze(), history

    dtype = _dtype(net)
    images = images_to_tensor(dataset.stack_images(), dtype)
    masks = images_to_tensor(np.stack([majority_vote(s.masks).values for s in dataset]), dtype)
    targets = torch.as_tensor(labels, dtype=dtype)

    optimizer = torch.optim.Adam(net.parameters(), lr=hyper.learning_rate, betas=tuple(hyper.betas))
    generator = torch.Generator().manual_seed(hyper.seed)
    count = len(dataset)

    net.train()
    for epoch in range(hyper.epochs):
        order = torch.randperm(count, generator=generator)
        total = 0.0
        for start in range(0, count, hyper.batch_size):
            index = order[start:start + hyper.batch_size]
            loss = diagnosis_loss(net, images[index], masks[index], targets[index])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(index)

        mean_loss = total / count
        if not math.isfinite(mean_loss):
            raise NumericalError(f"pretrain: non-finite loss at epoch {epoch + 1}",
                                 {'epoch': epoch + 1, 'loss': mean_loss})
        entry = history.record(mean_loss)
        pub.sendMessage('epoch_completed', stage='pretrain', epoch=entry.epoch,
                        total=hyper.epochs, loss=mean_loss)
        logger.debug(f"pretrain epoch {entry.epoch}/{hyper.epochs}: loss {mean_loss:.4f}")

    net.freeze()
    logger.info(f"Pretrained diagnosis net for {hyper.epochs} epochs, final loss {history.losses[-1]:.4f}")
    return net, history


def _check_shapes(net: DiagnosisNet, image: np.ndarray, mask: np.ndarray):
    config = net.config
    if image.ndim != 3 or image.shape[2] != config.image_channels:
        raise ValueError(f"image must be h x w x {config.image_channels}, got {image.shape}")
    if mask.ndim != 3 or mask.shape[2] != config.structures or mask.shape[:2] != image.shape[:2]:
        raise ValueError(f"mask must be {image.shape[0]} x {image.shape[1]} x {config.structures}, "
                         f"got {mask.shape}")


def predict(net: DiagnosisNet, image: np.ndarray, mask: np.ndarray) -> float:
    """Disease probability for one image (h x w x c) and soft mask (h x w x K)."""
    image = np.asarray(image)
    mask = np.asarray(mask)
    _check_shapes(net, image, mask)
    dtype = _dtype(net)
    with torch.no_grad():
        logit = net(images_to_tensor(image, dtype), images_to_tensor(mask, dtype))
    return float(torch.sigmoid(logit)[0])


def predict_batch(net: DiagnosisNet, images: np.ndarray, masks: np.ndarray,
                  batch_size: int = 64) -> np.ndarray:
    """Disease probabilities for N images and N soft masks."""
    images = np.asarray(images)
    masks = np.asarray(masks)
    if images.shape[0] != masks.shape[0]:
        raise ValueError(f"predict_batch: {images.shape[0]} images for {masks.shape[0]} masks")
    _check_shapes(net, images[0], masks[0])
    dtype = _dtype(net)
    outputs = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            logits = net(images_to_tensor(images[start:start + batch_size], dtype),
                         images_to_tensor(masks[start:start + batch_size], dtype))
            outputs.append(torch.sigmoid(logits).cpu().numpy())
    return np.concatenate(outputs).astype(np.float64)


def loss_and_grad(net: DiagnosisNet, image: np.ndarray, masks: np.ndarray,
                  logits: ExpertnessLogits, label: int) -> Tuple[float, np.ndarray]:
    """
    Diagnosis loss of a fused mask and its gradient with respect to the logits.

    loss = BCE(predict(image, fuse(masks, softmax(logits))), label); the
    gradient flows through softmax, fusion and the frozen network.

    Args:
        net: Frozen diagnosis network
        image: h x w x c image
        masks: h x w x K x n rater masks
        logits: Expertness logits (h x w x K x n)
        label: Diagnosis label

    Returns:
        (loss, h x w x K x n gradient)

    Raises:
        ValueError: If the net is not frozen or shapes disagree
        NumericalError: If the loss is non-finite
    """
    if not net.frozen:
        raise ValueError("loss_and_grad: network must be frozen")
    masks = np.asarray(masks)
    if masks.shape != logits.values.shape:
        raise ValueError(f"loss_and_grad: masks {masks.shape} and logits {logits.values.shape} differ")
    _check_shapes(net, np.asarray(image), masks[..., 0])

    dtype = _dtype(net)
    logits_t = torch.tensor(logits.values, dtype=dtype, requires_grad=True)
    fused = fuse_tensor(torch.as_tensor(masks, dtype=dtype), softmax_expertness(logits_t))
    loss = diagnosis_loss(net, images_to_tensor(image, dtype),
                          fused.permute(2, 0, 1).unsqueeze(0),
                          torch.tensor([float(label)], dtype=dtype))
    if not torch.isfinite(loss):
        raise NumericalError("loss_and_grad: non-finite diagnosis loss",
                             {'loss': float(loss), 'logit_range': (float(logits.values.min()),
                                                                   float(logits.values.max()))})
    loss.backward()
    return float(loss), logits_t.grad.detach().cpu().numpy().astype(np.float64)


def feature_maps(net: DiagnosisNet, image: np.ndarray, mask: np.ndarray) -> List[np.ndarray]:
    """Per-block feature grids (H_k x W_k x C_k) for one image and mask."""
    image = np.asarray(image)
    mask = np.asarray(mask)
    _check_shapes(net, image, mask)
    dtype = _dtype(net)
    with torch.no_grad():
        features = net.features(images_to_tensor(image, dtype), images_to_tensor(mask, dtype))
    return [f[0].permute(1, 2, 0).cpu().numpy() for f in features]


def save_diagnet(net: DiagnosisNet, path: str):
    save_checkpoint(path, 'diagnet', net.config.to_dict(), net.state_dict(),
                    net.config.seed, {'frozen': net.frozen})


def load_diagnet(path: str) -> DiagnosisNet:
    """Rebuild a diagnosis network from a checkpoint (frozen state restored)."""
    container = load_checkpoint(path, 'diagnet')
    net = build(DiagConfig.from_dict(container['config']))
    net.load_state_dict(container['state_dict'])
    if container['extra'].get('frozen', False):
        net.freeze()
    return net
