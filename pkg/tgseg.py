"""
Take-and-Give Segmentation Network

A residual encoder-decoder bridged to the frozen diagnosis network. At a
connected block k:

    Give:  f^_d = MLP(Attention(f_se + E, f_d + E, f_d))
    Take:  f_sd(k-1) = Deconv(MLP(Attention(f^_d + E, f_sd + E, f_sd)))

where f_se, f_d and f_sd are encoder, diagnosis and decoder features cut
into flattened P x P patches and E is a fixed 2-D sinusoidal encoding of
the patch grid. Unconnected blocks upsample with a plain Deconv. Encoder
skips are concatenated after the Deconv.

The diagnosis network expects image (+) mask; its mask channels receive
the stop-gradient output of a coarse auxiliary head on the encoder (or
zeros).

Author: DiFF Desk Toolkit
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pubsub import pub

from checkpoint import load_checkpoint, save_checkpoint
from dataset import Dataset, TrainHistory
from diagnet import DiagConfig, DiagnosisNet, ResidualBlock, _dtype, images_to_tensor
from diagnet import build as build_diagnet
from dfgt import DFGTDataset

MASK_SOURCES = ('coarse', 'zeros')
SKIP_MODES = ('after_deconv', 'none')

logger = logging.getLogger("TGSegNet")


@dataclass
class SegConfig:
    """Architecture of the segmentation network."""
    image_channels: int = 1
    structures: int = 2
    height: int = 64
    width: int = 64
    widths: Tuple[int, ...] = (16, 32, 64, 128)
    connected_blocks: Tuple[int, ...] = (1, 2, 3)
    heads: int = 4
    max_patches: int = 64
    mask_source: str = 'coarse'
    skip: str = 'after_deconv'
    seed: int = 0

    @property
    def block_count(self) -> int:
        return len(self.widths)

    def block_size(self, block: int) -> Tuple[int, int]:
        return self.height >> block, self.width >> block

    def validate(self):
        if self.image_channels < 1 or self.structures < 1:
            raise ValueError("seg config: image_channels and structures must be >= 1")
        if not self.widths or min(self.widths) < 1:
            raise ValueError("seg config: widths must be positive")
        stride = 2 ** self.block_count
        if self.height % stride or self.width % stride:
            raise ValueError(f"seg config: {self.height}x{self.width} not divisible by {stride}")
        for block in self.connected_blocks:
            if not 1 <= block <= self.block_count:
                raise ValueError(f"seg config: connected block B{block} outside B1..B{self.block_count}")
        if self.heads < 1:
            raise ValueError("seg config: heads must be >= 1")
        if self.mask_source not in MASK_SOURCES:
            raise ValueError(f"seg config: mask_source must be one of {MASK_SOURCES}")
        if self.skip not in SKIP_MODES:
            raise ValueError(f"seg config: skip must be one of {SKIP_MODES}")
        for block in self.connected_blocks:
            H, W = self.block_size(block)
            P = patch_size_for(H, W, self.max_patches)
            if (P * P * self.widths[block - 1]) % self.heads:
                raise ValueError(f"seg config: {self.heads} heads do not divide B{block} patch width")

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['widths'] = list(self.widths)
        data['connected_blocks'] = sorted(self.connected_blocks)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'SegConfig':
        data = dict(data)
        for key in ('widths', 'connected_blocks'):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass
class SegHyper:
    """Training schedule (BCE against the soft DF-GT, Adam)."""
    epochs: int = 80
    batch_size: int = 16
    learning_rate: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    seed: int = 0

    def validate(self):
        if self.epochs < 0:
            raise ValueError("seg hyper: epochs must be >= 0")
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("seg hyper: batch_size and learning_rate must be positive")

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['betas'] = list(self.betas)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'SegHyper':
        data = dict(data)
        if 'betas' in data:
            data['betas'] = tuple(data['betas'])
        return cls(**data)


# ---------------------------------------------------------------------------
# Patch sequences
# ---------------------------------------------------------------------------

def patch_size_for(H: int, W: int, max_patches: int = 64) -> int:
    """Smallest patch size dividing H and W that yields at most max_patches patches."""
    for P in range(1, min(H, W) + 1):
        if H % P == 0 and W % P == 0 and (H // P) * (W // P) <= max_patches:
            return P
    raise ValueError(f"no patch size splits {H}x{W} into at most {max_patches} patches")


def patchify(feature: torch.Tensor, P: int) -> torch.Tensor:
    """
    Cut a (..., H, W, C) channel-last grid into row-major P x P patches.

    Returns:
        (..., N, P*P*C) sequence, N = HW / P^2
    """
    H, W, C = feature.shape[-3:]
    if P < 1 or H % P or W % P:
        raise ValueError(f"patchify: patch size {P} does not divide {H}x{W}")
    lead = feature.shape[:-3]
    x = feature.reshape(*lead, H // P, P, W // P, P, C).transpose(-4, -3)
    return x.reshape(*lead, (H // P) * (W // P), P * P * C)


def unpatchify(sequence: torch.Tensor, H: int, W: int, P: int) -> torch.Tensor:
    """Inverse of patchify: (..., N, P*P*C) -> (..., H, W, C)."""
    N, width = sequence.shape[-2:]
    if H % P or W % P or N != (H // P) * (W // P) or width % (P * P):
        raise ValueError(f"unpatchify: {N} x {width} sequence does not tile {H}x{W} with P={P}")
    C = width // (P * P)
    lead = sequence.shape[:-2]
    x = sequence.reshape(*lead, H // P, W // P, P, P, C).transpose(-4, -3)
    return x.reshape(*lead, H, W, C)


def _axis_encoding(positions: torch.Tensor, dims: int) -> torch.Tensor:
    index = torch.arange(dims, dtype=torch.float64)
    frequency = 1.0 / (10000.0 ** (2.0 * torch.div(index, 2, rounding_mode='floor') / max(dims, 1)))
    angles = positions[:, None] * frequency[None, :]
    return torch.where(index.long() % 2 == 0, torch.sin(angles), torch.cos(angles))


def positional_encoding(H: int, W: int, C: int, P: int) -> torch.Tensor:
    """
    Fixed 2-D sinusoidal encoding of the patch grid.

    The first half of the P*P*C dimensions encodes the patch row, the
    second half the patch column.

    Returns:
        (N, P*P*C) float64 tensor with values in [-1, 1]
    """
    if P < 1 or H % P or W % P:
        raise ValueError(f"positional_encoding: patch size {P} does not divide {H}x{W}")
    rows, cols = H // P, W // P
    width = P * P * C
    row_dims = width - width // 2
    grid_y, grid_x = torch.meshgrid(torch.arange(rows, dtype=torch.float64),
                                    torch.arange(cols, dtype=torch.float64), indexing='ij')
    encoding = [_axis_encoding(grid_y.reshape(-1), row_dims)]
    if width // 2:
        encoding.append(_axis_encoding(grid_x.reshape(-1), width // 2))
    return torch.cat(encoding, dim=1)


def grid_to_sequence(feature: torch.Tensor, P: int) -> torch.Tensor:
    """(B, C, H, W) feature map -> (B, N, P*P*C) patch sequence."""
    return patchify(feature.permute(0, 2, 3, 1), P)


def sequence_to_grid(sequence: torch.Tensor, H: int, W: int, P: int) -> torch.Tensor:
    return unpatchify(sequence, H, W, P).permute(0, 3, 1, 2)


# ---------------------------------------------------------------------------
# Give / Take modules
# ---------------------------------------------------------------------------

class PatchAttention(nn.Module):
    """Multi-head cross attention over patch sequences, scaled by sqrt(P*P*C)."""

    def __init__(self, width: int, heads: int = 4):
        super().__init__()
        if width % heads:
            raise ValueError(f"attention: {heads} heads do not divide width {width}")
        self.width = width
        self.heads = heads
        self.query = nn.Linear(width, width)
        self.key = nn.Linear(width, width)
        self.value = nn.Linear(width, width)
        self.merge = nn.Linear(width, width)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        *lead, N, _ = x.shape
        return x.reshape(*lead, N, self.heads, self.width // self.heads).transpose(-3, -2)

    def _check(self, *sequences: torch.Tensor):
        for seq in sequences:
            if seq.shape[-1] != self.width:
                raise ValueError(f"attention: sequence width {seq.shape[-1]} != {self.width}")

    def affinity(self, query_seq: torch.Tensor, key_seq: torch.Tensor) -> torch.Tensor:
        """Affinity weights, shape (..., heads, N_query, N_key); rows sum to 1."""
        self._check(query_seq, key_seq)
        q = self._split(self.query(query_seq))
        k = self._split(self.key(key_seq))
        return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.width), dim=-1)

    def forward(self, query_seq: torch.Tensor, key_seq: torch.Tensor,
                value_seq: torch.Tensor) -> torch.Tensor:
        self._check(value_seq)
        if key_seq.shape[-2] != value_seq.shape[-2]:
            raise ValueError(f"attention: {key_seq.shape[-2]} keys for {value_seq.shape[-2]} values")
        a = self.affinity(query_seq, key_seq)
        out = a @ self._split(self.value(value_seq))
        *lead, heads, N, head_width = out.shape
        return self.merge(out.transpose(-3, -2).reshape(*lead, N, heads * head_width))


def attention(query_seq: torch.Tensor, key_seq: torch.Tensor, value_seq: torch.Tensor,
              params: PatchAttention) -> torch.Tensor:
    return params(query_seq, key_seq, value_seq)


class PatchMLP(nn.Module):
    """GELU(f W1) W2, bias free."""

    def __init__(self, width: int, hidden: Optional[int] = None):
        super().__init__()
        self.fc1 = nn.Linear(width, hidden or width, bias=False)
        self.fc2 = nn.Linear(hidden or width, width, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class GiveModule(nn.Module):
    """Encoder features select diagnosis features."""

    def __init__(self, width: int, heads: int = 4):
        super().__init__()
        self.attention = PatchAttention(width, heads)
        self.mlp = PatchMLP(width)

    def forward(self, f_se: torch.Tensor, f_d: torch.Tensor,
                e_se: torch.Tensor, e_d: torch.Tensor) -> torch.Tensor:
        if f_se.shape != f_d.shape:
            raise ValueError(f"give: encoder {tuple(f_se.shape)} and diagnosis {tuple(f_d.shape)} differ")
        return self.mlp(self.attention(f_se + e_se, f_d + e_d, f_d))


class TakeModule(nn.Module):
    """Transformed diagnosis features query the decoder; the result is upsampled x2."""

    def __init__(self, channels: int, out_channels: int, patch: int, heads: int = 4):
        super().__init__()
        self.patch = patch
        self.attention = PatchAttention(patch * patch * channels, heads)
        self.mlp = PatchMLP(patch * patch * channels)
        self.deconv = nn.ConvTranspose2d(channels, out_channels, 2, stride=2)

    def attend(self, f_hat_d: torch.Tensor, f_sd_seq: torch.Tensor,
               e_d: torch.Tensor, e_sd: torch.Tensor) -> torch.Tensor:
        if f_hat_d.shape != f_sd_seq.shape:
            raise ValueError(f"take: diagnosis {tuple(f_hat_d.shape)} and decoder {tuple(f_sd_seq.shape)} differ")
        return self.attention(f_hat_d + e_d, f_sd_seq + e_sd, f_sd_seq)

    def forward(self, f_hat_d: torch.Tensor, f_sd: torch.Tensor,
                e_d: torch.Tensor, e_sd: torch.Tensor) -> torch.Tensor:
        """(B, N, P*P*C) diagnosis sequence and (B, C, H, W) decoder map -> (B, C', 2H, 2W)."""
        H, W = f_sd.shape[-2:]
        bridged = self.mlp(self.attend(f_hat_d, grid_to_sequence(f_sd, self.patch), e_d, e_sd))
        return self.deconv(sequence_to_grid(bridged, H, W, self.patch))


def give_module(f_se: torch.Tensor, f_d: torch.Tensor, params: GiveModule,
                e_se: Optional[torch.Tensor] = None, e_d: Optional[torch.Tensor] = None) -> torch.Tensor:
    e_se = torch.zeros_like(f_se) if e_se is None else e_se
    e_d = torch.zeros_like(f_d) if e_d is None else e_d
    return params(f_se, f_d, e_se, e_d)


def take_module(f_hat_d: torch.Tensor, f_sd: torch.Tensor, params: TakeModule,
                e_d: Optional[torch.Tensor] = None, e_sd: Optional[torch.Tensor] = None) -> torch.Tensor:
    e_d = torch.zeros_like(f_hat_d) if e_d is None else e_d
    e_sd = torch.zeros_like(f_hat_d) if e_sd is None else e_sd
    return params(f_hat_d, f_sd, e_d, e_sd)


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

class TGSegNet(nn.Module):
    """Encoder-decoder with Give/Take bridges to a frozen diagnosis network."""

    def __init__(self, config: SegConfig, diagnosis: DiagnosisNet):
        super().__init__()
        config.validate()
        if not diagnosis.frozen:
            raise ValueError("TGSegNet: diagnosis network must be frozen")
        dconf = diagnosis.config
        if (dconf.image_channels, dconf.structures) != (config.image_channels, config.structures):
            raise ValueError("TGSegNet: diagnosis network channels differ from the segmentation config")
        if dconf.block_count != config.block_count:
            raise ValueError(f"TGSegNet: diagnosis net has {dconf.block_count} blocks, "
                             f"segmentation net {config.block_count}")

        self.config = config
        self.connected = tuple(sorted(set(config.connected_blocks)))
        self.diagnosis = diagnosis
        widths = list(config.widths)
        channels = [config.image_channels] + widths
        self.encoder = nn.ModuleList(ResidualBlock(channels[i], channels[i + 1])
                                     for i in range(config.block_count))
        self.aux_head = nn.Conv2d(widths[min(1, len(widths) - 1)], config.structures, 1)

        self.patches: Dict[int, int] = {}
        self.project_se = nn.ModuleDict()
        self.project_d = nn.ModuleDict()
        self.project_sd = nn.ModuleDict()
        self.gives = nn.ModuleDict()
        self.takes = nn.ModuleDict()
        self.deconvs = nn.ModuleDict()
        self.merges = nn.ModuleDict()

        for block in range(config.block_count, 0, -1):
            key = str(block)
            C = widths[block - 1]
            out = widths[block - 2] if block > 1 else widths[0]
            if block in self.connected:
                H, W = config.block_size(block)
                P = patch_size_for(H, W, config.max_patches)
                self.patches[block] = P
                self.project_se[key] = nn.Conv2d(C, C, 1)
                self.project_d[key] = nn.Conv2d(dconf.widths[block - 1], C, 1)
                self.project_sd[key] = nn.Conv2d(C, C, 1)
                self.gives[key] = GiveModule(P * P * C, config.heads)
                self.takes[key] = TakeModule(C, out, P, config.heads)
                self.register_buffer(f"encoding_{block}", positional_encoding(H, W, C, P).float(),
                                     persistent=False)
            else:
                self.deconvs[key] = nn.ConvTranspose2d(C, out, 2, stride=2)
            skip = widths[block - 2] if block > 1 and config.skip == 'after_deconv' else 0
            self.merges[key] = nn.Conv2d(out + skip, out, 3, padding=1)

        self.head = nn.Conv2d(widths[0], config.structures, 1)
        self.act = nn.SiLU()

    def train(self, mode: bool = True):
        super().train(mode)
        self.diagnosis.eval()
        return self

    def encoding(self, block: int) -> torch.Tensor:
        return getattr(self, f"encoding_{block}")

    def forward(self, images: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Args:
            images: (B, c, h, w)

        Returns:
            (segmentation logits, coarse auxiliary logits), each (B, K, h, w)
        """
        config = self.config
        if images.dim() != 4 or tuple(images.shape[1:]) != (config.image_channels, config.height, config.width):
            raise ValueError(f"TGSegNet expects (B, {config.image_channels}, {config.height}, {config.width}) "
                             f"images, got {tuple(images.shape)}")

        encoded = []
        x = images
        for block in self.encoder:
            x = block(x)
            encoded.append(x)

        coarse = F.interpolate(self.aux_head(encoded[min(1, len(encoded) - 1)]),
                               size=images.shape[-2:], mode='bilinear', align_corners=False)
        if config.mask_source == 'coarse':
            mask = torch.sigmoid(coarse).detach()
        else:
            mask = torch.zeros_like(coarse)
        with torch.no_grad():
            diagnosis = self.diagnosis.features(images, mask)

        d = encoded[-1]
        for block in range(config.block_count, 0, -1):
            key = str(block)
            if block in self.connected:
                P = self.patches[block]
                E = self.encoding(block)
                f_se = grid_to_sequence(self.project_se[key](encoded[block - 1]), P)
                f_d = grid_to_sequence(self.project_d[key](diagnosis[block - 1]), P)
                f_hat_d = self.gives[key](f_se, f_d, E, E)
                up = self.takes[key](f_hat_d, self.project_sd[key](d), E, E)
            else:
                up = self.deconvs[key](d)
            if block > 1 and config.skip == 'after_deconv':
                up = torch.cat([up, encoded[block - 2]], dim=1)
            d = self.act(self.merges[key](up))

        return self.head(d), coarse


def build(config: SegConfig, diagnosis: DiagnosisNet) -> TGSegNet:
    """Create a segmentation network deterministically from config.seed."""
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        net = TGSegNet(config, diagnosis)
    net.to(_dtype(diagnosis))
    logger.debug(f"Built TGSegNet with bridges {list(net.connected)} and patches {net.patches}")
    return net


def _targets(dfgt: DFGTDataset, dataset: Dataset, dtype: torch.dtype) -> torch.Tensor:
    dfgt.check_alignment(dataset)
    return images_to_tensor(dfgt.stack_labels(dataset.ids), dtype)


def segmentation_loss(net: TGSegNet, images: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """
    Pixelwise BCE of the main head plus an equally weighted auxiliary BCE on
    the coarse head. The coarse head produces the mask the frozen diagnosis
    network reads, so it is supervised by the same soft DF-GT target.
    """
    logits, coarse = net(images)
    return (F.binary_cross_entropy_with_logits(logits, targets)
            + F.binary_cross_entropy_with_logits(coarse, targets))


def train(net: TGSegNet, dfgt: DFGTDataset, dataset: Dataset,
          hyper: SegHyper) -> Tuple[TGSegNet, TrainHistory]:
    """
    Train end-to-end on soft DF-GT targets; the diagnosis network stays frozen.

    Raises:
        ValueError: If DF-GT sample ids do not match the dataset
    """
    hyper.validate()
    dtype = _dtype(net)
    targets = _targets(dfgt, dataset, dtype)
    history = TrainHistory('tgseg')
    if hyper.epochs == 0:
        return net, history

    images = images_to_tensor(dataset.stack_images(), dtype)
    trainable = [p for p in net.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(trainable, lr=hyper.learning_rate, betas=tuple(hyper.betas))
    generator = torch.Generator().manual_seed(hyper.seed)
    count = len(dataset)

    net.train()
    for epoch in range(hyper.epochs):
        order = torch.randperm(count, generator=generator)
        total = 0.0
        for start in range(0, count, hyper.batch_size):
            index = order[start:start + hyper.batch_size]
            loss = segmentation_loss(net, images[index], targets[index])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(index)

        mean_loss = total / count
        entry = history.record(mean_loss)
        pub.sendMessage('epoch_completed', stage='tgseg', epoch=entry.epoch,
                        total=hyper.epochs, loss=mean_loss)
        logger.debug(f"tgseg epoch {entry.epoch}/{hyper.epochs}: loss {mean_loss:.4f}")

    net.eval()
    logger.info(f"Trained TGSegNet for {hyper.epochs} epochs, final loss {history.losses[-1]:.4f}")
    return net, history


def predict(net: TGSegNet, image: np.ndarray) -> np.ndarray:
    """Per-structure probability map (h x w x K) for one h x w x c image."""
    return predict_batch(net, np.asarray(image)[None])[0]


def predict_batch(net: TGSegNet, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """N x h x w x K probability maps for N x h x w x c images."""
    was_training = net.training
    net.eval()
    outputs = []
    dtype = _dtype(net)
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            logits, _ = net(images_to_tensor(images[start:start + batch_size], dtype))
            outputs.append(torch.sigmoid(logits).permute(0, 2, 3, 1).cpu().numpy())
    net.train(was_training)
    return np.concatenate(outputs).astype(np.float64)


def predict_dataset(net: TGSegNet, dataset: Dataset, batch_size: int = 16) -> np.ndarray:
    return predict_batch(net, dataset.stack_images(), batch_size)


def save_tgseg(net: TGSegNet, path: str):
    """Checkpoint the whole network, frozen diagnosis weights included."""
    save_checkpoint(path, 'tgseg', net.config.to_dict(), net.state_dict(), net.config.seed,
                    {'diagnosis': net.diagnosis.config.to_dict()})


def load_tgseg(path: str) -> TGSegNet:
    container = load_checkpoint(path, 'tgseg')
    diagnosis = build_diagnet(DiagConfig.from_dict(container['extra']['diagnosis'])).freeze()
    net = build(SegConfig.from_dict(container['config']), diagnosis)
    net.load_state_dict(container['state_dict'])
    net.eval()
    return net
