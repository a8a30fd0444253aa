# checkpoint.py: Versioned, self-describing checkpoint container for networks.

import logging
import os
from typing import Dict, Optional

import torch

CHECKPOINT_FORMAT = 'diff-desk-checkpoint'
CHECKPOINT_VERSION = 1

logger = logging.getLogger("Checkpoint")


class CheckpointError(ValueError):
    """Raised when a checkpoint file is missing, foreign or of another kind."""


def save_checkpoint(path: str, kind: str, config: Dict, state_dict: Dict,
                    seed: int, extra: Optional[Dict] = None):
    """
    Write a checkpoint holding architecture config, weights and seed.

    Args:
        path: Output file
        kind: Network kind ('diagnet' or 'tgseg')
        config: Architecture config as a plain dict
        state_dict: Module state dict
        seed: Initialisation seed
        extra: Optional additional plain-data fields
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    container = {
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'kind': kind,
        'config': config,
        'seed': int(seed),
        'state_dict': {name: tensor.detach().cpu().clone() for name, tensor in state_dict.items()},
        'extra': extra or {}
    }
    torch.save(container, path)
    logger.info(f"Saved {kind} checkpoint to {path}")


def load_checkpoint(path: str, kind: str) -> Dict:
    """
    Read and check a checkpoint container.

    Raises:
        CheckpointError: If the file is missing, not a checkpoint, of an
            unsupported version or of another kind
    """
    if not os.path.isfile(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        container = torch.load(path, map_location='cpu', weights_only=True)
    except Exception as e:
        raise CheckpointError(f"{path}: unreadable checkpoint ({e})")

    if not isinstance(container, dict) or container.get('format') != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if container.get('version') != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {container.get('version')}")
    if container.get('kind') != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {container.get('kind')}")
    return container
