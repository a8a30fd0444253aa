# utils.py: Helper functions and constants shared by every pipeline stage.

import hashlib
import logging
import random
import sys
from typing import Any, Optional

import bencodepy
import numpy as np
import torch

# Constants for the diagnosis-first pipeline
FORMAT_VERSION = 1
DEFAULT_THRESHOLDS = (0.1, 0.3, 0.5, 0.7, 0.9)
FUSION_METHODS = ('majority_vote', 'dfgt_raw', 'dfgt_transrob', 'dfgt_fourier', 'dfgt_expg')
DFGT_METHODS = ('raw', 'transrob', 'fourier', 'expg')


def sha1_hash(data: bytes) -> bytes:
    """Compute SHA1 hash of data."""
    return hashlib.sha1(data).digest()


def _canonical(obj: Any) -> Any:
    """Map a config value onto types bencode can carry."""
    if isinstance(obj, dict):
        return {str(key): _canonical(value) for key, value in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canonical(value) for value in obj]
    if isinstance(obj, (set, frozenset)):
        return [_canonical(value) for value in sorted(obj)]
    if isinstance(obj, bool):
        return int(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return repr(float(obj))
    if obj is None:
        return ''
    if hasattr(obj, 'to_dict'):
        return _canonical(obj.to_dict())
    return str(obj)


def config_hash(obj: Any) -> str:
    """
    Content address of a configuration.

    The canonical form is bencoded (keys sorted by the encoder) and hashed.

    Args:
        obj: dict, dataclass-like object with to_dict(), or plain value

    Returns:
        Hex SHA1 digest
    """
    return sha1_hash(bencodepy.encode(_canonical(obj))).hex()


def derive_seed(seed: int, key: str) -> int:
    """Derive an order-independent 32-bit seed from a base seed and a key."""
    digest = sha1_hash(f"{seed}:{key}".encode('utf-8'))
    return int.from_bytes(digest[:4], 'big')


def seed_everything(seed: int):
    """Seed python, numpy and torch and request deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def parameter_hash(module: torch.nn.Module) -> str:
    """Hash every parameter and buffer of a module (state_dict order)."""
    h = hashlib.sha1()
    for name, tensor in module.state_dict().items():
        h.update(name.encode('utf-8'))
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def setup_logging(level: str = "INFO", log_file: Optional[str] = None):
    """
    Setup logging configuration.

    Args:
        level: Logging level (DEBUG, INFO, WARNING, ERROR)
        log_file: Optional log file path
    """
    log_format = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

    handlers = [logging.StreamHandler(sys.stdout)]

    if log_file:
        handlers.append(logging.FileHandler(log_file))

    logging.basicConfig(
        level=getattr(logging, level.upper()),
        format=log_format,
        handlers=handlers,
        force=True
    )


def format_time(seconds: float) -> str:
    """Format a duration in human readable form."""
    if seconds < 60:
        return f"{seconds:.0f}s"
    elif seconds < 3600:
        minutes = int(seconds // 60)
        secs = int(seconds % 60)
        return f"{minutes}m {secs:02d}s"
    hours = int(seconds // 3600)
    minutes = int((seconds % 3600) // 60)
    return f"{hours}h {minutes:02d}m"
