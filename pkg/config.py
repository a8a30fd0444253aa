"""
Run Configuration

One JSON file drives every pipeline stage. Sections map onto the stage
dataclasses; the global seed is pushed into every nested seed and the
image geometry of the synthetic benchmark into both networks.

Author: DiFF Desk Toolkit
"""

import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, Iterable, Optional, Tuple

from dfgt import DFGTHyper
from diagnet import DiagConfig, DiagHyper
from evaluate import EvalConfig
from synthgen import SynthSpec
from tgseg import SegConfig, SegHyper
from utils import config_hash

CONFIG_VERSION = 1
TOP_LEVEL_KEYS = ('version', 'seed', 'paths', 'synth', 'diag', 'dfgt', 'seg', 'eval')


class ConfigError(ValueError):
    """Raised when a run configuration cannot be loaded or is invalid."""


def history_path(checkpoint: str) -> str:
    """Training history written beside a checkpoint: `net.pt` -> `net_history.json`."""
    return f"{os.path.splitext(checkpoint)[0]}_history.json"


@dataclass
class Paths:
    """Stage artifact locations; relative paths resolve against the config file."""
    dataset_dir: str = 'runs/data'
    checkpoint_dir: str = 'runs/checkpoints'
    report_dir: str = 'runs/report'

    def resolve(self, base_dir: str) -> 'Paths':
        return Paths(*(os.path.normpath(os.path.join(base_dir, value))
                       for value in (self.dataset_dir, self.checkpoint_dir, self.report_dir)))

    @property
    def diagnet(self) -> str:
        return os.path.join(self.checkpoint_dir, 'diagnet.pt')

    @property
    def diagnet_history(self) -> str:
        return history_path(self.diagnet)

    def dfgt_dir(self, method: str) -> str:
        return os.path.join(self.checkpoint_dir, f"dfgt_{method}")

    @property
    def tgseg(self) -> str:
        return os.path.join(self.checkpoint_dir, 'tgseg.pt')

    @property
    def tgseg_history(self) -> str:
        return history_path(self.tgseg)

    @property
    def report(self) -> str:
        return os.path.join(self.report_dir, 'eval_report.txt')


def _field_names(cls) -> Tuple[str, ...]:
    return tuple(f.name for f in fields(cls) if f.name != 'seed')


DIAG_ARCH_KEYS = ('widths',)
SEG_ARCH_KEYS = ('widths', 'connected_blocks', 'heads', 'max_patches', 'mask_source', 'skip')


@dataclass
class RunConfig:
    """Everything one pipeline run depends on."""
    seed: int = 0
    paths: Paths = field(default_factory=Paths)
    synth: SynthSpec = field(default_factory=SynthSpec)
    diag: DiagConfig = field(default_factory=DiagConfig)
    diag_hyper: DiagHyper = field(default_factory=DiagHyper)
    dfgt: DFGTHyper = field(default_factory=DFGTHyper)
    seg: SegConfig = field(default_factory=SegConfig)
    seg_hyper: SegHyper = field(default_factory=SegHyper)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def propagate(self) -> 'RunConfig':
        """Push the global seed and the benchmark geometry into every section."""
        for section in (self.synth, self.diag, self.diag_hyper, self.dfgt, self.seg, self.seg_hyper, self.eval):
            section.seed = self.seed
        self.diag.image_channels = self.seg.image_channels = self.synth.c
        self.diag.structures = self.seg.structures = self.synth.K
        self.seg.height, self.seg.width = self.synth.h, self.synth.w
        return self

    def validate(self):
        """
        Raises:
            ConfigError: If any section is invalid
        """
        for name, section in (('synth', self.synth), ('diag', self.diag), ('diag', self.diag_hyper),
                              ('dfgt', self.dfgt), ('seg', self.seg), ('seg', self.seg_hyper),
                              ('eval', self.eval)):
            try:
                section.validate()
            except ValueError as e:
                raise ConfigError(f"[{name}] {e}")

    def to_dict(self) -> Dict:
        synth = self.synth.to_dict()
        synth.pop('seed')
        diag = {key: value for key, value in self.diag_hyper.to_dict().items() if key != 'seed'}
        diag['widths'] = list(self.diag.widths)
        seg = {key: value for key, value in self.seg_hyper.to_dict().items() if key != 'seed'}
        seg.update({key: value for key, value in self.seg.to_dict().items() if key in SEG_ARCH_KEYS})
        return {
            'version': CONFIG_VERSION,
            'seed': self.seed,
            'paths': asdict(self.paths),
            'synth': synth,
            'diag': diag,
            'dfgt': {key: value for key, value in self.dfgt.to_dict().items() if key != 'seed'},
            'seg': seg,
            'eval': {key: value for key, value in self.eval.to_dict().items() if key != 'seed'},
        }

    def section_hash(self, *names: str) -> str:
        """Content address of the named sections plus the global seed."""
        data = self.to_dict()
        return config_hash({'seed': self.seed, **{name: data[name] for name in names}})


def _check_keys(section: str, data: Dict, allowed: Iterable[str]):
    if not isinstance(data, dict):
        raise ConfigError(f"[{section}] must be an object")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(unknown)}")


def config_from_dict(data: Dict) -> RunConfig:
    """
    Build and validate a RunConfig from its JSON form.

    Raises:
        ConfigError: On unknown keys, wrong version or invalid values
    """
    _check_keys('config', data, TOP_LEVEL_KEYS)
    if data.get('version', CONFIG_VERSION) != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {data.get('version')}")

    sections = {name: data.get(name, {}) for name in TOP_LEVEL_KEYS[2:]}
    _check_keys('paths', sections['paths'], _field_names(Paths))
    _check_keys('synth', sections['synth'], _field_names(SynthSpec))
    _check_keys('diag', sections['diag'], _field_names(DiagHyper) + DIAG_ARCH_KEYS)
    _check_keys('dfgt', sections['dfgt'], _field_names(DFGTHyper))
    _check_keys('seg', sections['seg'], _field_names(SegHyper) + SEG_ARCH_KEYS)
    _check_keys('eval', sections['eval'], _field_names(EvalConfig))

    diag = sections['diag']
    seg = sections['seg']
    try:
        config = RunConfig(
            seed=int(data.get('seed', 0)),
            paths=Paths(**sections['paths']),
            synth=SynthSpec.from_dict(sections['synth']),
            diag=DiagConfig.from_dict({k: v for k, v in diag.items() if k in DIAG_ARCH_KEYS}),
            diag_hyper=DiagHyper.from_dict({k: v for k, v in diag.items() if k not in DIAG_ARCH_KEYS}),
            dfgt=DFGTHyper.from_dict(sections['dfgt']),
            seg=SegConfig.from_dict({k: v for k, v in seg.items() if k in SEG_ARCH_KEYS}),
            seg_hyper=SegHyper.from_dict({k: v for k, v in seg.items() if k not in SEG_ARCH_KEYS}),
            eval=EvalConfig.from_dict(sections['eval']))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid config: {e}")

    config.propagate()
    config.validate()
    return config


def load_config(path: str) -> RunConfig:
    """
    Load a JSON run configuration; relative paths resolve against its directory.

    Raises:
        ConfigError: If the file is unreadable or invalid
    """
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})")

    config = config_from_dict(data)
    config.paths = config.paths.resolve(os.path.dirname(os.path.abspath(path)))
    return config


def save_config(config: RunConfig, path: str):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
        f.write('\n')


def parse_blocks(text: str) -> Tuple[int, ...]:
    """
    Parse a connected-block set such as "B1,B2,B3", "{1,2}" or "none".

    Raises:
        ConfigError: On malformed input
    """
    cleaned = text.strip().strip('{}[]()').strip()
    if cleaned.lower() in ('', 'none'):
        return ()
    blocks = []
    for part in cleaned.split(','):
        token = part.strip().upper().lstrip('B')
        if not token.isdigit():
            raise ConfigError(f"invalid block '{part.strip()}' in --blocks {text!r}")
        blocks.append(int(token))
    return tuple(sorted(set(blocks)))


def apply_overrides(config: RunConfig, seed: Optional[int] = None, method: Optional[str] = None,
                    blocks: Optional[str] = None) -> RunConfig:
    """Apply command-line overrides, re-propagate and re-validate."""
    if seed is not None:
        config.seed = seed
    if method is not None:
        config.dfgt.method = method
    if blocks is not None:
        config.seg.connected_blocks = parse_blocks(blocks)
    config.propagate()
    config.validate()
    return config
