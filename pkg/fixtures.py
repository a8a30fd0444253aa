# fixtures.py: Small, cached datasets and networks shared by the test scripts.

import copy
from functools import lru_cache
from typing import Dict

import numpy as np

import diagnet
from dataset import Dataset, MultiRaterSample
from synthgen import SynthSpec, generate_dataset


def small_spec(seed: int = 0, train: int = 32, test: int = 16) -> SynthSpec:
    """A 32 x 32 benchmark with the default four raters."""
    return SynthSpec(train_count=train, val_count=0, test_count=test, h=32, w=32,
                     disc_radius_range=(6.0, 9.0), center_jitter_px=1.5, seed=seed)


@lru_cache(maxsize=None)
def small_splits(seed: int = 0) -> Dict[str, Dataset]:
    return generate_dataset(small_spec(seed))


@lru_cache(maxsize=None)
def trained_diagnet(seed: int = 0) -> diagnet.DiagnosisNet:
    """Diagnosis net overfit on the small training split (frozen)."""
    train = small_splits(seed)['train']
    net = diagnet.build(diagnet.DiagConfig(seed=seed), train)
    net, _ = diagnet.pretrain(net, train, diagnet.DiagHyper(epochs=40, batch_size=8,
                                                            learning_rate=1e-3, seed=seed))
    return net


def double_copy(net: diagnet.DiagnosisNet) -> diagnet.DiagnosisNet:
    """Float64 copy of a frozen network, for gradient checks."""
    return copy.deepcopy(net).double()


def random_sample(sample_id: str = 's0', h: int = 16, w: int = 16, K: int = 2, n: int = 3,
                  label: int = 1, seed: int = 0) -> MultiRaterSample:
    rng = np.random.default_rng(seed)
    return MultiRaterSample(sample_id, rng.uniform(size=(h, w, 1)), rng.uniform(size=(h, w, K, n)), label)


def identical_rater_sample(sample: MultiRaterSample, sample_id: str = None) -> MultiRaterSample:
    """Copy of a sample whose raters all repeat the first rater's masks."""
    masks = np.repeat(sample.masks[..., :1], sample.n, axis=-1)
    return MultiRaterSample(sample_id or sample.sample_id, sample.image, masks, sample.label)


def run_tests(namespace: Dict) -> int:
    """Run every test_* function in a module namespace; returns the failure count."""
    tests = [(name, fn) for name, fn in namespace.items() if name.startswith('test_') and callable(fn)]
    failures = 0
    for name, fn in tests:
        try:
            fn()
            print(f"✓ {name}")
        except Exception as e:
            failures += 1
            print(f"✗ {name}: {type(e).__name__}: {e}")
    print(f"\n{len(tests) - failures}/{len(tests)} tests passed")
    return failures
