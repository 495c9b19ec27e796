"""Shared fixtures: synthetic classifiable datasets and small trained models.

Unit tests run the real architectures on synthetic data so they stay
fast and need no dataset files; the acceptance suite drives the real
benchmark artifacts.
"""

import numpy as np
import pytest

from wbmark.data import DatasetSplit
from wbmark.models import BENCHMARKS, TrainConfig, train_baseline


def make_synthetic(n: int, seed: int, shape=(1, 28, 28), n_classes: int = 10,
                   noise: float = 0.25, template_seed: int = 999) -> DatasetSplit:
    """Classifiable synthetic split: one fixed random template per class.

    Templates depend only on template_seed, so splits drawn with
    different sampling seeds share the same class structure.
    """
    templates = np.random.default_rng(template_seed).standard_normal(
        (n_classes, *shape)).astype(np.float32)
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, n_classes, size=n)
    images = templates[labels] + noise * rng.standard_normal((n, *shape)).astype(np.float32)
    return DatasetSplit(images.astype(np.float32), labels.astype(np.int64))


@pytest.fixture(scope="session")
def synth_train():
    return make_synthetic(1024, seed=10)


@pytest.fixture(scope="session")
def synth_test():
    return make_synthetic(256, seed=11)


@pytest.fixture(scope="session")
def synth_base(synth_train, synth_test):
    """bm1_mlp trained briefly on the synthetic task."""
    cfg = TrainConfig(epochs=4, batch_size=128, seed=3)
    ckpt = train_baseline(BENCHMARKS[1], synth_train, synth_test, cfg)
    assert ckpt.meta["final_accuracy"] > 0.9
    return ckpt
