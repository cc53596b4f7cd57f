import os
import sys

import numpy as np
import pytest

# Add project root to Python path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.core.data import Dataset, SyntheticSpec, write_synthetic
from src.core.numerics import TrainConfig


@pytest.fixture
def small_config():
    return TrainConfig(epochs=2, batch_size=16, learning_rate=0.05, margin=0.2, margin_mode='hinge',
                       embed_dim=4, trunk_widths=(8,), embedder_hidden=6, seed=7)


@pytest.fixture
def prototype_dir(tmp_path):
    """Two-segment Prototype data written to disk: (manifest_path, manifest, datasets)."""
    spec = SyntheticSpec(n_per_class=12, n_segments=2, input_dim=8, noise_sigma=0.1, seed=11)
    return write_synthetic(tmp_path / 'data', spec)


def make_dataset(segment_id, features, labels, mask=None):
    features = np.asarray(features, dtype=np.float32)
    if mask is None:
        mask = np.ones(features.shape, dtype=bool)
    return Dataset(segment_id, features, np.asarray(mask, dtype=bool), np.asarray(labels, dtype=np.int32))


@pytest.fixture(scope='session')
def xor_store(tmp_path_factory):
    """Xor hierarchy trained once per session: two designated leaves, two noise leaves; returns (manifest, store)."""
    from src.core.hierarchy import train_bottom_up

    spec = SyntheticSpec(n_per_class=200, n_segments=4, input_dim=16, noise_sigma=0.05, mode='xor', seed=21)
    _, manifest, _ = write_synthetic(tmp_path_factory.mktemp('xor'), spec)
    config = TrainConfig(epochs=30, batch_size=64, learning_rate=0.05, margin=0.1, margin_mode='hinge',
                         embed_dim=8, seed=5)
    return manifest, train_bottom_up(manifest, config)
