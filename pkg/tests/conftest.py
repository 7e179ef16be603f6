import numpy as np
import pytest

from localforensics.dataio import SynthParams, synth_dataset
from localforensics.model import ArchConfig

TINY_ARCH = ArchConfig(input_size=48, conv_channels=(4, 6, 6, 8, 8, 8, 10, 10))


@pytest.fixture(scope="session")
def tiny_synth(tmp_path_factory):
    """8 real + 8 fake images at 48 px."""
    root = tmp_path_factory.mktemp("synth")
    return synth_dataset(SynthParams(count=8, size=48, seed=3), root)


@pytest.fixture(scope="session")
def tiny_split(tmp_path_factory):
    root = tmp_path_factory.mktemp("split")
    tr = synth_dataset(SynthParams(count=12, size=48, seed=10), root / "train")
    va = synth_dataset(SynthParams(count=6, size=48, seed=11), root / "val")
    return tr, va


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
