import numpy as np
import pytest

from bitswitcher.data import synthetic_dataset, synthetic_prototypes
from bitswitcher.supernet import NetSpec, SuperNet
from bitswitcher.tensor import RngStreams

TINY_SPEC = NetSpec(input_shape=(1, 8, 8), stem_channels=4, layers=((4, 2), (8, 1)), classes=3, bits=(4, 3, 2))


@pytest.fixture
def streams():
    return RngStreams(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_data():
    """Train and test splits of an easy 3-class task on 8x8 images."""
    rng = RngStreams(7).get("data")
    prototypes = synthetic_prototypes(rng, 3, (8, 8))
    train = synthetic_dataset(rng, 3, 48, noise=0.1, prototypes=prototypes)
    test = synthetic_dataset(rng, 3, 30, noise=0.1, prototypes=prototypes)
    return train, test


@pytest.fixture
def tiny_net(tiny_data):
    """A calibrated two-layer super-network for 8x8 inputs."""
    net = SuperNet(TINY_SPEC, RngStreams(0).get("init"))
    net.calibrate(tiny_data[0].images[:16])
    return net


@pytest.fixture
def reference_net():
    return SuperNet.reference(bits=(4, 3, 2), seed=0)
