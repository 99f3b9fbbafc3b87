import pytest

from perfcnn.data import synthetic_shapes
from perfcnn.network import Network, TrainState, sgd_finetune, toy_two_conv


@pytest.fixture(scope="session")
def trained_two_conv():
    """A briefly trained two-conv net and 128 of its training images."""
    ds = synthetic_shapes(600, size=12, channels=2, classes=4, seed=1, jitter=1.5)
    net = Network(toy_two_conv(), seed=0)
    sgd_finetune(net, ds.images, ds.labels, 10, TrainState(lr=0.02, seed=0))
    return net, ds.images[:128], ds.labels[:128]
