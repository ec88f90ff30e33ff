import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from advopt.models import ClassifierSpec, init_classifier


def rel_err(approx, exact, floor=1e-10):
    """Max-norm relative error with a floor for near-zero references."""
    approx = np.asarray(approx)
    exact = np.asarray(exact)
    return np.abs(approx - exact).max() / max(np.abs(exact).max(), floor)


@pytest.fixture
def tiny_conv_spec():
    """Small conv net on 8x8 inputs: ~660 parameters."""
    return ClassifierSpec(
        layers=(("conv", 4, 3, 1), ("relu",), ("maxpool", 2), ("flatten",),
                ("dense", 16), ("relu",), ("dense", 3)),
        input_shape=(1, 8, 8),
        num_classes=3,
    )


@pytest.fixture
def tiny_dense_spec():
    """Flatten + two dense layers on 2x3 inputs."""
    return ClassifierSpec(
        layers=(("flatten",), ("dense", 5), ("relu",), ("dense", 4)),
        input_shape=(1, 2, 3),
        num_classes=4,
    )


@pytest.fixture
def identity_spec():
    """Flatten-only model: the logits are the input."""
    return ClassifierSpec(layers=(("flatten",),), input_shape=(2, 1, 1), num_classes=2)


def make_weights(spec, seed=0):
    return init_classifier(spec, seed)
