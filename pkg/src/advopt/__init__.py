"""Adversarial training toolkit with hand-designed and learned inner maximizers.

The package trains small image classifiers to be robust against
bounded perturbations.  The inner maximization can be solved by
hand-designed optimizers (FGSM, PGD, PGD with backtracking line
search, a margin-loss attack) or by a learned coordinate-wise RNN
optimizer that is co-trained with the classifier.  An evaluation
suite produces robust-accuracy tables, attack trajectories, loss
landscapes, transfer-attack numbers and step-generalization results.
"""

import os

# Tiny matmuls dominate this workload; BLAS threading only adds overhead.
# Respected only if numpy has not been imported yet and the user did not
# set it explicitly.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

from .errors import (  # noqa: E402
    AdvoptError,
    ConfigError,
    DataFormatError,
    DivergenceError,
    NonFiniteError,
    ShapeMismatchError,
)

__version__ = "0.1.0"

__all__ = [
    "AdvoptError",
    "ConfigError",
    "DataFormatError",
    "DivergenceError",
    "NonFiniteError",
    "ShapeMismatchError",
    "__version__",
]
