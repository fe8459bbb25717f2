"""Uncertainty-aware few-shot fault diagnosis on vibration signals.

The package combines signal-level augmentation, metric and
self-supervised feature learning, a meta-learned Bayesian quadratic
classifier, and a Dirichlet-network sample filter into one episodic
evaluation pipeline.
"""

from .errors import UBMFError

__version__ = "0.1.0"

__all__ = ["UBMFError", "__version__"]
