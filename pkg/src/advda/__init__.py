"""Adversarial training with logit-space domain adaptation, at desk scale."""

__version__ = "0.1.0"

from advda.tensor import Tensor, backward, no_grad  # noqa: F401
