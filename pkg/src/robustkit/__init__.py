"""Fast adversarial training toolkit: attacks, robust training, evaluation."""

__version__ = "0.1.0"
