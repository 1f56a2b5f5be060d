"""Network alignment with graph convolutional encoders and an adversarial domain classifier."""

__version__ = "0.1.0"
