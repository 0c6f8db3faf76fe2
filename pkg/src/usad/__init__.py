"""Statistics-conditioned diffusion augmentation and split-attention HAR classification."""

__version__ = "0.1.0"
