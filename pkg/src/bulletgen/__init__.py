"""Dynamic Gaussian-splat reconstruction with generated-view augmentation."""

__version__ = "0.1.0"
