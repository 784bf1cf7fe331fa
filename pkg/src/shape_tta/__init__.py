"""Shape-guided test-time adaptation of batchnorm parameters for segmentation."""

__version__ = "0.1.0"
