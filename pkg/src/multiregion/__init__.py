"""Multi-region object detection on precomputed feature maps."""

__version__ = "0.1.0"
