"""Multi-dataset object detection with dataset-conditioned object queries."""

__version__ = "0.1.0"
