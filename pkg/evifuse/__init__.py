"""Multi-evidence pseudo-label fusion for weakly supervised object detection and segmentation."""

__version__ = "0.1.1"
