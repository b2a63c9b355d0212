"""Streaming test-time adaptation harness for object detection channels.

Routes frames between a night specialist and a scheduled multi-detector
ensemble, adapts a calibration head online against an EMA teacher, and
scores everything with a COCO-style evaluator. Detector backbones are
replaced by pluggable detection channels (files or seeded simulators).
"""

from .geometry import Box, Detection, area, clip_box, iou
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = [
    "Box",
    "Detection",
    "area",
    "clip_box",
    "iou",
    "KERNEL_BACKEND",
    "__version__",
]
