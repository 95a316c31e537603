"""kvcapture: emit GKVT attention traces from Hugging Face decoder models."""

from .capture import CaptureConfig, UnsupportedArchitectureError, batch_capture, capture

__all__ = ["CaptureConfig", "UnsupportedArchitectureError", "batch_capture", "capture"]
