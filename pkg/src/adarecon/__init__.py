"""Diffusion-based anomaly detection with per-sample adaptive restart steps."""

__version__ = "0.1.0"

from .estimator import AdaptiveDiffusionDetector, DetectionResult  # noqa: E402
from .reconstruction import StepSearchConfig, reconstruct  # noqa: E402
from .schedule import NoiseSchedule, default_schedule, make_schedule  # noqa: E402

__all__ = [
    "AdaptiveDiffusionDetector",
    "DetectionResult",
    "NoiseSchedule",
    "StepSearchConfig",
    "default_schedule",
    "make_schedule",
    "reconstruct",
]
