"""Visual re-localization against a landmark map with per-landmark
observation constraints."""

from .errors import OcrelocError
from .geometry import PinholeCamera, Pose, pose_error
from .mapping import ImageRecord, LandmarkMap, Track, build_map
from .pipeline import LocalizationResult, LocalizerConfig, localize_query

__version__ = "0.1.0"

__all__ = [
    "ImageRecord",
    "LandmarkMap",
    "LocalizationResult",
    "LocalizerConfig",
    "OcrelocError",
    "PinholeCamera",
    "Pose",
    "Track",
    "build_map",
    "localize_query",
    "pose_error",
]
