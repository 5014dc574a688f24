"""Semantic lidar odometry with parameterized semantic features."""

__version__ = "0.1.0"

from .exceptions import PSFLOError  # noqa: E402
from .extraction import PSFExtractor  # noqa: E402
from .gef import GeFExtractor  # noqa: E402
from .geometry import Pose  # noqa: E402
from .odometry import PSFLidarOdometry  # noqa: E402
from .psf_matching import PSFMatcher  # noqa: E402
from .tracking import DynamicObjectClassifier  # noqa: E402

__all__ = [
    "DynamicObjectClassifier",
    "GeFExtractor",
    "PSFExtractor",
    "PSFLOError",
    "PSFLidarOdometry",
    "PSFMatcher",
    "Pose",
    "__version__",
]
