"""NDT LiDAR odometry with pose-graph optimization, registration uncertainty,
skyplot-based urbanization and positioning-error evaluation."""

__version__ = "0.1.0"

from .geometry import Pose6D, compose, edge_error, invert, transform_points  # noqa: E402
from .kernels import BACKEND  # noqa: E402

__all__ = ["__version__", "BACKEND", "Pose6D", "compose", "edge_error", "invert",
           "transform_points"]
