"""Depth-event visual odometry: semi-dense mapping from depth and event-based 6-DoF tracking."""
from .errors import DevoError, TrackingLost
from .evaluation import Trajectory, ate, rpe
from .geometry import ExtrinsicCalib, PinholeCamera, PoseSE3

__version__ = "0.1.0"

__all__ = ["DevoError", "TrackingLost", "Trajectory", "ate", "rpe", "ExtrinsicCalib",
           "PinholeCamera", "PoseSE3", "__version__"]
