"""Drone trajectory processing: georeferencing, smoothing, de-duplication,
surrogate safety measures, conflict analytics and movement matching."""

from .model import (CLASSES, MV_CLASSES, VRU_CLASSES, OrientedBoxState, TrackTable, Trajectory,
                    mean_confidence, net_displacement, trajectory_duration)

__version__ = "0.1.0"

__all__ = ["CLASSES", "MV_CLASSES", "VRU_CLASSES", "OrientedBoxState", "TrackTable", "Trajectory",
           "mean_confidence", "net_displacement", "trajectory_duration", "__version__"]
