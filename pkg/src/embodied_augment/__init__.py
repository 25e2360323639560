"""World-aware instruction augmentation and closed-loop evaluation for embodied planners."""

from .core import ACTION_GRAMMAR, ActionRecord, Category, Observation, Step, Trajectory, load_trajectories
from .templates import CognitiveDimension

__version__ = "0.1.0"

__all__ = [
    "ACTION_GRAMMAR",
    "ActionRecord",
    "Category",
    "CognitiveDimension",
    "Observation",
    "Step",
    "Trajectory",
    "load_trajectories",
    "__version__",
]
