"""Monocular plan-view driving: geometry, rasterization, simulation, sensing, policies and benchmarks."""

from .actions import ALL_ACTIONS, Action
from .geometry import CameraIntrinsics, Detection2D, Estimate3D, PlanPose
from .raster import GridSpec, PlanViewImage, render_plan_view
from .world import WorldState, make_scenario

__version__ = "0.1.0"

__all__ = [
    "Action", "ALL_ACTIONS", "CameraIntrinsics", "Detection2D", "Estimate3D", "PlanPose",
    "GridSpec", "PlanViewImage", "render_plan_view", "WorldState", "make_scenario",
]
