"""Pinhole projection and plan-view coordinate helpers.

Conventions used throughout the package:

* yaw is counterclockwise-positive, 0 means facing +Y of the frame, and is
  always normalized to [0, 2*pi);
* the camera frame has X to the right and Y forward (Y is the depth);
* the world frame has x east and y north.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Literal, Optional

import numpy as np

TWO_PI = 2.0 * math.pi

# camera mount height above the ground plane, meters
CAMERA_HEIGHT_M = 1.5
# corners closer than this to the image plane are clamped before projection
_MIN_CORNER_DEPTH = 0.1
# relative slack on the FoV boundary so edge objects are kept despite rounding
_FOV_EPS = 1e-9

Frame = Literal["camera", "travel", "north_up", "world"]
ObjectClass = Literal["vehicle", "pedestrian"]


class FrameError(ValueError):
    pass


def wrap_angle(a: float) -> float:
    """Map an angle to [0, 2*pi)."""
    r = math.fmod(a, TWO_PI)
    if r < 0.0:
        r += TWO_PI
    if r >= TWO_PI:
        r = 0.0
    return r


@dataclass(frozen=True)
class CameraIntrinsics:
    focal_length_px: float
    image_width_px: int
    image_height_px: int
    hfov_deg: float

    @classmethod
    def from_fov(cls, width_px: int = 1920, height_px: int = 1080,
                 hfov_deg: float = 60.0) -> "CameraIntrinsics":
        return cls(focal_from_fov(width_px, hfov_deg), width_px, height_px, hfov_deg)


@dataclass(frozen=True)
class Detection2D:
    object_class: str
    u_min: float
    v_min: float
    u_max: float
    v_max: float
    x_center_offset: float


@dataclass(frozen=True)
class Estimate3D:
    depth_m: float
    local_yaw_rad: float
    length_m: float
    width_m: float
    height_m: float

    def as_list(self) -> list[float]:
        return [self.depth_m, self.local_yaw_rad, self.length_m, self.width_m, self.height_m]


@dataclass(frozen=True)
class PlanPose:
    x_m: float
    y_m: float
    yaw_rad: float
    frame: str = "camera"


def focal_from_fov(width_px: float, hfov_deg: float) -> float:
    if not width_px > 0:
        raise ValueError(f"image width must be positive, got {width_px}")
    if not 0.0 < hfov_deg < 180.0:
        raise ValueError(f"horizontal FoV must lie in (0, 180) degrees, got {hfov_deg}")
    return (width_px / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)


def local_to_global_yaw(local_yaw_rad: float, x_center_offset: float,
                        focal_length_px: float) -> float:
    """Yaw in the camera frame from the yaw relative to the viewing ray."""
    if not focal_length_px > 0:
        raise ValueError("focal length must be positive")
    return wrap_angle(local_yaw_rad - math.atan(x_center_offset / focal_length_px))


def plan_location(depth_m: float, x_center_offset: float,
                  focal_length_px: float) -> tuple[float, float]:
    if not depth_m > 0:
        raise ValueError("depth must be positive")
    if not focal_length_px > 0:
        raise ValueError("focal length must be positive")
    return depth_m * x_center_offset / focal_length_px, depth_m


def box_corners(pose: PlanPose, length_m: float, width_m: float) -> np.ndarray:
    """Four footprint corners, shape (4, 2).

    Order before rotation is (+w/2, +l/2), (+w/2, -l/2), (-w/2, -l/2), (-w/2, +l/2),
    which walks the rectangle clockwise.
    """
    if not (length_m > 0 and width_m > 0):
        raise ValueError("box dimensions must be positive")
    return corners_xy(pose.x_m, pose.y_m, pose.yaw_rad, length_m, width_m)


_CORNER_SIGNS = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, -1.0], [-1.0, 1.0]])


def corners_xy(x: float, y: float, yaw: float, length: float, width: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    half = _CORNER_SIGNS * (0.5 * width, 0.5 * length)
    out = np.empty((4, 2))
    out[:, 0] = x + c * half[:, 0] - s * half[:, 1]
    out[:, 1] = y + s * half[:, 0] + c * half[:, 1]
    return out


def heading_vectors(yaw: float) -> tuple[tuple[float, float], tuple[float, float]]:
    """(forward, right) unit vectors of a body with the given yaw."""
    c, s = math.cos(yaw), math.sin(yaw)
    return (-s, c), (c, s)


def world_to_camera(obj: PlanPose, ego: PlanPose) -> PlanPose:
    """Express a world-frame pose in the camera frame of the ego."""
    (fx, fy), (rx, ry) = heading_vectors(ego.yaw_rad)
    dx, dy = obj.x_m - ego.x_m, obj.y_m - ego.y_m
    return PlanPose(dx * rx + dy * ry, dx * fx + dy * fy,
                    wrap_angle(obj.yaw_rad - ego.yaw_rad), "camera")


def to_frame(pose: PlanPose, ego_world_pose: PlanPose, target: str) -> PlanPose:
    if pose.frame != "camera":
        raise FrameError(f"expected a camera-frame pose, got frame={pose.frame!r}")
    if ego_world_pose.frame != "world":
        raise FrameError(f"expected a world-frame ego pose, got frame={ego_world_pose.frame!r}")
    if target == "travel":
        return replace(pose, frame="travel")
    if target in ("north_up", "north"):
        (fx, fy), (rx, ry) = heading_vectors(ego_world_pose.yaw_rad)
        x = pose.x_m * rx + pose.y_m * fx
        y = pose.x_m * ry + pose.y_m * fy
        return PlanPose(x, y, wrap_angle(pose.yaw_rad + ego_world_pose.yaw_rad), "north_up")
    raise FrameError(f"unknown target frame {target!r}")


def from_frame(pose: PlanPose, ego_world_pose: PlanPose) -> PlanPose:
    """Inverse of :func:`to_frame`, back to the camera frame."""
    if pose.frame == "travel":
        return replace(pose, frame="camera")
    if pose.frame == "north_up":
        (fx, fy), (rx, ry) = heading_vectors(ego_world_pose.yaw_rad)
        return PlanPose(pose.x_m * rx + pose.y_m * ry, pose.x_m * fx + pose.y_m * fy,
                        wrap_angle(pose.yaw_rad - ego_world_pose.yaw_rad), "camera")
    raise FrameError(f"cannot invert frame {pose.frame!r}")


def in_fov(x_m: float, y_m: float, intr: CameraIntrinsics) -> bool:
    if y_m <= 0.0:
        return False
    x_px = intr.focal_length_px * x_m / y_m
    return abs(x_px) <= intr.image_width_px / 2.0 * (1.0 + _FOV_EPS)


def project_to_camera(
    object_world_pose: PlanPose,
    dims: tuple[float, float, float],
    ego_world_pose: PlanPose,
    intr: CameraIntrinsics,
    object_class: str = "vehicle",
) -> Optional[tuple[Detection2D, Estimate3D]]:
    """Ground-truth detection and 3D estimate of an object, or None if unseen."""
    length, width, height = dims
    if not (length > 0 and width > 0 and height > 0):
        raise ValueError("dims must be positive")
    cam = world_to_camera(object_world_pose, ego_world_pose)
    if not in_fov(cam.x_m, cam.y_m, intr):
        return None
    return camera_measurement(cam, dims, intr, object_class)


def camera_measurement(cam: PlanPose, dims: tuple[float, float, float],
                       intr: CameraIntrinsics, object_class: str) -> tuple[Detection2D, Estimate3D]:
    """Detection and estimate for a camera-frame pose already known to be in view."""
    length, width, height = dims
    f = intr.focal_length_px
    x_off = f * cam.x_m / cam.y_m
    local_yaw = wrap_angle(cam.yaw_rad + math.atan(x_off / f))
    det = detection_box(cam, dims, intr, object_class, x_off)
    return det, Estimate3D(cam.y_m, local_yaw, length, width, height)


def detection_box(cam: PlanPose, dims: tuple[float, float, float], intr: CameraIntrinsics,
                  object_class: str, x_off: float) -> Detection2D:
    length, width, height = dims
    f = intr.focal_length_px
    xy = corners_xy(cam.x_m, cam.y_m, cam.yaw_rad, length, width)
    depth = np.maximum(xy[:, 1], _MIN_CORNER_DEPTH)
    u = intr.image_width_px / 2.0 + f * xy[:, 0] / depth
    # ground and roof corners share plan coordinates
    v_ground = intr.image_height_px / 2.0 + f * CAMERA_HEIGHT_M / depth
    v_roof = intr.image_height_px / 2.0 + f * (CAMERA_HEIGHT_M - height) / depth
    w, h = intr.image_width_px, intr.image_height_px
    u_min = min(max(float(u.min()), 0.0), w)
    u_max = min(max(float(u.max()), 0.0), w)
    v_min = min(max(float(v_roof.min()), 0.0), h)
    v_max = min(max(float(v_ground.max()), 0.0), h)
    return Detection2D(object_class, u_min, v_min, u_max, v_max, x_off)
