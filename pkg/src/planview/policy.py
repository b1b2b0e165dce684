"""Action conversion and the policies driven by the rollout loop."""
from __future__ import annotations

import math
import struct
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numba import njit

from .actions import ALL_ACTIONS, LATERAL, LONGITUDINAL, N_ACTIONS, Action
from .geometry import CameraIntrinsics, PlanPose
from .raster import GridSpec, PlanViewImage, render_plan_view
from .sensor import SensedObject, reproject
from .world import EgoControl, WorldState, expert_action

__all__ = [
    "Action", "ALL_ACTIONS", "LATERAL", "LONGITUDINAL", "N_ACTIONS",
    "pid_control", "occupancy_policy", "featurize", "linear_policy_logits",
    "save_weights", "load_weights", "ExpertPolicy", "OccupancyPolicy", "LinearPolicy",
]

TARGET_SPEED = {"fast": 12.0, "slow": 5.0, "stop": 0.0}
THROTTLE_GAIN = 0.25
BRAKE_GAIN = 0.5
STEER_CMD = {"left": -0.5, "straight": 0.0, "right": 0.5}

POOL = 16
SPEED_SCALE = 1.0 / 30.0
YAW_RATE_SCALE = 1.0


class DimensionError(ValueError):
    pass


def pid_control(action: Action, current_speed: float) -> EgoControl:
    if current_speed < 0:
        raise ValueError("speed must be nonnegative")
    target = TARGET_SPEED[action.longitudinal]
    e = target - current_speed
    throttle = min(max(THROTTLE_GAIN * e, 0.0), 1.0) if e > 0 else 0.0
    brake = min(max(-BRAKE_GAIN * e, 0.0), 1.0) if e < 0 else 0.0
    if action.longitudinal == "stop" and current_speed > 2.0:
        brake = 1.0
    return EgoControl(throttle, brake, STEER_CMD[action.lateral])


# ----------------------------------------------------------------- occupancy

CORRIDOR_LENGTH_M = 24.0
CORRIDOR_WIDTH_M = 3.0
CURVATURE = {"left": -0.05, "straight": 0.0, "right": 0.05}
STOP_DIST_M = 8.0
SLOW_DIST_M = 16.0


def _arc_point(k: float, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Point at arc length t on a path leaving the origin heading +y with curvature k (right-positive)."""
    if k == 0.0:
        return np.zeros_like(t), t
    return (1.0 - np.cos(k * t)) / k, np.sin(k * t) / k


@lru_cache(maxsize=8)
def corridor_cells(width_px: int, height_px: int, res: float, lateral: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cells of a travel grid within half the corridor width of an arc; (rows, cols, arc position)."""
    k = CURVATURE[lateral]
    x0, y_top = -width_px * res / 2.0, height_px * res
    reach = CORRIDOR_LENGTH_M + CORRIDOR_WIDTH_M
    j = np.arange(width_px)
    i = np.arange(height_px)
    xc = x0 + (j + 0.5) * res
    yc = y_top - (i + 0.5) * res
    jj = j[np.abs(xc) <= reach]
    ii = i[(yc >= -CORRIDOR_WIDTH_M) & (yc <= reach)]
    X, Y = np.meshgrid(x0 + (jj + 0.5) * res, y_top - (ii + 0.5) * res)
    I, J = np.meshgrid(ii, jj, indexing="ij")
    t = np.arange(0.0, CORRIDOR_LENGTH_M + res / 2, res / 2)
    px, py = _arc_point(k, t)
    best_d = np.full(X.shape, np.inf)
    best_t = np.zeros(X.shape)
    for tk, ax, ay in zip(t, px, py):
        d = (X - ax) ** 2 + (Y - ay) ** 2
        closer = d < best_d
        best_d = np.where(closer, d, best_d)
        best_t = np.where(closer, tk, best_t)
    keep = best_d <= (CORRIDOR_WIDTH_M / 2) ** 2
    order = np.argsort(best_t[keep], kind="stable")
    return I[keep][order], J[keep][order], best_t[keep][order]


def _blocked(img: PlanViewImage) -> np.ndarray:
    occ = np.zeros((img.spec.height_px, img.spec.width_px), dtype=bool)
    for name in ("vehicles", "pedestrians"):
        if name in img.channels:
            occ |= img.channels[name].astype(bool)
    if "map" in img.channels:
        occ |= img.channels["map"] == 0
    return occ


def corridor_distance(img: PlanViewImage, lateral: str) -> float:
    """Arc distance to the nearest occupied cell in a corridor, capped at the corridor length."""
    spec = img.spec
    rows, cols, t = corridor_cells(spec.width_px, spec.height_px, spec.meters_per_px, lateral)
    hit = _blocked(img)[rows, cols]
    if not hit.any():
        return CORRIDOR_LENGTH_M
    return float(t[np.argmax(hit)])


def occupancy_policy(img: PlanViewImage, ego_speed: float = 0.0) -> Action:
    """Steer toward the corridor with the most free space; speed from its clearance.

    When the map layer is present, off-road cells count as occupied.
    """
    if img.spec.frame != "travel":
        raise ValueError("occupancy policy needs a travel-frame grid")
    d = {lat: corridor_distance(img, lat) for lat in LATERAL}
    best = "straight"
    for lat in ("left", "right"):
        if d[lat] > d[best]:
            best = lat
    dist = d[best]
    lon = "stop" if dist < STOP_DIST_M else "slow" if dist < SLOW_DIST_M else "fast"
    return Action(best, lon)


# -------------------------------------------------------------------- linear

def feature_length(n_channels: int) -> int:
    return n_channels * POOL * POOL + 3


def featurize(img: PlanViewImage, ego_speed: float, ego_yaw_rate: float,
              zero_plan_view: bool = False) -> np.ndarray:
    """Block-averaged channels (16x16 each, layer order), then speed, yaw rate, bias."""
    spec = img.spec
    h, w = spec.height_px, spec.width_px
    if h % POOL or w % POOL or not {"vehicles", "pedestrians"} <= set(img.channels):
        raise DimensionError(f"cannot pool a {h}x{w} grid with channels {list(img.channels)}")
    n = len(spec.layers)
    out = np.empty(feature_length(n))
    if zero_plan_view:
        out[:-3] = 0.0
    else:
        for k, name in enumerate(spec.layers):
            out[k * POOL * POOL:(k + 1) * POOL * POOL] = pool_channel(img.channels[name])
    out[-3:] = ego_features(ego_speed, ego_yaw_rate)
    return out


def pool_channel(arr: np.ndarray) -> np.ndarray:
    """Block averages of a binary grid on a 16x16 lattice, flattened row-major."""
    h, w = arr.shape
    counts = _block_counts(np.ascontiguousarray(arr), h // POOL, w // POOL)
    return counts.reshape(-1) / ((h // POOL) * (w // POOL))


@njit(cache=True)
def _block_counts(arr, bh, bw):
    out = np.zeros((POOL, POOL), dtype=np.int64)
    for i in range(arr.shape[0]):
        row = out[i // bh]
        for j in range(arr.shape[1]):
            if arr[i, j]:
                row[j // bw] += 1
    return out


def ego_features(ego_speed: float, ego_yaw_rate: float) -> np.ndarray:
    return np.array([ego_speed * SPEED_SCALE, ego_yaw_rate * YAW_RATE_SCALE, 1.0])


def linear_policy_logits(w: np.ndarray, feat: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    feat = np.asarray(feat, dtype=float)
    if w.ndim != 2 or w.shape[0] != N_ACTIONS or w.shape[1] != feat.shape[-1]:
        raise DimensionError(f"weights {w.shape} do not match features {feat.shape}")
    return feat @ w.T


def linear_action(w: np.ndarray, feat: np.ndarray) -> Action:
    return Action.from_index(int(np.argmax(linear_policy_logits(w, feat))))


MAGIC = b"MPVW"


def weights_bytes(w: np.ndarray) -> bytes:
    w = np.ascontiguousarray(w, dtype="<f8")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    return MAGIC + struct.pack("<II", *w.shape) + w.tobytes()


def save_weights(w: np.ndarray, path) -> None:
    Path(path).write_bytes(weights_bytes(w))


def load_weights(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a weights file")
    rows, cols = struct.unpack("<II", data[4:12])
    body = data[12:]
    if len(body) != rows * cols * 8:
        raise ValueError(f"{path}: truncated weights file")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(float)


# ------------------------------------------------------------------ policies

def observe(state: WorldState, sensed: Sequence[SensedObject], history: Sequence[PlanPose],
            intr: CameraIntrinsics, spec: GridSpec, use_truth: bool = False) -> PlanViewImage:
    """The plan view a policy sees: reprojected detections plus optional overlays."""
    objects = reproject(list(sensed), intr, use_truth)
    ego = state.ego_pose
    polys = state.network.polygons_near(ego.x_m, ego.y_m) if "map" in spec.layers else None
    return render_plan_view(objects, ego, spec, history, polys)


class ExpertPolicy:
    name = "expert"
    grid: Optional[GridSpec] = None

    def act(self, state: WorldState, view: Optional[PlanViewImage]) -> Action:
        return expert_action(state)


class OccupancyPolicy:
    name = "occupancy"

    def __init__(self, grid: Optional[GridSpec] = None):
        self.grid = grid or GridSpec(frame="travel", layers=("vehicles", "pedestrians", "map"))

    def act(self, state: WorldState, view: Optional[PlanViewImage]) -> Action:
        return occupancy_policy(view, state.ego_speed)


class LinearPolicy:
    name = "bc"

    def __init__(self, weights: np.ndarray, grid: Optional[GridSpec] = None, blind: bool = False):
        self.weights = np.asarray(weights, dtype=float)
        self.blind = blind
        self.grid = grid or GridSpec()
        self._blank = PlanViewImage.empty(self.grid) if blind else None
        if self.weights.shape != (N_ACTIONS, feature_length(len(self.grid.layers))):
            raise DimensionError(f"weights {self.weights.shape} do not fit layers {self.grid.layers}")

    def act(self, state: WorldState, view: Optional[PlanViewImage]) -> Action:
        if self.blind:
            view = self._blank
        feat = featurize(view, state.ego_speed, state.yaw_rate(), zero_plan_view=self.blind)
        return linear_action(self.weights, feat)
