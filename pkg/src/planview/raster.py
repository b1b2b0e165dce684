"""Plan-view occupancy grids: box rasterization, scene rendering and PGM export."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from numba import njit

from .geometry import PlanPose, corners_xy, heading_vectors, to_frame

CHANNELS = ("vehicles", "pedestrians", "map", "ego_history")
CLASS_CHANNEL = {"vehicle": "vehicles", "pedestrian": "pedestrians"}

MAX_DEPTH_M = 64.0
MAX_LATERAL_M = 32.0
HISTORY_LENGTH = 36

# slack for the inclusive cell-center test, meters
BOUNDARY_EPS = 1e-9


@dataclass(frozen=True)
class GridSpec:
    width_px: int = 512
    height_px: int = 512
    meters_per_px: float = 0.125
    frame: str = "travel"
    layers: tuple[str, ...] = ("vehicles", "pedestrians")

    def __post_init__(self):
        if self.width_px <= 0 or self.height_px <= 0 or not self.meters_per_px > 0:
            raise ValueError("grid dimensions and resolution must be positive")
        if self.frame not in ("travel", "north_up"):
            raise ValueError(f"unknown grid frame {self.frame!r}")
        bad = [c for c in self.layers if c not in CHANNELS]
        if bad:
            raise ValueError(f"unknown layers {bad}")

    @property
    def extent_m(self) -> tuple[float, float]:
        return self.width_px * self.meters_per_px, self.height_px * self.meters_per_px

    def origin(self, centered: Optional[bool] = None) -> tuple[float, float]:
        """Metric (left x, top y) of the grid.

        Travel grids put the ego at the bottom-center; north-up grids at the center.
        """
        w, h = self.extent_m
        if centered is None:
            centered = self.frame == "north_up"
        return -w / 2.0, (h / 2.0 if centered else h)


@dataclass
class PlanViewImage:
    spec: GridSpec
    channels: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def empty(cls, spec: GridSpec) -> "PlanViewImage":
        shape = (spec.height_px, spec.width_px)
        return cls(spec, {name: np.zeros(shape, dtype=np.uint8) for name in spec.layers})

    def copy(self) -> "PlanViewImage":
        return PlanViewImage(self.spec, {k: v.copy() for k, v in self.channels.items()})

    def stack(self, names: Optional[Sequence[str]] = None) -> np.ndarray:
        names = self.spec.layers if names is None else names
        return np.stack([self.channels[n] for n in names])


def fill_polygon(arr: np.ndarray, poly: np.ndarray, res: float,
                 origin: tuple[float, float]) -> None:
    """Set every cell of ``arr`` whose center is inside or on a convex polygon.

    Scanline fill: for each row crossing the polygon the covered x interval is
    the hull of the edge crossings at the row's center line.
    """
    h, w = arr.shape
    x0, y_top = origin
    poly = np.ascontiguousarray(poly, dtype=np.float64)
    xs, ys = poly[:, 0], poly[:, 1]
    # rows whose centers can touch the polygon: y_c = y_top - (i + 0.5) res
    i_lo = max(math.ceil((y_top - ys.max() - BOUNDARY_EPS) / res - 0.5), 0)
    i_hi = min(math.floor((y_top - ys.min() + BOUNDARY_EPS) / res - 0.5), h - 1)
    j_lo = max(math.ceil((xs.min() - BOUNDARY_EPS - x0) / res - 0.5), 0)
    j_hi = min(math.floor((xs.max() + BOUNDARY_EPS - x0) / res - 0.5), w - 1)
    if i_lo > i_hi or j_lo > j_hi:
        return
    _fill_rows(arr, poly, res, x0, y_top, i_lo, i_hi, j_lo, j_hi, BOUNDARY_EPS)


@njit(cache=True)
def _fill_rows(arr, poly, res, x0, y_top, i_lo, i_hi, j_lo, j_hi, eps):
    n = poly.shape[0]
    for i in range(i_lo, i_hi + 1):
        yc = y_top - (i + 0.5) * res
        lo = np.inf
        hi = -np.inf
        for k in range(n):
            px, py = poly[k, 0], poly[k, 1]
            qx, qy = poly[(k + 1) % n, 0], poly[(k + 1) % n, 1]
            ymin, ymax = (py, qy) if py <= qy else (qy, py)
            if yc < ymin - eps or yc > ymax + eps:
                continue
            if qy == py:
                xa, xb = min(px, qx), max(px, qx)
            else:
                t = min(max((yc - py) / (qy - py), 0.0), 1.0)
                xa = xb = px + t * (qx - px)
            lo = min(lo, xa)
            hi = max(hi, xb)
        if lo > hi:
            continue
        for j in range(j_lo, j_hi + 1):
            xc = x0 + (j + 0.5) * res
            if xc >= lo - eps and xc <= hi + eps:
                arr[i, j] = 1


def rasterize_box(grid: PlanViewImage, channel: str, corners: np.ndarray) -> PlanViewImage:
    """Return a copy of ``grid`` with the quadrilateral filled into ``channel``."""
    out = grid.copy()
    spec = grid.spec
    fill_polygon(out.channels[channel], np.asarray(corners, dtype=float),
                 spec.meters_per_px, spec.origin())
    return out


def _world_to_grid_points(pts: np.ndarray, ego: PlanPose, frame: str) -> np.ndarray:
    """World points (..., 2) into grid-frame metric coordinates."""
    d = pts - (ego.x_m, ego.y_m)
    if frame == "north_up":
        return d
    (fx, fy), (rx, ry) = heading_vectors(ego.yaw_rad)
    out = np.empty_like(d)
    out[..., 0] = d[..., 0] * rx + d[..., 1] * ry
    out[..., 1] = d[..., 0] * fx + d[..., 1] * fy
    return out


def render_plan_view(
    objects: Iterable[tuple[str, PlanPose, tuple[float, float, float]]],
    ego_world_pose: PlanPose,
    spec: GridSpec,
    history: Sequence[PlanPose] = (),
    map_polygons: Optional[np.ndarray] = None,
) -> PlanViewImage:
    """Render camera-frame objects into per-class occupancy grids.

    ``map_polygons`` is an (N, 4, 2) array of drivable world-frame quads, used
    only when the map layer is enabled.  In the travel frame the ego-history
    channel is anchored at the grid center (the forward-only extent would hide
    every past position).
    """
    img = PlanViewImage.empty(spec)
    res = spec.meters_per_px
    origin = spec.origin()
    x0, y_top = origin
    w, h = spec.extent_m
    for cls, pose, dims in objects:
        if pose.y_m > MAX_DEPTH_M or abs(pose.x_m) > MAX_LATERAL_M:
            continue
        name = CLASS_CHANNEL[cls]
        if name not in img.channels:
            continue
        p = to_frame(pose, ego_world_pose, spec.frame)
        reach = 0.5 * math.hypot(dims[0], dims[1])
        if (p.x_m + reach < x0 or p.x_m - reach > x0 + w
                or p.y_m - reach > y_top or p.y_m + reach < y_top - h):
            continue
        fill_polygon(img.channels[name], corners_xy(p.x_m, p.y_m, p.yaw_rad, dims[0], dims[1]),
                     res, origin)
    if "map" in img.channels and map_polygons is not None and len(map_polygons):
        polys = _world_to_grid_points(np.asarray(map_polygons, dtype=float), ego_world_pose, spec.frame)
        lo = polys.min(axis=1)
        hi = polys.max(axis=1)
        keep = (hi[:, 0] >= x0) & (lo[:, 0] <= x0 + w) & (hi[:, 1] >= y_top - h) & (lo[:, 1] <= y_top)
        arr = img.channels["map"]
        for poly in polys[keep]:
            fill_polygon(arr, poly, res, origin)
    if "ego_history" in img.channels and len(history):
        pts = np.array([(p.x_m, p.y_m) for p in list(history)[-HISTORY_LENGTH:]])
        g = _world_to_grid_points(pts, ego_world_pose, spec.frame)
        hx0, hy_top = spec.origin(centered=True)
        j = np.floor((g[:, 0] - hx0) / res).astype(int)
        i = np.floor((hy_top - g[:, 1]) / res).astype(int)
        ok = (i >= 0) & (i < spec.height_px) & (j >= 0) & (j < spec.width_px)
        img.channels["ego_history"][i[ok], j[ok]] = 1
    return img


def export_pgm(img: PlanViewImage, channel: str) -> bytes:
    """Binary P5 PGM of one channel, forward/north at the top."""
    if channel not in img.channels:
        raise KeyError(f"unknown channel {channel!r}; have {sorted(img.channels)}")
    arr = img.channels[channel]
    h, w = arr.shape
    header = b"P5\n%d %d\n255\n" % (w, h)
    return header + (arr.astype(np.uint8) * 255).tobytes()
