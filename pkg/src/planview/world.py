"""Deterministic kinematic traffic simulator.

The ego is a kinematic bicycle integrated with explicit Euler at the native
12 fps frame clock.  NPC vehicles and pedestrians follow precomputed routes
sampled at uniform arc length; the per-frame actor update and the ego
collision test are numba kernels over struct-of-arrays state.
"""
from __future__ import annotations

import bisect
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from numba import njit

from .actions import Action
from .geometry import PlanPose, corners_xy, wrap_angle

FPS = 12
DT = 1.0 / FPS

VEHICLE, PEDESTRIAN = 0, 1
CLASS_NAMES = ("vehicle", "pedestrian")

# actor array columns
X, Y, YAW, V, S, LEN, WID, HGT = range(8)

EGO_DIMS = (4.5, 1.9, 1.5)
CAR_DIMS = (4.5, 1.9, 1.5)
PED_DIMS = (0.6, 0.6, 1.75)

LANE_WIDTH = 3.5
SIDEWALK = 4.0
BLOCK = 150.0
ROUTE_DS = 0.5
# fillet of lane routes at junction corners, close to the ego's turning circle at slow speed
TURN_RADIUS_M = 9.0
STATIC_ID_BASE = 1000
# contact episodes end only once the footprints are this far apart
CONTACT_RELEASE_M = 0.3


class RouteExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    dt: float = DT
    wheelbase_m: float = 2.7
    max_steer_deg: float = 35.0
    # full-lock lateral acceleration; caps the steering angle at speed
    max_lateral_accel: float = 6.0
    throttle_accel: float = 4.0
    brake_decel: float = 8.0
    drag: float = 0.1
    top_speed: float = 30.0
    npc_headway_s: float = 2.0
    npc_accel: float = 2.0
    npc_decel: float = 8.0
    ped_speed: float = 1.4
    urban_speed: float = 10.0
    stuck_window_s: float = 30.0
    stuck_min_disp_m: float = 1.0
    teleport_ahead_m: float = 30.0


@dataclass(frozen=True)
class EgoControl:
    throttle: float = 0.0
    brake: float = 0.0
    steer: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.throttle <= 1.0 and 0.0 <= self.brake <= 1.0 and -1.0 <= self.steer <= 1.0):
            raise ValueError(f"control out of range: {self}")
        if self.throttle * self.brake != 0.0:
            raise ValueError("throttle and brake are mutually exclusive")


@dataclass(frozen=True)
class ActorState:
    id: int
    object_class: str
    pose: PlanPose
    dims: tuple[float, float, float]
    speed: float
    route_index: int
    route_offset_m: float


# --------------------------------------------------------------------- routes

class Route:
    """Polyline sampled every ``ds`` meters with columns x, y, yaw, speed cap."""

    def __init__(self, pts: np.ndarray, ds: float = ROUTE_DS, period: float = 0.0,
                 junctions: Sequence[float] = (), turns: Sequence[tuple[float, int]] = ()):
        self.pts = pts
        self.ds = ds
        self.period = period
        self.junctions = np.asarray(junctions, dtype=float)
        self.turns = list(turns)

    @property
    def length(self) -> float:
        return (len(self.pts) - 1) * self.ds

    def pose_at(self, s: float) -> tuple[float, float, float]:
        x, y, yaw, _ = _route_lookup(self.pts, len(self.pts), self.period, self.ds, s)
        return x, y, yaw

    def project(self, x: float, y: float, s_hint: float, back: float = 10.0,
                ahead: float = 40.0) -> float:
        """Arc position of the route point nearest (x, y) within a window around ``s_hint``."""
        i0 = max(int((s_hint - back) / self.ds), 0)
        i1 = min(int((s_hint + ahead) / self.ds) + 1, len(self.pts))
        seg = self.pts[i0:i1, :2]
        d2 = (seg[:, 0] - x) ** 2 + (seg[:, 1] - y) ** 2
        return (i0 + int(np.argmin(d2))) * self.ds


def _resample(vertices: np.ndarray, ds: float, speed: float, lat_accel: float = 2.5,
              decel: float = 2.5) -> np.ndarray:
    seg = np.diff(vertices, axis=0)
    seglen = np.hypot(seg[:, 0], seg[:, 1])
    keep = np.concatenate([[True], seglen > 1e-9])
    vertices = vertices[keep]
    seg = np.diff(vertices, axis=0)
    cum = np.concatenate([[0.0], np.cumsum(np.hypot(seg[:, 0], seg[:, 1]))])
    n = int(math.floor(cum[-1] / ds)) + 1
    s = np.arange(n) * ds
    x = np.interp(s, cum, vertices[:, 0])
    y = np.interp(s, cum, vertices[:, 1])
    gx = np.gradient(x) if n > 1 else np.zeros(1)
    gy = np.gradient(y) if n > 1 else np.ones(1)
    yaw = np.mod(np.arctan2(-gx, gy), 2 * math.pi)
    dyaw = np.abs((np.diff(yaw) + math.pi) % (2 * math.pi) - math.pi) / ds
    kappa = np.concatenate([dyaw, [0.0]])
    kappa = np.maximum(kappa, np.concatenate([[0.0], dyaw]))
    vcap = np.minimum(speed, np.sqrt(lat_accel / np.maximum(kappa, 1e-9)))
    # allow braking into curves
    for i in range(n - 2, -1, -1):
        vcap[i] = min(vcap[i], math.sqrt(vcap[i + 1] ** 2 + 2 * decel * ds))
    return np.column_stack([x, y, yaw, vcap])


def _fillet(vertices: list[np.ndarray], radius: float, samples: int = 12) -> np.ndarray:
    """Round interior corners with quadratic Bezier arcs."""
    out = [vertices[0]]
    for a, c, b in zip(vertices[:-2], vertices[1:-1], vertices[2:]):
        d1 = (c - a) / np.linalg.norm(c - a)
        d2 = (b - c) / np.linalg.norm(b - c)
        if abs(d1[0] * d2[1] - d1[1] * d2[0]) < 1e-6:
            out.append(c)
            continue
        p0, p2 = c - radius * d1, c + radius * d2
        t = np.linspace(0.0, 1.0, samples)[:, None]
        out.extend((1 - t) ** 2 * p0 + 2 * (1 - t) * t * c + t ** 2 * p2)
    out.append(vertices[-1])
    return np.array(out, dtype=float)


# -------------------------------------------------------------------- network

@dataclass
class RoadNetwork:
    kind: str
    lanes: list[np.ndarray]                 # directed centerlines
    lane_width: float
    speed_limit: list[float]
    junctions: list[tuple[np.ndarray, list[int]]]  # center, lane-end indices
    lane_polygons: np.ndarray               # (N, 4, 2) drivable quads
    obstacles: np.ndarray                   # (M, 5) x, y, yaw, length, width
    period_y: float = 0.0

    def _shifts(self, y: float) -> np.ndarray:
        k = math.floor(y / self.period_y)
        return np.array([k - 1, k, k + 1], dtype=float) * self.period_y

    def polygons_near(self, x: float, y: float) -> np.ndarray:
        if not self.period_y:
            return self.lane_polygons
        shifts = self._shifts(y)
        reps = [self.lane_polygons + (0.0, sh) for sh in shifts]
        return np.concatenate(reps)

    def obstacles_near(self, x: float, y: float) -> np.ndarray:
        if not self.period_y:
            return self.obstacles
        reps = []
        for sh in self._shifts(y):
            o = self.obstacles.copy()
            o[:, 1] += sh
            reps.append(o)
        return np.concatenate(reps)


def _rect_polygon(cx, cy, yaw, length, width) -> np.ndarray:
    return corners_xy(cx, cy, yaw, length, width)


def _yaw_of(d) -> float:
    return wrap_angle(math.atan2(-d[0], d[1]))


def _urban_network(cfg: SimConfig) -> RoadNetwork:
    nodes = [(i, j) for i in range(4) for j in range(4)]
    lanes, limits, polys = [], [], []
    ends: dict[tuple[int, int], list[int]] = {n: [] for n in nodes}
    off = LANE_WIDTH / 2
    for (i, j) in nodes:
        for di, dj in ((1, 0), (0, 1), (-1, 0), (0, -1)):
            a, b = (i, j), (i + di, j + dj)
            if b not in ends:
                continue
            pa = np.array(a, dtype=float) * BLOCK
            pb = np.array(b, dtype=float) * BLOCK
            d = (pb - pa) / BLOCK
            r = np.array([d[1], -d[0]])
            lanes.append(np.array([pa + off * r, pb + off * r]))
            limits.append(cfg.urban_speed)
            ends[a].append(len(lanes) - 1)
            ends[b].append(len(lanes) - 1)
            mid = (pa + pb) / 2 + off * r
            polys.append(_rect_polygon(mid[0], mid[1], _yaw_of(d), BLOCK + LANE_WIDTH * 2, LANE_WIDTH))
    junctions = [(np.array(n, dtype=float) * BLOCK, ends[n]) for n in nodes]
    edge = LANE_WIDTH + SIDEWALK
    obstacles = []
    for bi in range(3):
        for bj in range(3):
            c = ((bi + 0.5) * BLOCK, (bj + 0.5) * BLOCK)
            obstacles.append((c[0], c[1], 0.0, BLOCK - 2 * edge, BLOCK - 2 * edge))
    span = 3 * BLOCK
    thick = 40.0
    outer = span + 2 * edge + 2 * thick
    obstacles += [
        (-edge - thick / 2, span / 2, 0.0, outer, thick),
        (span + edge + thick / 2, span / 2, 0.0, outer, thick),
        (span / 2, -edge - thick / 2, 0.0, thick, outer),
        (span / 2, span + edge + thick / 2, 0.0, thick, outer),
    ]
    return RoadNetwork("urban", lanes, LANE_WIDTH, limits, junctions, np.array(polys),
                       np.array(obstacles, dtype=float))


HIGHWAY_LENGTH = 1000.0
HIGHWAY_LANES_X = (5.25, 1.75, -1.75, -5.25)   # first two northbound


def _highway_network() -> RoadNetwork:
    L = HIGHWAY_LENGTH
    lanes, polys, limits = [], [], []
    for k, x in enumerate(HIGHWAY_LANES_X):
        north = k < 2
        ys = (0.0, L) if north else (L, 0.0)
        lanes.append(np.array([[x, ys[0]], [x, ys[1]]]))
        limits.append(14.0 if k in (1, 2) else 12.0)
        polys.append(_rect_polygon(x, L / 2, 0.0 if north else math.pi, L, LANE_WIDTH))
    edge = 2 * LANE_WIDTH + 0.5
    thick = 10.0
    obstacles = np.array([(edge + thick / 2, L / 2, 0.0, L, thick),
                          (-edge - thick / 2, L / 2, 0.0, L, thick)])
    return RoadNetwork("highway", lanes, LANE_WIDTH, limits, [], np.array(polys), obstacles,
                       period_y=L)


# --------------------------------------------------------------------- kernels

@njit(cache=True)
def _wrap_pi(a):
    return (a + math.pi) % (2.0 * math.pi) - math.pi


@njit(cache=True)
def _route_lookup(p, n, period, ds, s):
    if period > 0.0:
        s = s % period
    else:
        s = min(max(s, 0.0), (n - 1) * ds)
    f = s / ds
    i = int(f)
    if i >= n - 1:
        i = n - 2
    t = f - i
    x = p[i, 0] + t * (p[i + 1, 0] - p[i, 0])
    y = p[i, 1] + t * (p[i + 1, 1] - p[i, 1])
    yaw = (p[i, 2] + t * _wrap_pi(p[i + 1, 2] - p[i, 2])) % (2.0 * math.pi)
    vcap = p[i, 3]
    if period <= 0.0 and s >= (n - 1) * ds - 1e-9:
        vcap = 0.0
    return x, y, yaw, vcap


@njit(cache=True)
def _rel(ax, ay, bx, by, period_y):
    dx = bx - ax
    dy = by - ay
    if period_y > 0.0:
        dy -= period_y * np.floor(dy / period_y + 0.5)
    return dx, dy


@njit(cache=True)
def _step_actors(A, cls, route_id, R_pts, R_n, R_period, ds, ego, ego_l, ego_w,
                 dt, period_y, headway, accel, decel, ped_speed):
    n = A.shape[0]
    v_new = np.empty(n)
    for i in range(n):
        xi, yi, hi = A[i, 0], A[i, 1], A[i, 2]
        fx, fy = -math.sin(hi), math.cos(hi)
        rx, ry = math.cos(hi), math.sin(hi)
        if cls[i] == 1:
            blocked = False
            for j in range(n + 1):
                if j == i:
                    continue
                if j < n:
                    # stationary cars do not hold up a crossing pedestrian
                    if cls[j] != 0 or A[j, 3] < 0.5:
                        continue
                    bx, by, half = A[j, 0], A[j, 1], 0.5 * A[j, 5]
                else:
                    if ego[3] < 0.5:
                        continue
                    bx, by, half = ego[0], ego[1], 0.5 * ego_l
                dx, dy = _rel(xi, yi, bx, by, period_y)
                fwd = dx * fx + dy * fy
                lat = dx * rx + dy * ry
                if fwd > -0.5 and fwd < 2.5 + half and abs(lat) < 1.0 + half:
                    blocked = True
                    break
            v_new[i] = 0.0 if blocked else ped_speed
            continue
        r = route_id[i]
        _, _, _, desired = _route_lookup(R_pts[r], R_n[r], R_period[r], ds, A[i, 4])
        v = A[i, 3]
        li, wi = A[i, 5], A[i, 6]
        look = headway * v + 8.0 + li
        emergency = False
        for j in range(n + 1):
            if j == i:
                continue
            if j < n:
                bx, by, bh, lj, wj = A[j, 0], A[j, 1], A[j, 2], A[j, 5], A[j, 6]
            else:
                bx, by, bh, lj, wj = ego[0], ego[1], ego[2], ego_l, ego_w
            dx, dy = _rel(xi, yi, bx, by, period_y)
            fwd = dx * fx + dy * fy
            lat = dx * rx + dy * ry
            if not (fwd > 0.0 and fwd < look and abs(lat) < 0.5 * (wi + wj) + 0.4):
                continue
            if j < n and cls[j] == 0 and i < j:
                # mutual conflict between NPCs: the lower id keeps going
                gx, gy = -math.sin(bh), math.cos(bh)
                hx, hy = math.cos(bh), math.sin(bh)
                f2 = -(dx * gx + dy * gy)
                l2 = -(dx * hx + dy * hy)
                if f2 > 0.0 and f2 < headway * A[j, 3] + 8.0 + lj and abs(l2) < 0.5 * (wi + wj) + 0.4:
                    continue
            gap = fwd - 0.5 * (li + lj)
            desired = min(desired, max(0.0, (gap - 2.0) / headway))
            if gap < 2.0:
                emergency = True
        if emergency:
            vn = 0.0
        elif desired >= v:
            vn = min(desired, v + accel * dt)
        else:
            vn = max(desired, v - decel * dt)
        v_new[i] = max(vn, 0.0)
    for i in range(n):
        A[i, 3] = v_new[i]
        A[i, 4] += v_new[i] * dt
        r = route_id[i]
        x, y, yaw, _ = _route_lookup(R_pts[r], R_n[r], R_period[r], ds, A[i, 4])
        A[i, 0] = x
        A[i, 1] = y
        A[i, 2] = yaw


@njit(cache=True)
def rect_overlap(ax, ay, ayaw, al, aw, bx, by, byaw, bl, bw, margin):
    """Separating-axis test for two oriented rectangles; touching counts as overlap."""
    dx = bx - ax
    dy = by - ay
    axes = np.empty((4, 2))
    axes[0, 0], axes[0, 1] = -math.sin(ayaw), math.cos(ayaw)
    axes[1, 0], axes[1, 1] = math.cos(ayaw), math.sin(ayaw)
    axes[2, 0], axes[2, 1] = -math.sin(byaw), math.cos(byaw)
    axes[3, 0], axes[3, 1] = math.cos(byaw), math.sin(byaw)
    for k in range(4):
        ux, uy = axes[k, 0], axes[k, 1]
        ra = 0.5 * al * abs(axes[0, 0] * ux + axes[0, 1] * uy) + 0.5 * aw * abs(axes[1, 0] * ux + axes[1, 1] * uy)
        rb = 0.5 * bl * abs(axes[2, 0] * ux + axes[2, 1] * uy) + 0.5 * bw * abs(axes[3, 0] * ux + axes[3, 1] * uy)
        if abs(dx * ux + dy * uy) > ra + rb + margin:
            return False
    return True


@njit(cache=True)
def _ego_overlaps(ego, el, ew, rects, period_y, margin):
    n = rects.shape[0]
    out = np.zeros(n, dtype=np.bool_)
    for k in range(n):
        dx, dy = _rel(ego[0], ego[1], rects[k, 0], rects[k, 1], period_y)
        out[k] = rect_overlap(ego[0], ego[1], ego[2], el, ew, ego[0] + dx, ego[1] + dy,
                              rects[k, 2], rects[k, 3], rects[k, 4], margin)
    return out


# ---------------------------------------------------------------------- state

@dataclass
class WorldState:
    kind: str
    network: RoadNetwork
    ego: np.ndarray                     # x, y, yaw, speed, steer angle (rad)
    ego_route: Route
    ego_s: float
    actors: np.ndarray                  # (n, 8) see column constants
    actor_class: np.ndarray             # (n,) 0 vehicle, 1 pedestrian
    actor_ids: np.ndarray
    route_id: np.ndarray
    routes: np.ndarray                  # (R, P, 4)
    route_n: np.ndarray
    route_period: np.ndarray
    clock_s: float = 0.0
    frame_index: int = 0
    rng_seed: int = 0
    location: int = 0
    config: SimConfig = field(default_factory=SimConfig)
    contacts: frozenset = frozenset()
    blocked: bool = False

    def copy(self) -> "WorldState":
        return replace(self, ego=self.ego.copy(), actors=self.actors.copy())

    @property
    def ego_pose(self) -> PlanPose:
        return PlanPose(float(self.ego[0]), float(self.ego[1]), wrap_angle(float(self.ego[2])), "world")

    @property
    def ego_speed(self) -> float:
        return float(self.ego[3])

    def yaw_rate(self) -> float:
        v, delta = self.ego[3], self.ego[4]
        return float(-v * math.tan(delta) / self.config.wheelbase_m)

    def actor_xy_near_ego(self) -> np.ndarray:
        """Actor positions, unwrapped to the periodic image nearest the ego."""
        xy = self.actors[:, :2].copy()
        p = self.network.period_y
        if p:
            dy = xy[:, 1] - self.ego[1]
            xy[:, 1] -= p * np.floor(dy / p + 0.5)
        return xy

    def actor_list(self) -> list[ActorState]:
        xy = self.actor_xy_near_ego()
        out = []
        for k in range(len(self.actors)):
            a = self.actors[k]
            out.append(ActorState(int(self.actor_ids[k]), CLASS_NAMES[self.actor_class[k]],
                                  PlanPose(float(xy[k, 0]), float(xy[k, 1]), float(a[YAW]), "world"),
                                  (float(a[LEN]), float(a[WID]), float(a[HGT])),
                                  float(a[V]), int(self.route_id[k]), float(a[S])))
        return out

    def fingerprint(self) -> bytes:
        return b"".join([self.ego.tobytes(), self.actors.tobytes(),
                         np.array([self.clock_s, self.frame_index, self.ego_s]).tobytes()])


# ------------------------------------------------------------------ dynamics

def max_steer_angle(speed: float, cfg: SimConfig) -> float:
    cap = math.radians(cfg.max_steer_deg)
    if speed <= 1e-6:
        return cap
    return min(cap, math.atan(cfg.max_lateral_accel * cfg.wheelbase_m / speed ** 2))


def advance(state: WorldState, control: EgoControl) -> WorldState:
    """Advance ``state`` one frame in place and return it."""
    cfg = state.config
    dt = cfg.dt
    ego = state.ego
    x, y, yaw, v = ego[0], ego[1], ego[2], ego[3]
    delta = control.steer * max_steer_angle(v, cfg)
    nx = x - v * math.sin(yaw) * dt
    ny = y + v * math.cos(yaw) * dt
    nyaw = (yaw - v * math.tan(delta) / cfg.wheelbase_m * dt) % (2 * math.pi)
    a = cfg.throttle_accel * control.throttle - cfg.brake_decel * control.brake - cfg.drag * v
    nv = min(max(v + a * dt, 0.0), cfg.top_speed)
    ego[0], ego[1], ego[2], ego[3], ego[4] = nx, ny, nyaw, nv, delta
    state.blocked = False
    obs = state.network.obstacles_near(nx, ny)
    if len(obs) and _ego_overlaps(ego, EGO_DIMS[0], EGO_DIMS[1], obs, 0.0, 0.0).any():
        # static geometry is rigid: the ego stays put against it
        ego[0], ego[1], ego[2], ego[3] = x, y, yaw, 0.0
        state.blocked = True
    _step_actors(state.actors, state.actor_class, state.route_id, state.routes, state.route_n,
                 state.route_period, ROUTE_DS, ego, EGO_DIMS[0], EGO_DIMS[1], dt,
                 state.network.period_y, cfg.npc_headway_s, cfg.npc_accel, cfg.npc_decel,
                 cfg.ped_speed)
    state.frame_index += 1
    state.clock_s = state.frame_index / FPS
    state.ego_s = state.ego_route.project(ego[0], ego[1], state.ego_s)
    return state


def step(state: WorldState, control: EgoControl) -> WorldState:
    """Pure variant of :func:`advance`."""
    return advance(state.copy(), control)


# ---------------------------------------------------------------- collisions

@dataclass(frozen=True)
class CollisionEvent:
    frame_index: int
    other_id: int
    other_class: str


def _contact_sets(state: WorldState) -> tuple[set[int], set[int]]:
    el, ew = EGO_DIMS[0], EGO_DIMS[1]
    ids: list[int] = []
    rects = []
    if len(state.actors):
        a = state.actors
        rects.append(np.column_stack([a[:, X], a[:, Y], a[:, YAW], a[:, LEN], a[:, WID]]))
        ids.extend(int(i) for i in state.actor_ids)
    obs = state.network.obstacles_near(state.ego[0], state.ego[1])
    if len(obs):
        rects.append(obs)
        ids.extend(STATIC_ID_BASE + k for k in range(len(obs)))
    if not rects:
        return set(), set()
    R = np.ascontiguousarray(np.concatenate(rects))
    period = state.network.period_y
    touch = _ego_overlaps(state.ego, el, ew, R, period, 0.0)
    near = _ego_overlaps(state.ego, el, ew, R, period, CONTACT_RELEASE_M)
    touching = {ids[k] for k in np.flatnonzero(touch)}
    if state.blocked:
        # the rigid response moved the ego back out; the push still touches
        touching |= {ids[k] for k in np.flatnonzero(near) if ids[k] >= STATIC_ID_BASE}
    return touching, {ids[k] for k in np.flatnonzero(near)}


def detect_collisions(state: WorldState) -> list[CollisionEvent]:
    """New ego contacts since the last call; updates ``state.contacts``."""
    touching, near = _contact_sets(state)
    new = sorted(touching - state.contacts)
    state.contacts = frozenset((state.contacts & near) | touching)
    out = []
    for other in new:
        if other >= STATIC_ID_BASE:
            cls = "static"
        else:
            k = int(np.flatnonzero(state.actor_ids == other)[0])
            cls = CLASS_NAMES[state.actor_class[k]]
        out.append(CollisionEvent(state.frame_index, other, cls))
    return out


# -------------------------------------------------------------- interventions

@dataclass(frozen=True)
class Intervention:
    time_s: float
    displacement_m: float


def check_intervention(history: Sequence[tuple[float, float, float]],
                       window_s: float = 30.0, min_disp_m: float = 1.0) -> Optional[Intervention]:
    """Fire when the ego moved less than ``min_disp_m`` over the trailing window.

    ``history`` holds chronological (t, x, y) samples since the last reset.
    """
    if not history:
        return None
    t_now, x_now, y_now = history[-1]
    times = [h[0] for h in history]
    k = bisect.bisect_right(times, t_now - window_s + 1e-9) - 1
    if k < 0:
        return None
    _, x0, y0 = history[k]
    disp = math.hypot(x_now - x0, y_now - y0)
    if disp < min_disp_m:
        return Intervention(t_now, disp)
    return None


class StuckMonitor:
    """Incremental form of :func:`check_intervention` for fixed-rate frames."""

    def __init__(self, window_s: float = 30.0, min_disp_m: float = 1.0, fps: int = FPS):
        self.frames = int(round(window_s * fps))
        self.min_disp = min_disp_m
        self.fps = fps
        self.buf: deque = deque(maxlen=self.frames + 1)

    def reset(self) -> None:
        self.buf.clear()

    def push(self, frame_index: int, x: float, y: float) -> Optional[Intervention]:
        self.buf.append((x, y))
        if len(self.buf) <= self.frames:
            return None
        x0, y0 = self.buf[0]
        disp = math.hypot(x - x0, y - y0)
        if disp < self.min_disp:
            return Intervention(frame_index / self.fps, disp)
        return None


def teleport_to_route(state: WorldState, ahead_m: Optional[float] = None) -> float:
    """Move the ego to a clear route point ahead at lane speed; returns the new arc position."""
    ahead = state.config.teleport_ahead_m if ahead_m is None else ahead_m
    route = state.ego_route
    s = state.ego_s + ahead
    xy = state.actor_xy_near_ego()
    for _ in range(50):
        if s > route.length - 20.0:
            raise RouteExhausted("ego route exhausted")
        x, y, yaw = route.pose_at(s)
        d = np.hypot(xy[:, 0] - x, xy[:, 1] - y) if len(xy) else np.array([np.inf])
        if d.min() > 12.0:
            break
        s += 10.0
    speed = state.network.speed_limit[0] if state.kind == "urban" else 12.0
    x, y, yaw = route.pose_at(s)
    _, _, _, vcap = _route_lookup(route.pts, len(route.pts), route.period, route.ds, s)
    state.ego[:] = (x, y, yaw, min(speed, vcap), 0.0)
    state.ego_s = s
    state.contacts = frozenset()
    state.blocked = False
    return s


# ------------------------------------------------------------------ scenarios

def parse_scenario(name: str) -> tuple[str, int]:
    kind, _, loc = name.partition("-")
    if kind not in ("highway", "urban") or not loc.isdigit():
        raise ValueError(f"bad scenario name {name!r}; expected e.g. 'urban-3'")
    return kind, int(loc)


EVAL_SCENARIOS = ("highway-0", "highway-1", "urban-0", "urban-1", "urban-2",
                  "urban-3", "urban-4", "urban-5")

_NEIGHBORS = ((1, 0), (0, 1), (-1, 0), (0, -1))


def _random_walk(rng: np.random.Generator, start: tuple[int, int], first: tuple[int, int],
                 min_len: float) -> list[tuple[int, int]]:
    nodes = [start, first]
    total = BLOCK
    while total < min_len:
        a, b = nodes[-2], nodes[-1]
        d = (b[0] - a[0], b[1] - a[1])
        opts = [(b[0] + dx, b[1] + dy) for dx, dy in _NEIGHBORS
                if 0 <= b[0] + dx <= 3 and 0 <= b[1] + dy <= 3 and (dx, dy) != (-d[0], -d[1])]
        straight = (b[0] + d[0], b[1] + d[1])
        if straight in opts and rng.random() < 0.5:
            nxt = straight
        else:
            nxt = opts[int(rng.integers(len(opts)))]
        nodes.append(nxt)
        total += BLOCK
    return nodes


def _lane_route(nodes: list[tuple[int, int]], speed: float, radius: float = TURN_RADIUS_M) -> Route:
    off = LANE_WIDTH / 2
    P = [np.array(n, dtype=float) * BLOCK for n in nodes]
    dirs = [(P[k + 1] - P[k]) / BLOCK for k in range(len(P) - 1)]
    right = [np.array([d[1], -d[0]]) for d in dirs]
    verts = [P[0] + off * right[0]]
    turns_at = []
    for k in range(1, len(P) - 1):
        cross = dirs[k - 1][0] * dirs[k][1] - dirs[k - 1][1] * dirs[k][0]
        if abs(cross) > 0.5:
            verts.append(P[k] + off * (right[k - 1] + right[k]))
            turns_at.append((k, 1 if cross > 0 else -1))
    verts.append(P[-1] + off * right[-1])
    pts = _resample(_fillet(verts, radius), ROUTE_DS, speed)
    # arc positions of the junction centers passed along the way
    route = Route(pts)
    junctions, s = [], 0.0
    for k in range(1, len(P) - 1):
        s = route.project(P[k][0], P[k][1], s + BLOCK, back=BLOCK, ahead=BLOCK)
        junctions.append(s)
    route.junctions = np.array(junctions)
    route.turns = [(junctions[k - 1], sign) for k, sign in turns_at]
    return route


def _pack_routes(routes: list[Route]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pmax = max(len(r.pts) for r in routes)
    packed = np.zeros((len(routes), pmax, 4))
    for k, r in enumerate(routes):
        packed[k, :len(r.pts)] = r.pts
    return (packed, np.array([len(r.pts) for r in routes], dtype=np.int64),
            np.array([r.period for r in routes], dtype=float))


def make_scenario(kind: str, seed: int, location: int = 0, n_decisions: int = 800,
                  config: Optional[SimConfig] = None) -> WorldState:
    """Build a scenario.  ``location`` fixes the layout and ego route, ``seed`` the traffic."""
    cfg = config or SimConfig()
    kind_id = {"highway": 0, "urban": 1}[kind]
    loc_rng = np.random.default_rng([kind_id, location])
    rng = np.random.default_rng([kind_id, location, seed])
    duration = n_decisions * 7 / FPS
    if kind == "highway":
        return _make_highway(cfg, seed, location, loc_rng, rng, duration)
    return _make_urban(cfg, seed, location, loc_rng, rng, duration)


def _make_highway(cfg, seed, location, loc_rng, rng, duration) -> WorldState:
    net = _highway_network()
    L = HIGHWAY_LENGTH
    y0 = float(loc_rng.uniform(0.0, L))
    ego_len = 1.2 * 12.0 * duration + 500.0
    n = int(ego_len / ROUTE_DS) + 1
    s = np.arange(n) * ROUTE_DS
    ego_pts = np.column_stack([np.full(n, HIGHWAY_LANES_X[0]), y0 + s, np.zeros(n), np.full(n, 12.0)])
    ego_route = Route(ego_pts)
    routes, rows, taken = [], [], []
    for k in range(8):
        for _ in range(1000):
            lane = int(rng.integers(4))
            pos = float(rng.uniform(0.0, L))
            ok = all(l != lane or abs((pos - p + L / 2) % L - L / 2) > 30.0 for l, p in taken)
            ahead = (pos - y0) % L
            if lane == 0 and (ahead < 40.0 or ahead > L - 60.0):
                ok = False
            if lane == 1 and (ahead < 10.0 or ahead > L - 15.0):
                ok = False
            if ok:
                break
        taken.append((lane, pos))
        north = lane < 2
        speed = float(rng.uniform(10.5, 14.0)) if north else float(rng.uniform(11.0, 15.0))
        m = int(L / ROUTE_DS) + 1
        ys = np.arange(m) * ROUTE_DS if north else L - np.arange(m) * ROUTE_DS
        pts = np.column_stack([np.full(m, HIGHWAY_LANES_X[lane]), ys,
                               np.full(m, 0.0 if north else math.pi), np.full(m, speed)])
        routes.append(Route(pts, period=L))
        soff = pos if north else (L - pos) % L
        rows.append((soff, speed, CAR_DIMS, VEHICLE))
    return _assemble(cfg, "highway", net, ego_route, 0.0, routes, rows, seed, location)


def _make_urban(cfg, seed, location, loc_rng, rng, duration) -> WorldState:
    net = _urban_network(cfg)
    start = (int(loc_rng.integers(4)), int(loc_rng.integers(4)))
    opts = [(start[0] + dx, start[1] + dy) for dx, dy in _NEIGHBORS
            if 0 <= start[0] + dx <= 3 and 0 <= start[1] + dy <= 3]
    first = opts[int(loc_rng.integers(len(opts)))]
    ego_nodes = _random_walk(loc_rng, start, first, 1.2 * 12.0 * duration + 600.0)
    ego_route = _lane_route(ego_nodes, cfg.urban_speed)
    ego_s0 = 20.0
    ex, ey, _ = ego_route.pose_at(ego_s0)
    routes, rows, placed = [], [], [(ex, ey)]
    npc_len = 1.1 * 14.0 * duration + 600.0
    for k in range(12):
        for _ in range(1000):
            a = (int(rng.integers(4)), int(rng.integers(4)))
            nb = [(a[0] + dx, a[1] + dy) for dx, dy in _NEIGHBORS if 0 <= a[0] + dx <= 3 and 0 <= a[1] + dy <= 3]
            b = nb[int(rng.integers(len(nb)))]
            soff = float(rng.uniform(15.0, BLOCK - 25.0))
            nodes = _random_walk(rng, a, b, npc_len)
            route = _lane_route(nodes, cfg.urban_speed)
            px, py, _ = route.pose_at(soff)
            if all(math.hypot(px - qx, py - qy) > 20.0 for qx, qy in placed):
                break
        placed.append((px, py))
        routes.append(route)
        rows.append((soff, 0.0, CAR_DIMS, VEHICLE))
    for k in range(6):
        i, j = int(rng.integers(4)), int(rng.integers(3))
        horizontal = bool(rng.integers(2))
        a = np.array((j, i) if horizontal else (i, j), dtype=float) * BLOCK
        d = np.array((1.0, 0.0)) if horizontal else np.array((0.0, 1.0))
        r = np.array([d[1], -d[0]])
        t = float(rng.uniform(40.0, BLOCK - 40.0))
        side = LANE_WIDTH + SIDEWALK / 2
        verts = [a + d * (t - 12) + r * side, a + d * t + r * side,
                 a + d * t - r * side, a + d * (t + 12) - r * side]
        verts = verts + verts[-2::-1]
        pts = _resample(np.array(verts), ROUTE_DS, cfg.ped_speed)
        route = Route(pts, period=(len(pts) - 1) * ROUTE_DS)
        routes.append(route)
        rows.append((float(rng.uniform(0.0, route.period)), cfg.ped_speed, PED_DIMS, PEDESTRIAN))
    return _assemble(cfg, "urban", net, ego_route, ego_s0, routes, rows, seed, location)


def _assemble(cfg, kind, net, ego_route, ego_s0, routes, rows, seed, location) -> WorldState:
    packed, rn, rp = _pack_routes(routes)
    n = len(rows)
    A = np.zeros((n, 8))
    cls = np.zeros(n, dtype=np.int64)
    for k, (soff, speed, dims, c) in enumerate(rows):
        x, y, yaw, _ = _route_lookup(packed[k], rn[k], rp[k], ROUTE_DS, soff)
        A[k] = (x, y, yaw, speed, soff, dims[0], dims[1], dims[2])
        cls[k] = c
    ex, ey, eyaw = ego_route.pose_at(ego_s0)
    ego = np.array([ex, ey, eyaw, 0.0, 0.0])
    return WorldState(kind, net, ego, ego_route, ego_s0, A, cls, np.arange(1, n + 1),
                      np.arange(n, dtype=np.int64), packed, rn, rp, rng_seed=seed,
                      location=location, config=cfg)


# --------------------------------------------------------------------- expert

LOOKAHEAD_M = 10.0
STEER_DEADBAND = math.radians(10.0)
STOP_CORRIDOR = (12.0, 3.0)
SLOW_RANGE_M = 25.0


def _rel_frame(state: WorldState) -> tuple[np.ndarray, np.ndarray]:
    """Actor (forward, lateral) offsets from the ego center."""
    xy = state.actor_xy_near_ego()
    yaw = state.ego[2]
    fx, fy = -math.sin(yaw), math.cos(yaw)
    dx = xy[:, 0] - state.ego[0]
    dy = xy[:, 1] - state.ego[1]
    return dx * fx + dy * fy, dx * fy - dy * fx


def expert_action(state: WorldState) -> Action:
    """Route-following rule-based driver standing in for the in-game navigator."""
    route = state.ego_route
    s = state.ego_s
    if s + LOOKAHEAD_M > route.length:
        raise RouteExhausted("ego route exhausted")
    x, y, yaw = state.ego[0], state.ego[1], state.ego[2]
    tx, ty, _ = route.pose_at(s + LOOKAHEAD_M)
    err = _wrap_pi(math.atan2(-(tx - x), ty - y) - yaw)
    lateral = "left" if err > STEER_DEADBAND else "right" if err < -STEER_DEADBAND else "straight"
    return Action(lateral, _expert_speed(state))


def _expert_speed(state: WorldState) -> str:
    el, ew = EGO_DIMS[0], EGO_DIMS[1]
    x, y, yaw = state.ego[0], state.ego[1], state.ego[2]
    fx, fy = -math.sin(yaw), math.cos(yaw)
    xy = state.actor_xy_near_ego()
    A = state.actors
    clen, cwid = STOP_CORRIDOR
    cx = x + fx * (el / 2 + clen / 2)
    cy = y + fy * (el / 2 + clen / 2)
    fwd, lat = _rel_frame(state)
    for k in range(len(A)):
        if fwd[k] < -10.0 or fwd[k] > 40.0:
            continue
        if rect_overlap(cx, cy, yaw, clen, cwid, xy[k, 0], xy[k, 1], A[k, YAW], A[k, LEN], A[k, WID], 0.0):
            return "stop"
    s = state.ego_s
    route = state.ego_route
    for sj in route.junctions:
        if -3.0 <= sj - s <= 20.0:
            jx, jy, _ = route.pose_at(sj)
            for k in range(len(A)):
                if state.actor_class[k] != VEHICLE or A[k, V] < 0.3:
                    continue
                px, py = xy[k]
                dist = math.hypot(jx - px, jy - py)
                if dist > 14.0 or abs(_wrap_pi(A[k, YAW] - yaw)) < 0.5:
                    continue
                vx, vy = -math.sin(A[k, YAW]), math.cos(A[k, YAW])
                if dist < 7.0 or vx * (jx - px) + vy * (jy - py) > 0.0:
                    return "stop"
            break
    for st, _ in route.turns:
        if -5.0 <= st - s <= SLOW_RANGE_M:
            return "slow"
    for k in range(len(A)):
        if state.actor_class[k] == VEHICLE:
            if 0.0 < fwd[k] < el / 2 + SLOW_RANGE_M and abs(lat[k]) < 0.5 * (ew + A[k, WID]) + 0.6:
                return "slow"
        elif 0.0 < fwd[k] < 30.0 and abs(lat[k]) < 6.0:
            return "slow"
    return "fast"


# ----------------------------------------------------------- scripted scenes

def make_scripted(route_vertices: Sequence[tuple[float, float]],
                  actors: Sequence[tuple[str, float, float, float, float]] = (),
                  ego_s: float = 0.0, ego_speed: float = 0.0, kind: str = "urban",
                  config: Optional[SimConfig] = None, fillet_m: float = TURN_RADIUS_M) -> WorldState:
    """Hand-built scene for tests: ego on a polyline route, actors parked or cruising.

    ``actors`` rows are (class, x, y, yaw, speed); each drives straight along its yaw.
    """
    cfg = config or SimConfig()
    verts = [np.array(v, dtype=float) for v in route_vertices]
    pts = _resample(_fillet(verts, fillet_m) if len(verts) > 2 else np.array(verts), ROUTE_DS, cfg.urban_speed)
    route = Route(pts)
    junctions, turns = [], []
    s_acc = 0.0
    for a, c, b in zip(verts[:-2], verts[1:-1], verts[2:]):
        s_acc += float(np.linalg.norm(c - a))
        d1, d2 = c - a, b - c
        cross = d1[0] * d2[1] - d1[1] * d2[0]
        junctions.append(s_acc)
        if abs(cross) > 1e-9:
            turns.append((s_acc, 1 if cross > 0 else -1))
    route.junctions = np.array(junctions)
    route.turns = turns
    routes, rows = [], []
    for name, ax, ay, ayaw, speed in actors:
        fwd = np.array([-math.sin(ayaw), math.cos(ayaw)])
        n = int(2000.0 / ROUTE_DS) + 1
        s = np.arange(n) * ROUTE_DS
        p = np.column_stack([ax + fwd[0] * s, ay + fwd[1] * s, np.full(n, wrap_angle(ayaw)), np.full(n, speed)])
        routes.append(Route(p))
        cls = VEHICLE if name == "vehicle" else PEDESTRIAN
        rows.append((0.0, speed, CAR_DIMS if cls == VEHICLE else PED_DIMS, cls))
    if not routes:
        net = RoadNetwork(kind, [], LANE_WIDTH, [cfg.urban_speed], [], np.zeros((0, 4, 2)), np.zeros((0, 5)))
        ex, ey, eyaw = route.pose_at(ego_s)
        return WorldState(kind, net, np.array([ex, ey, eyaw, ego_speed, 0.0]), route, ego_s,
                          np.zeros((0, 8)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
                          np.zeros(0, dtype=np.int64), np.zeros((1, 2, 4)), np.array([2], dtype=np.int64),
                          np.zeros(1), config=cfg)
    net = RoadNetwork(kind, [], LANE_WIDTH, [cfg.urban_speed], [], np.zeros((0, 4, 2)), np.zeros((0, 5)))
    st = _assemble(cfg, kind, net, route, ego_s, routes, rows, 0, 0)
    st.ego[3] = ego_speed
    return st
