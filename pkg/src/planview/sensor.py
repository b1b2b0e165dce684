"""Synthetic perception with a noise model calibrated to target 3D-estimation errors.

Depth and size noise are multiplicative log-normal, yaw noise is von Mises.
Each family drives exactly one metric, so the three calibrations decouple:

    abs_rel(s) = E|exp(e) - 1|            = exp(s^2/2) (2 Phi(s) - 1)
    os(k)      = E (1 + cos n) / 2        = (1 + I1(k)/I0(k)) / 2
    dim(s)     = E min(r, 1/r), r = prod exp(e_i) = 2 exp(3 s^2/2) Phi(-sqrt(3) s)
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.special import i0e, i1e, ndtr

from .geometry import (CameraIntrinsics, Detection2D, Estimate3D, PlanPose, camera_measurement,
                       detection_box, in_fov, local_to_global_yaw, plan_location, wrap_angle)
from .world import CLASS_NAMES, HGT, LEN, WID, WorldState

MAX_DEPTH_M = 64.0

# per-class accuracy the synthetic 3D estimates are calibrated to
ACCURACY_TARGETS = {
    "vehicle": {"abs_rel": 0.102, "os": 0.945, "dim": 0.889},
    "pedestrian": {"abs_rel": 0.059, "os": 0.873, "dim": 0.968},
}
DEFAULT_MISS_RATE = {"vehicle": 0.03, "pedestrian": 0.05}


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class ClassNoise:
    depth_sigma_log: float = 0.0
    yaw_kappa: float = math.inf         # inf: exact yaw
    dim_sigma_log: float = 0.0
    miss_rate: float = 0.0

    def __post_init__(self):
        if min(self.depth_sigma_log, self.yaw_kappa, self.dim_sigma_log) < 0:
            raise ValueError("noise parameters must be nonnegative")
        if not 0.0 <= self.miss_rate < 1.0:
            raise ValueError("miss_rate must lie in [0, 1)")


@dataclass(frozen=True)
class NoiseProfile:
    vehicle: ClassNoise = field(default_factory=ClassNoise)
    pedestrian: ClassNoise = field(default_factory=ClassNoise)

    def for_class(self, name: str) -> ClassNoise:
        return getattr(self, name)

    def to_config(self) -> dict[str, float]:
        out = {}
        for cls in ("vehicle", "pedestrian"):
            for k, v in asdict(self.for_class(cls)).items():
                out[f"sensor.{cls}.{k}"] = v
        return out

    @classmethod
    def from_config(cls, cfg: dict) -> "NoiseProfile":
        parts = {}
        for name in ("vehicle", "pedestrian"):
            kw = {k: float(cfg[f"sensor.{name}.{k}"]) for k in ClassNoise.__dataclass_fields__
                  if f"sensor.{name}.{k}" in cfg}
            parts[name] = ClassNoise(**kw)
        return cls(**parts)


@dataclass(frozen=True)
class SensedObject:
    actor_id: int
    object_class: str
    detection: Detection2D
    estimate: Estimate3D
    truth: Estimate3D
    truth_x_center_offset: float


# ------------------------------------------------------------------ closed forms

def expected_abs_rel(sigma: float) -> float:
    return math.exp(sigma * sigma / 2) * (2 * ndtr(sigma) - 1)


def expected_os(kappa: float) -> float:
    if math.isinf(kappa):
        return 1.0
    return 0.5 * (1.0 + float(i1e(kappa) / i0e(kappa)))


def expected_dim(sigma: float) -> float:
    t = math.sqrt(3.0) * sigma
    return 2.0 * math.exp(t * t / 2) * float(ndtr(-t))


def _bisect(f, target, lo, hi, increasing, iters=60):
    flo, fhi = f(lo), f(hi)
    inside = (flo <= target <= fhi) if increasing else (fhi <= target <= flo)
    if not inside:
        raise CalibrationError(f"target {target} outside reachable range [{min(flo, fhi)}, {max(flo, fhi)}]")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if (f(mid) < target) == increasing:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def calibrate_class(abs_rel: float, os: float, dim: float, miss_rate: float = 0.0) -> ClassNoise:
    if abs_rel < 0 or not 0.5 <= os <= 1.0 or not 0.0 < dim <= 1.0:
        raise CalibrationError(f"targets out of range: abs_rel={abs_rel}, os={os}, dim={dim}")
    depth = 0.0 if abs_rel == 0 else _bisect(expected_abs_rel, abs_rel, 0.0, 3.0, True)
    if os == 1.0:
        kappa = math.inf
    else:
        # bisect in log-kappa; os(kappa) increases with kappa
        lk = _bisect(lambda t: expected_os(math.exp(t)), os, -20.0, 25.0, True)
        kappa = math.exp(lk)
    size = 0.0 if dim == 1.0 else _bisect(expected_dim, dim, 0.0, 3.0, False)
    return ClassNoise(depth, kappa, size, miss_rate)


def calibrate(targets: Optional[dict] = None, miss_rates: Optional[dict] = None) -> NoiseProfile:
    """Noise profile whose expected metrics hit the per-class targets."""
    targets = ACCURACY_TARGETS if targets is None else targets
    miss_rates = DEFAULT_MISS_RATE if miss_rates is None else miss_rates
    parts = {}
    for name in ("vehicle", "pedestrian"):
        t = targets.get(name, {"abs_rel": 0.0, "os": 1.0, "dim": 1.0})
        parts[name] = calibrate_class(t["abs_rel"], t["os"], t["dim"], miss_rates.get(name, 0.0))
    return NoiseProfile(**parts)


# ------------------------------------------------------------------- sampling

def draw_noise(noise: ClassNoise, rng: np.random.Generator, n: int) -> np.ndarray:
    """Noise draws, shape (n, 6): miss uniform, depth factor, yaw offset, 3 size factors.

    Every column is always drawn so the stream layout does not depend on the profile.
    """
    out = np.empty((n, 6))
    out[:, 0] = rng.random(n)
    out[:, 1] = np.exp(noise.depth_sigma_log * rng.standard_normal(n))
    kappa = noise.yaw_kappa
    yaw = rng.vonmises(0.0, kappa if not math.isinf(kappa) else 1.0, n)
    out[:, 2] = 0.0 if math.isinf(kappa) else yaw
    out[:, 3:] = np.exp(noise.dim_sigma_log * rng.standard_normal((n, 3)))
    return out


def apply_noise(truth: Estimate3D, draws: np.ndarray) -> Estimate3D:
    return Estimate3D(truth.depth_m * draws[1], wrap_angle(truth.local_yaw_rad + draws[2]),
                      truth.length_m * draws[3], truth.width_m * draws[4], truth.height_m * draws[5])


def sense(state: WorldState, intr: CameraIntrinsics, profile: NoiseProfile,
          rng: np.random.Generator) -> list[SensedObject]:
    """Noisy detections for every in-view actor within range, ordered by actor id."""
    ego = state.ego_pose
    xy = state.actor_xy_near_ego()
    c, s = math.cos(ego.yaw_rad), math.sin(ego.yaw_rad)
    dx = xy[:, 0] - ego.x_m
    dy = xy[:, 1] - ego.y_m
    cam_x = dx * c + dy * s
    cam_y = -dx * s + dy * c
    out = []
    for k in np.argsort(state.actor_ids, kind="stable"):
        X, Y = float(cam_x[k]), float(cam_y[k])
        if Y > MAX_DEPTH_M or not in_fov(X, Y, intr):
            continue
        a = state.actors[k]
        name = CLASS_NAMES[state.actor_class[k]]
        dims = (float(a[LEN]), float(a[WID]), float(a[HGT]))
        cam = PlanPose(X, Y, wrap_angle(float(a[2]) - ego.yaw_rad), "camera")
        det_true, truth = camera_measurement(cam, dims, intr, name)
        noise = profile.for_class(name)
        draws = draw_noise(noise, rng, 1)[0]
        if draws[0] < noise.miss_rate:
            continue
        est = apply_noise(truth, draws)
        # the noisy object slides along its viewing ray, so x stays consistent with depth
        scale = est.depth_m / truth.depth_m
        yaw_global = local_to_global_yaw(est.local_yaw_rad, det_true.x_center_offset, intr.focal_length_px)
        noisy_cam = PlanPose(X * scale, est.depth_m, yaw_global, "camera")
        det = detection_box(noisy_cam, (est.length_m, est.width_m, est.height_m), intr, name,
                            det_true.x_center_offset)
        out.append(SensedObject(int(state.actor_ids[k]), name, det, est, truth,
                                det_true.x_center_offset))
    return out


def reproject(objects: list[SensedObject], intr: CameraIntrinsics,
              use_truth: bool = False) -> list[tuple[str, PlanPose, tuple[float, float, float]]]:
    """Camera-frame plan poses recovered from (detection, estimate) pairs."""
    f = intr.focal_length_px
    out = []
    for o in objects:
        e = o.truth if use_truth else o.estimate
        x_off = o.truth_x_center_offset if use_truth else o.detection.x_center_offset
        X, Y = plan_location(e.depth_m, x_off, f)
        yaw = local_to_global_yaw(e.local_yaw_rad, x_off, f)
        out.append((o.object_class, PlanPose(X, Y, yaw, "camera"), (e.length_m, e.width_m, e.height_m)))
    return out
