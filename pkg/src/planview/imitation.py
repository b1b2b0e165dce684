"""Expert data collection with periodic action noise, behavior cloning, and perplexity."""
from __future__ import annotations

import gzip
import io
import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .actions import N_ACTIONS, Action
from .geometry import CameraIntrinsics, Detection2D, Estimate3D, PlanPose
from .policy import POOL, ego_features, feature_length, featurize, pid_control, pool_channel
from .raster import CHANNELS, HISTORY_LENGTH, GridSpec, PlanViewImage, render_plan_view
from .sensor import NoiseProfile, SensedObject, calibrate, reproject, sense
from .world import (FPS, RouteExhausted, SimConfig, StuckMonitor, _highway_network, _urban_network,
                    advance, detect_collisions, expert_action, make_scenario, parse_scenario,
                    teleport_to_route)

log = logging.getLogger(__name__)

DECISION_FRAMES = 7
# a corrupted frame and the 7 frames after it are dropped from training
NOISE_EXCLUDE_FRAMES = 8
VAL_EVERY = 10


class EmptyDatasetError(ValueError):
    pass


@dataclass
class Frame:
    scenario: str
    seed: int
    frame: int
    speed: float
    yaw_rate: float
    ego: tuple[float, float, float]
    objects: list[SensedObject]
    action: int
    noise_flag: bool

    def to_json(self) -> str:
        objs = [{"class": o.object_class,
                 "det": [o.detection.u_min, o.detection.v_min, o.detection.u_max, o.detection.v_max],
                 "x": o.detection.x_center_offset,
                 "est": o.estimate.as_list(),
                 "truth": o.truth.as_list(),
                 "truth_x": o.truth_x_center_offset,
                 "id": o.actor_id} for o in self.objects]
        rec = {"scenario": self.scenario, "frame": self.frame, "speed": self.speed,
               "yaw_rate": self.yaw_rate, "objects": objs, "action": self.action,
               "noise_flag": int(self.noise_flag), "seed": self.seed, "ego": list(self.ego)}
        return json.dumps(rec, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "Frame":
        r = json.loads(line)
        objs = []
        for o in r["objects"]:
            det = Detection2D(o["class"], *o["det"], o["x"])
            objs.append(SensedObject(int(o.get("id", -1)), o["class"], det, Estimate3D(*o["est"]),
                                     Estimate3D(*o["truth"]), o.get("truth_x", o["x"])))
        return cls(r["scenario"], int(r.get("seed", 0)), int(r["frame"]), r["speed"], r["yaw_rate"],
                   tuple(r.get("ego", (0.0, 0.0, 0.0))), objs, int(r["action"]), bool(r["noise_flag"]))


@dataclass
class Dataset:
    frames: list[Frame] = field(default_factory=list)
    seed: int = 0
    noise_period_s: float = 30.0

    def __len__(self) -> int:
        return len(self.frames)

    def rollouts(self) -> list[tuple[str, int]]:
        seen: dict[tuple[str, int], None] = {}
        for f in self.frames:
            seen.setdefault((f.scenario, f.seed), None)
        return list(seen)

    def split(self) -> tuple[list[int], list[int]]:
        """(train, val) frame indices.

        Whole rollouts go to validation (every 10th, or the last one when there
        are fewer than 10); a single rollout is split at its last 10%.
        Noise-flagged frames never enter the training split.
        """
        keys = self.rollouts()
        if len(keys) == 1:
            n = len(self.frames)
            cut = n - max(n // VAL_EVERY, 1) if n > 1 else n
            train = [i for i in range(cut) if not self.frames[i].noise_flag]
            return train, list(range(cut, n))
        val_keys = {k for i, k in enumerate(keys) if i % VAL_EVERY == VAL_EVERY - 1} or {keys[-1]}
        train, val = [], []
        for i, f in enumerate(self.frames):
            if (f.scenario, f.seed) in val_keys:
                val.append(i)
            elif not f.noise_flag:
                train.append(i)
        return train, val

    def subset(self, idx: Iterable[int]) -> "Dataset":
        return Dataset([self.frames[i] for i in idx], self.seed, self.noise_period_s)

    def to_bytes(self) -> bytes:
        text = "".join(f.to_json() + "\n" for f in self.frames).encode()
        buf = io.BytesIO()
        with gzip.GzipFile(filename="", mode="wb", fileobj=buf, mtime=0) as gz:
            gz.write(text)
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, *paths) -> "Dataset":
        frames = []
        for p in paths:
            with gzip.open(p, "rt") as fh:
                frames.extend(Frame.from_json(line) for line in fh if line.strip())
        return cls(frames)


def collect(kind: str, seed: int, n_decision_steps: int, noise_period_s: float = 30.0,
            location: int = 0, intr: Optional[CameraIntrinsics] = None,
            profile: Optional[NoiseProfile] = None, config: Optional[SimConfig] = None) -> Dataset:
    """Drive the expert and record every frame with the expert's label.

    Every ``noise_period_s`` simulated seconds one decision step executes a
    uniformly random action instead; the frames it affects carry ``noise_flag``.
    """
    if n_decision_steps <= 0:
        raise ValueError("n_decision_steps must be positive")
    intr = intr or CameraIntrinsics.from_fov()
    profile = calibrate() if profile is None else profile
    state = make_scenario(kind, seed, location, n_decisions=n_decision_steps, config=config)
    cfg = state.config
    name = f"{kind}-{location}"
    sensor_rng = np.random.default_rng([seed, location, 17])
    noise_rng = np.random.default_rng([seed, location, 29])
    monitor = StuckMonitor(cfg.stuck_window_s, cfg.stuck_min_disp_m)
    next_noise = noise_period_s
    flag_left = 0
    frames: list[Frame] = []
    try:
        for _ in range(n_decision_steps):
            executed = expert_action(state)
            if state.clock_s >= next_noise - 1e-9:
                executed = Action.from_index(int(noise_rng.integers(N_ACTIONS)))
                flag_left = NOISE_EXCLUDE_FRAMES
                next_noise += noise_period_s
            for _ in range(DECISION_FRAMES):
                label = expert_action(state)
                sensed = sense(state, intr, profile, sensor_rng)
                frames.append(Frame(name, seed, state.frame_index, state.ego_speed, state.yaw_rate(),
                                    (float(state.ego[0]), float(state.ego[1]), float(state.ego[2])),
                                    sensed, label.index, flag_left > 0))
                flag_left = max(flag_left - 1, 0)
                advance(state, pid_control(executed, state.ego_speed))
                detect_collisions(state)
                if monitor.push(state.frame_index, state.ego[0], state.ego[1]):
                    teleport_to_route(state)
                    monitor.reset()
    except RouteExhausted:
        log.info("route exhausted after %d frames", len(frames))
    return Dataset(frames, seed, noise_period_s)


# ------------------------------------------------------------------- features

@lru_cache(maxsize=2)
def network_for(kind: str):
    return _highway_network() if kind == "highway" else _urban_network(SimConfig())


def plan_views(frames: Sequence[Frame], grid: GridSpec, intr: Optional[CameraIntrinsics] = None
               ) -> Iterator[PlanViewImage]:
    """Plan view of each recorded frame; ego history is rebuilt from earlier frames of the same rollout."""
    intr = intr or CameraIntrinsics.from_fov()
    history: list[PlanPose] = []
    key = None
    last_frame = -1
    for f in frames:
        if (f.scenario, f.seed) != key or f.frame < last_frame:
            key = (f.scenario, f.seed)
            history = []
        last_frame = f.frame
        ego = PlanPose(f.ego[0], f.ego[1], f.ego[2], "world")
        net = network_for(parse_scenario(f.scenario)[0])
        polys = net.polygons_near(ego.x_m, ego.y_m) if "map" in grid.layers else None
        yield render_plan_view(reproject(f.objects, intr), ego, grid, history, polys)
        if f.frame % DECISION_FRAMES == 0:
            history.append(ego)
            if len(history) > HISTORY_LENGTH:
                history.pop(0)


def frame_view(frames: Sequence[Frame], index: int, grid: GridSpec,
               intr: Optional[CameraIntrinsics] = None) -> PlanViewImage:
    """Plan view of ``frames[index]`` with the history its rollout had accumulated."""
    if not 0 <= index < len(frames):
        raise IndexError(f"frame {index} out of range (dataset has {len(frames)})")
    key = (frames[index].scenario, frames[index].seed)
    start = index
    while start > 0 and (frames[start - 1].scenario, frames[start - 1].seed) == key \
            and frames[start - 1].frame < frames[start].frame:
        start -= 1
    img = None
    for img in plan_views(frames[start:index + 1], grid, intr):
        pass
    return img


def frame_features(frames: Sequence[Frame], grid: GridSpec, intr: Optional[CameraIntrinsics] = None,
                   zero_plan_view: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Feature matrix and action labels of recorded frames."""
    X = np.zeros((len(frames), feature_length(len(grid.layers))))
    y = np.array([f.action for f in frames], dtype=np.int64)
    if zero_plan_view:
        blank = PlanViewImage.empty(grid)
        views: Iterable[PlanViewImage] = (blank for _ in frames)
    else:
        views = plan_views(frames, grid, intr)
    for n, (f, img) in enumerate(zip(frames, views)):
        X[n] = featurize(img, f.speed, f.yaw_rate, zero_plan_view=zero_plan_view)
    return X, y


def feature_bank(frames: Sequence[Frame], frame: str, intr: Optional[CameraIntrinsics] = None
                 ) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Pooled features of every channel plus the ego features, from one render per frame.

    ``features_from_bank`` assembles exactly what :func:`frame_features` returns
    for any layer selection on a default-sized grid, so several grids can share
    the rendering work.
    """
    grid = GridSpec(frame=frame, layers=CHANNELS)
    pooled = {name: np.zeros((len(frames), POOL * POOL)) for name in CHANNELS}
    ego = np.zeros((len(frames), 3))
    for n, (f, img) in enumerate(zip(frames, plan_views(frames, grid, intr))):
        for name in CHANNELS:
            pooled[name][n] = pool_channel(img.channels[name])
        ego[n] = ego_features(f.speed, f.yaw_rate)
    return pooled, ego


def features_from_bank(bank: tuple[dict[str, np.ndarray], np.ndarray],
                       layers: Sequence[str]) -> np.ndarray:
    pooled, ego = bank
    return np.hstack([pooled[name] for name in layers] + [ego])


# ------------------------------------------------------------------- training

def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(w: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
    lp = log_softmax(X @ w.T)
    return float(-lp[np.arange(len(y)), y].mean())


def cross_entropy_grad(w: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    p = np.exp(log_softmax(X @ w.T))
    p[np.arange(len(y)), y] -= 1.0
    return p.T @ X / len(y)


@dataclass
class TrainReport:
    train_ce: list[float] = field(default_factory=list)
    val_ce: list[float] = field(default_factory=list)


def fit_linear(X: np.ndarray, y: np.ndarray, epochs: int = 2, lr: float = 1e-3, batch: int = 64,
               seed: int = 0, optimizer: str = "adam", shuffle: bool = True,
               X_val: Optional[np.ndarray] = None, y_val: Optional[np.ndarray] = None
               ) -> tuple[np.ndarray, TrainReport]:
    """Mini-batch minimization of the mean softmax cross-entropy of a linear policy."""
    if len(y) == 0:
        raise EmptyDatasetError("no training frames")
    w = np.zeros((N_ACTIONS, X.shape[1]))
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    b1, b2, eps = 0.9, 0.999, 1e-8
    rng = np.random.default_rng(seed)
    report = TrainReport()
    t = 0
    for epoch in range(epochs):
        order = rng.permutation(len(y)) if shuffle else np.arange(len(y))
        for start in range(0, len(y), batch):
            idx = order[start:start + batch]
            g = cross_entropy_grad(w, X[idx], y[idx])
            t += 1
            if optimizer == "adam":
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                w -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
            elif optimizer == "sgd":
                w -= lr * g
            else:
                raise ValueError(f"unknown optimizer {optimizer!r}")
        report.train_ce.append(cross_entropy(w, X, y))
        if X_val is not None and len(y_val):
            report.val_ce.append(cross_entropy(w, X_val, y_val))
        log.info("epoch %d train ce %.4f val ce %s", epoch, report.train_ce[-1],
                 f"{report.val_ce[-1]:.4f}" if report.val_ce else "-")
    return w, report


def train_bc(data: Dataset, epochs: int = 2, lr: float = 1e-3, batch: int = 64,
             grid: Optional[GridSpec] = None, seed: int = 0, optimizer: str = "adam",
             zero_plan_view: bool = False, intr: Optional[CameraIntrinsics] = None
             ) -> tuple[np.ndarray, TrainReport]:
    if not len(data):
        raise EmptyDatasetError("dataset is empty")
    grid = grid or GridSpec()
    X, y = frame_features(data.frames, grid, intr, zero_plan_view)
    train, val = data.split()
    return fit_linear(X[train], y[train], epochs, lr, batch, seed, optimizer,
                      X_val=X[val], y_val=y[val])


def perplexity(w: np.ndarray, data, grid: Optional[GridSpec] = None,
               zero_plan_view: bool = False) -> float:
    """Mean negative log-likelihood (nats per frame) of the expert's actions.

    ``data`` is a :class:`Dataset` or a precomputed ``(X, y)`` pair.
    """
    if isinstance(data, Dataset):
        if not len(data):
            raise EmptyDatasetError("dataset is empty")
        X, y = frame_features(data.frames, grid or GridSpec(), zero_plan_view=zero_plan_view)
    else:
        X, y = data
        if len(y) == 0:
            raise EmptyDatasetError("dataset is empty")
    return cross_entropy(np.asarray(w, dtype=float), X, y)
