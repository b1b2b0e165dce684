"""On-policy rollouts, metric aggregation, 3D-estimation metrics and the ablation runner."""
from __future__ import annotations

import math
import multiprocessing
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .geometry import CameraIntrinsics, Estimate3D, PlanPose
from .imitation import (DECISION_FRAMES, Dataset, feature_bank, features_from_bank, fit_linear,
                        frame_features, perplexity)
from .policy import LinearPolicy, observe, pid_control
from .raster import HISTORY_LENGTH, GridSpec
from .sensor import NoiseProfile, calibrate, sense
from .world import (RouteExhausted, SimConfig, StuckMonitor, advance, detect_collisions, make_scenario,
                    parse_scenario, teleport_to_route)


@dataclass
class RolloutMetrics:
    distance_m: float = 0.0
    collisions: int = 0
    interventions: int = 0
    steps: int = 0


@dataclass
class Estimation3DMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    os: float
    dim: float


class MetricsError(ValueError):
    pass


def run_rollout(policy, kind: str, seed: int, n_steps: int = 800, location: int = 0,
                intr: Optional[CameraIntrinsics] = None, profile: Optional[NoiseProfile] = None,
                use_truth: bool = False, config: Optional[SimConfig] = None) -> RolloutMetrics:
    """Closed-loop drive: sense, render, act, convert to controls, then 7 simulator frames."""
    intr = intr or CameraIntrinsics.from_fov()
    profile = calibrate() if profile is None else profile
    state = make_scenario(kind, seed, location, n_decisions=n_steps, config=config)
    cfg = state.config
    rng = np.random.default_rng([seed, location, 101])
    monitor = StuckMonitor(cfg.stuck_window_s, cfg.stuck_min_disp_m)
    history: deque = deque(maxlen=HISTORY_LENGTH)
    grid: Optional[GridSpec] = getattr(policy, "grid", None)
    blind = getattr(policy, "blind", False)
    m = RolloutMetrics()
    try:
        for _ in range(n_steps):
            view = None
            if grid is not None and not blind:
                sensed = sense(state, intr, profile, rng)
                view = observe(state, sensed, history, intr, grid, use_truth)
            action = policy.act(state, view)
            history.append(state.ego_pose)
            m.steps += 1
            for _ in range(DECISION_FRAMES):
                x0, y0 = state.ego[0], state.ego[1]
                advance(state, pid_control(action, state.ego_speed))
                m.distance_m += math.hypot(state.ego[0] - x0, state.ego[1] - y0)
                m.collisions += len(detect_collisions(state))
                if monitor.push(state.frame_index, state.ego[0], state.ego[1]):
                    m.interventions += 1
                    teleport_to_route(state)
                    monitor.reset()
    except RouteExhausted:
        pass
    return m


def _rollout_task(args) -> RolloutMetrics:
    policy, name, seed, n_steps, intr, profile, config = args
    kind, loc = parse_scenario(name)
    return run_rollout(policy, kind, seed, n_steps, loc, intr, profile, config=config)


def run_rollouts(policy, scenarios: Sequence[str], rollouts: int, seed: int = 0, n_steps: int = 800,
                 intr: Optional[CameraIntrinsics] = None, profile: Optional[NoiseProfile] = None,
                 config: Optional[SimConfig] = None, jobs: int = 1) -> dict[str, list[RolloutMetrics]]:
    """Rollout ``r`` of every scenario uses seed ``seed + r``; results do not depend on ``jobs``."""
    intr = intr or CameraIntrinsics.from_fov()
    profile = calibrate() if profile is None else profile
    tasks = [(policy, name, seed + r, n_steps, intr, profile, config)
             for name in scenarios for r in range(rollouts)]
    if jobs > 1 and len(tasks) > 1:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
            results = list(pool.map(_rollout_task, tasks))
    else:
        results = [_rollout_task(t) for t in tasks]
    return {name: results[k * rollouts:(k + 1) * rollouts] for k, name in enumerate(scenarios)}


def aggregate(metrics: Sequence[RolloutMetrics]) -> dict[str, float]:
    """Pooled per-100 m rates; the spreads are std across rollouts of per-rollout rates."""
    if not metrics:
        raise MetricsError("no rollouts to aggregate")
    dist = sum(m.distance_m for m in metrics)
    if dist <= 0:
        raise MetricsError("total distance is zero")
    n_int = sum(m.interventions for m in metrics)
    n_col = sum(m.collisions for m in metrics)

    def per_rollout(attr):
        return np.array([100.0 * getattr(m, attr) / m.distance_m if m.distance_m > 0 else 0.0
                         for m in metrics])

    return {
        "distance_between_interventions": dist / max(n_int, 1),
        "interventions_per_100m": 100.0 * n_int / dist,
        "interventions_per_100m_std": float(per_rollout("interventions").std()),
        "collisions_per_100m": 100.0 * n_col / dist,
        "collisions_per_100m_std": float(per_rollout("collisions").std()),
        "distance_m": dist,
        "rollouts": len(metrics),
    }


def estimation_metrics(pairs: Sequence[tuple[Estimate3D, Estimate3D]]) -> Estimation3DMetrics:
    """Depth, orientation and size accuracy of (estimate, truth) pairs."""
    if not pairs:
        raise MetricsError("no estimate/truth pairs")
    arr = np.array([e.as_list() + t.as_list() for e, t in pairs], dtype=float)
    d, yaw, vol = arr[:, 0], arr[:, 1], arr[:, 2] * arr[:, 3] * arr[:, 4]
    gt, gyaw, gvol = arr[:, 5], arr[:, 6], arr[:, 7] * arr[:, 8] * arr[:, 9]
    if np.any(gt <= 0) or np.any(gvol <= 0) or np.any(d <= 0) or np.any(vol <= 0):
        raise MetricsError("depths and volumes must be positive")
    err = d - gt
    ratio = np.maximum(d / gt, gt / d)
    vr = vol / gvol
    return Estimation3DMetrics(
        abs_rel=float(np.mean(np.abs(err) / gt)),
        sq_rel=float(np.mean(err ** 2 / gt)),
        rmse=float(np.sqrt(np.mean(err ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(d) - np.log(gt)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
        os=float(np.mean((1.0 + np.cos(yaw - gyaw)) / 2.0)),
        dim=float(np.mean(np.minimum(vr, 1.0 / vr))),
    )


# ------------------------------------------------------------------- reports

def format_table(rows: Sequence[dict], columns: Sequence[str], header: str = "") -> str:
    """Aligned text table followed by one ``row<TAB>key=value`` line per row."""
    cells = [[_fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[k]) for row in cells]) for k, c in enumerate(columns)]
    lines = [header] if header else []
    lines.append("  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip())
    lines.append("  ".join("-" * w for w in widths))
    for row in cells:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip())
    lines.append("")
    for r, row in zip(rows, cells):
        lines.append("row\t" + "\t".join(f"{c}={v}" for c, v in zip(columns, row)))
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


# ------------------------------------------------------------------- ablation

ABLATION_FRAMES = ("travel", "north_up")


def ablation_grid() -> list[GridSpec]:
    out = []
    for frame in ABLATION_FRAMES:
        for use_map in (False, True):
            for hist in (False, True):
                layers = ("vehicles", "pedestrians") + (("map",) if use_map else ()) + \
                         (("ego_history",) if hist else ())
                out.append(GridSpec(frame=frame, layers=layers))
    return out


def run_ablation(data: Dataset, scenarios: Sequence[str], rollouts: int = 10, n_steps: int = 800,
                 seed: int = 0, epochs: int = 2, lr: float = 1e-3, batch: int = 64,
                 grids: Optional[Sequence[GridSpec]] = None,
                 policy_factory: Callable = LinearPolicy,
                 intr: Optional[CameraIntrinsics] = None,
                 profile: Optional[NoiseProfile] = None, config: Optional[SimConfig] = None,
                 jobs: int = 1, optimizer: str = "adam") -> list[dict]:
    """Train one policy per plan-view option on the same data and evaluate it on- and off-policy."""
    intr = intr or CameraIntrinsics.from_fov()
    profile = calibrate() if profile is None else profile
    grids = ablation_grid() if grids is None else grids
    train, val = data.split()
    banks: dict[str, tuple] = {}
    rows = []
    for grid in grids:
        if grid == GridSpec(frame=grid.frame, layers=grid.layers):
            if grid.frame not in banks:
                banks[grid.frame] = feature_bank(data.frames, grid.frame, intr)
            X = features_from_bank(banks[grid.frame], grid.layers)
            y = np.array([f.action for f in data.frames], dtype=np.int64)
        else:
            X, y = frame_features(data.frames, grid, intr)
        w, _ = fit_linear(X[train], y[train], epochs, lr, batch, seed, optimizer)
        ppl = perplexity(w, (X[val], y[val]))
        per = run_rollouts(policy_factory(w, grid), scenarios, rollouts, seed, n_steps, intr,
                           profile, config, jobs)
        results = [m for ms in per.values() for m in ms]
        agg = aggregate(results) if results else {}
        rows.append({
            "frame": grid.frame,
            "map": int("map" in grid.layers),
            "history": int("ego_history" in grid.layers),
            "perplexity": ppl,
            "distance": agg.get("distance_between_interventions", float("nan")),
            "interventions": agg.get("interventions_per_100m", float("nan")),
            "interventions_std": agg.get("interventions_per_100m_std", float("nan")),
            "collisions": agg.get("collisions_per_100m", float("nan")),
            "collisions_std": agg.get("collisions_per_100m_std", float("nan")),
        })
    return rows


ABLATION_COLUMNS = ("frame", "map", "history", "perplexity", "distance", "interventions",
                    "interventions_std", "collisions", "collisions_std")
