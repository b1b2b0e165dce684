"""Command-line front end: collect, train, drive, render, metrics3d, ablate."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .bench import (ABLATION_COLUMNS, aggregate, estimation_metrics, format_table, run_ablation,
                    run_rollouts)
from .config import ConfigError, load_settings
from .imitation import Dataset, collect, frame_view, train_bc
from .policy import ExpertPolicy, LinearPolicy, OccupancyPolicy, load_weights, save_weights
from .raster import CHANNELS, PlanViewImage, export_pgm
from .world import EVAL_SCENARIOS, parse_scenario

log = logging.getLogger("planview")

FRAME_NAMES = {"travel": "travel", "north": "north_up", "north_up": "north_up"}
DRIVE_COLUMNS = ("scenario", "rollouts", "distance", "interventions", "interventions_std",
                 "collisions", "collisions_std", "distance_m")


def _scenarios(arg: str) -> list[str]:
    names = list(EVAL_SCENARIOS) if arg == "all" else [s for s in arg.split(",") if s]
    for name in names:
        parse_scenario(name)
    return names


def _layers(use_map: bool, use_history: bool) -> tuple[str, ...]:
    return ("vehicles", "pedestrians") + (("map",) if use_map else ()) + \
        (("ego_history",) if use_history else ())


def _write(path: Optional[str], text: str) -> None:
    if path:
        Path(path).write_text(text)
    sys.stdout.write(text)


def _key_value(s: str) -> tuple[str, str]:
    if "=" not in s:
        raise argparse.ArgumentTypeError(f"expected key=value, got {s!r}")
    k, v = s.split("=", 1)
    return k.strip(), v.strip()


# ------------------------------------------------------------------ commands

def cmd_collect(args, settings) -> int:
    kind, loc = parse_scenario(args.scenario)
    steps = args.steps if args.steps is not None else settings.policy["steps"]
    data = collect(kind, args.seed, steps, args.noise_period, loc, profile=settings.noise(),
                   config=settings.sim)
    data.save(args.out)
    n_flag = sum(f.noise_flag for f in data.frames)
    print(f"{args.out}: {len(data)} frames ({n_flag} noise-flagged) from {args.scenario} seed {args.seed}")
    return 0


def cmd_train(args, settings) -> int:
    data = Dataset.load(*args.data)
    grid = settings.grid(frame=FRAME_NAMES[args.frame], layers=_layers(args.map, args.history))
    pol = settings.policy
    w, report = train_bc(data,
                         epochs=args.epochs if args.epochs is not None else pol["epochs"],
                         lr=args.lr if args.lr is not None else pol["lr"],
                         batch=args.batch if args.batch is not None else pol["batch"],
                         grid=grid, seed=args.seed, optimizer=pol["optimizer"],
                         zero_plan_view=args.blind)
    save_weights(w, args.out)
    for k, ce in enumerate(report.train_ce):
        val = f"{report.val_ce[k]:.6f}" if report.val_ce else "nan"
        print(f"epoch {k + 1}\ttrain_nll={ce:.6f}\tval_nll={val}")
    print(f"wrote {args.out} ({w.shape[0]}x{w.shape[1]}, layers {','.join(grid.layers)})")
    return 0


def _make_policy(args, settings):
    if args.policy == "expert":
        return ExpertPolicy()
    if args.policy == "occupancy":
        return OccupancyPolicy(settings.grid(frame="travel",
                                             layers=("vehicles", "pedestrians", "map")))
    if not args.weights:
        raise SystemExit("drive --policy bc needs --weights")
    grid = settings.grid(frame=FRAME_NAMES[args.frame], layers=_layers(args.map, args.history))
    return LinearPolicy(load_weights(args.weights), grid, blind=args.blind)


def cmd_drive(args, settings) -> int:
    policy = _make_policy(args, settings)
    names = _scenarios(args.scenario)
    rollouts = args.rollouts if args.rollouts is not None else settings.policy["rollouts"]
    steps = args.steps if args.steps is not None else settings.policy["steps"]
    per = run_rollouts(policy, names, rollouts, args.seed, steps, profile=settings.noise(),
                       config=settings.sim, jobs=args.jobs)
    rows = []
    for name in names + (["all"] if len(names) > 1 else []):
        ms = [m for ms in per.values() for m in ms] if name == "all" else per[name]
        agg = aggregate(ms)
        rows.append({"scenario": name, "rollouts": len(ms),
                     "distance": agg["distance_between_interventions"],
                     "interventions": agg["interventions_per_100m"],
                     "interventions_std": agg["interventions_per_100m_std"],
                     "collisions": agg["collisions_per_100m"],
                     "collisions_std": agg["collisions_per_100m_std"],
                     "distance_m": agg["distance_m"]})
    header = (f"# policy={args.policy} seed={args.seed} steps={steps}; distance is meters between "
              f"interventions, rates are per 100 m, std is across rollouts")
    _write(args.report, format_table(rows, DRIVE_COLUMNS, header))
    return 0


def cmd_render(args, settings) -> int:
    data = Dataset.load(args.data)
    extra = () if args.channel == "objects" else (args.channel,)
    layers = tuple(dict.fromkeys(("vehicles", "pedestrians") + extra))
    grid = settings.grid(frame=FRAME_NAMES[args.view], layers=layers)
    img = frame_view(data.frames, args.frame, grid)
    if args.channel == "objects":
        merged = PlanViewImage.empty(grid)
        merged.channels["vehicles"] = img.channels["vehicles"] | img.channels["pedestrians"]
        img, channel = merged, "vehicles"
    else:
        channel = args.channel
    Path(args.out).write_bytes(export_pgm(img, channel))
    print(f"wrote {args.out} (frame {args.frame}, {args.view} view, {args.channel})")
    return 0


def cmd_metrics3d(args, settings) -> int:
    data = Dataset.load(*args.data)
    rows = []
    for cls in ("vehicle", "pedestrian"):
        pairs = [(o.estimate, o.truth) for f in data.frames for o in f.objects
                 if o.object_class == cls]
        if not pairs:
            continue
        m = estimation_metrics(pairs)
        rows.append({"class": cls, "n": len(pairs), **vars(m)})
    cols = ("class", "n", "abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3",
            "os", "dim")
    _write(args.report, format_table(rows, cols, "# 3D estimation accuracy of recorded detections"))
    return 0


def cmd_ablate(args, settings) -> int:
    names = _scenarios(args.scenarios)
    pol = settings.policy
    steps = args.steps if args.steps is not None else pol["steps"]
    if args.data:
        data = Dataset.load(*args.data)
    else:
        parts = []
        for k, name in enumerate(names):
            kind, loc = parse_scenario(name)
            parts.extend(collect(kind, args.seed + 1000 + k, args.collect_steps, location=loc,
                                 profile=settings.noise(), config=settings.sim).frames)
        data = Dataset(parts, args.seed)
    rollouts = args.rollouts if args.rollouts is not None else pol["rollouts"]
    grids = [settings.grid(frame=f, layers=_layers(m, h))
             for f in ("travel", "north_up") for m in (False, True) for h in (False, True)]
    rows = run_ablation(data, names, rollouts, steps, args.seed, pol["epochs"], pol["lr"],
                        pol["batch"], grids, profile=settings.noise(), config=settings.sim,
                        jobs=args.jobs, optimizer=pol["optimizer"])
    header = (f"# plan-view ablation: {len(data)} frames, {len(names)} scenarios x {rollouts} "
              f"rollouts x {steps} steps; perplexity is held-out mean NLL (nats), "
              f"std is across rollouts")
    _write(args.out, format_table(rows, ABLATION_COLUMNS, header))
    return 0


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="planview", description=__doc__)
    p.add_argument("--config", help="key = value settings file (default: $MPV_CONFIG)")
    p.add_argument("--set", dest="overrides", action="append", type=_key_value, default=[],
                   metavar="KEY=VALUE", help="override one setting, e.g. sim.ped_speed=1.2")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("collect", help="record expert driving with periodic action noise")
    c.add_argument("--scenario", required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--steps", type=int, help="decision steps (7 frames each)")
    c.add_argument("--noise-period", type=float, default=30.0, help="seconds between noise events")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_collect)

    t = sub.add_parser("train", help="fit a linear behavior-cloning policy")
    t.add_argument("--data", nargs="+", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--frame", choices=("travel", "north"), default="travel")
    t.add_argument("--map", action="store_true")
    t.add_argument("--history", action="store_true")
    t.add_argument("--blind", action="store_true", help="zero the plan-view features")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("drive", help="closed-loop evaluation")
    d.add_argument("--policy", choices=("expert", "occupancy", "bc"), required=True)
    d.add_argument("--weights")
    d.add_argument("--scenario", default="all", help="scenario name, comma list, or 'all'")
    d.add_argument("--rollouts", type=int)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--steps", type=int)
    d.add_argument("--frame", choices=("travel", "north"), default="travel")
    d.add_argument("--map", action="store_true")
    d.add_argument("--history", action="store_true")
    d.add_argument("--blind", action="store_true")
    d.add_argument("--jobs", type=int, default=1)
    d.add_argument("--report")
    d.set_defaults(func=cmd_drive)

    r = sub.add_parser("render", help="write one recorded frame's plan view as PGM")
    r.add_argument("--data", required=True)
    r.add_argument("--frame", type=int, required=True, help="frame index in the dataset")
    r.add_argument("--view", choices=("travel", "north"), default="travel")
    r.add_argument("--channel", choices=("objects",) + tuple(CHANNELS), default="objects")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    m = sub.add_parser("metrics3d", help="3D estimation accuracy of a dataset's detections")
    m.add_argument("--data", nargs="+", required=True)
    m.add_argument("--report")
    m.set_defaults(func=cmd_metrics3d)

    a = sub.add_parser("ablate", help="train and evaluate one policy per plan-view option")
    a.add_argument("--scenarios", default="all")
    a.add_argument("--data", nargs="+", help="datasets to train on (default: collect fresh)")
    a.add_argument("--collect-steps", type=int, default=900)
    a.add_argument("--rollouts", type=int)
    a.add_argument("--steps", type=int)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = load_settings(args.config, dict(args.overrides))
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return args.func(args, settings)


if __name__ == "__main__":
    sys.exit(main())
