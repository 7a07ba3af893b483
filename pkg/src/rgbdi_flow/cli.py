"""Command line entry point: simulate, run, flowfield, report."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml

from . import sim
from .datasets import SequenceBundle, load_sequence, save_sequence
from .metrics import (
    aggregate,
    format_report,
    read_subsequence_csv,
    write_subsequence_csv,
)
from .pipeline import RunConfig, SequenceRunner, run_sequences
from .rangeflow import DegenerateSystemError, rigid_flow

log = logging.getLogger("rgbdi_flow")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DEGENERATE = 3

STATE_COLUMNS = ["t", "vx", "vy", "vz", "wx", "wy", "wz", "gx", "gy", "gz",
                 "bgx", "bgy", "bgz", "bax", "bay", "baz"]


class InputError(Exception):
    pass


def _on_off(text: str) -> bool:
    t = text.lower()
    if t in ("on", "true", "1", "yes"):
        return True
    if t in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on or off, got {text!r}")


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from None
    data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise InputError(f"config {path} must hold a mapping")
    return {k.replace("-", "_"): v for k, v in data.items()}


def resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Defaults, overridden by the config file, overridden by explicit flags."""
    out = dict(defaults)
    if getattr(args, "config", None):
        file_cfg = load_config_file(args.config)
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        out.update(file_cfg)
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    return out


def _run_config(values: dict) -> RunConfig:
    names = {f.name for f in fields(RunConfig)}
    try:
        return RunConfig(**{k: v for k, v in values.items() if k in names}).validate()
    except (TypeError, ValueError) as exc:
        raise InputError(str(exc)) from None


SIM_DEFAULTS = {
    "num_frames": 60,
    "seed": 0,
    "out": None,
    "trajectory": "random",
    "scene": None,
    "depth_noise": 0.1,
    "camera_rate": sim.CAMERA_RATE,
    "imu_rate": sim.IMU_RATE,
    "gyro_noise_density": sim.GYRO_NOISE_DENSITY,
    "accel_noise_density": sim.ACCEL_NOISE_DENSITY,
}

RUN_DEFAULTS = {f.name: f.default for f in fields(RunConfig)} | {"out": None}


def cmd_simulate(args) -> int:
    cfg = resolve(args, SIM_DEFAULTS)
    if cfg["out"] is None:
        raise InputError("--out is required")
    if cfg["num_frames"] < 2:
        raise InputError("need at least 2 frames")
    try:
        scene = sim.load_scene(cfg["scene"]) if cfg["scene"] else sim.default_scene()
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot load scene: {exc}") from None
    duration = (cfg["num_frames"] - 1) / cfg["camera_rate"] + 0.1
    kind = cfg["trajectory"]
    if kind == "random":
        traj = None
    elif kind == "orbit":
        traj = sim.orbit_trajectory(duration)
    elif kind == "stationary":
        traj = sim.stationary_trajectory(duration)
    else:
        raise InputError(f"unknown trajectory {kind!r}")
    seq = sim.simulate_sequence(
        cfg["num_frames"], seed=cfg["seed"], scene=scene, camera_rate=cfg["camera_rate"],
        imu_rate=cfg["imu_rate"], depth_noise=cfg["depth_noise"],
        gyro_density=cfg["gyro_noise_density"], accel_density=cfg["accel_noise_density"],
        traj=traj,
    )
    out = Path(cfg["out"])
    try:
        save_sequence(SequenceBundle.from_simulation(seq), out)
        (out / "scene.txt").write_text(sim.format_scene(scene))
        (out / "config.json").write_text(json.dumps(cfg, indent=2, default=str) + "\n")
    except OSError as exc:
        raise InputError(f"cannot write to {out}: {exc}") from None
    print(f"wrote {len(seq.frames)} frames and {len(seq.imu)} IMU samples to {out}")
    return EXIT_OK


def _load(paths, config: RunConfig) -> list[SequenceBundle]:
    bundles = []
    for p in paths:
        try:
            bundles.append(load_sequence(p, config.depth_is_range, load_imu=config.imu))
        except (OSError, ValueError) as exc:
            raise InputError(str(exc)) from None
    return bundles


def _write_states(path: Path, result) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(STATE_COLUMNS) + "\n")
        for l, t in enumerate(result.times):
            g = result.gravity if result.gravity is not None else [np.nan] * 3
            bg = result.bias.gyro if result.bias is not None else [np.nan] * 3
            ba = result.bias.accel if result.bias is not None else [np.nan] * 3
            vals = [t, *result.twists[l], *g, *bg, *ba]
            fh.write(",".join(f"{x:.9g}" for x in vals) + "\n")


def cmd_run(args) -> int:
    values = resolve(args, RUN_DEFAULTS)
    config = _run_config(values)
    if values["out"] is None:
        raise InputError("--out is required")
    bundles = _load(args.sequences, config)
    try:
        report, runs = run_sequences(bundles, config)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    out = Path(values["out"])
    out.mkdir(parents=True, exist_ok=True)
    echo = config.as_dict() | {"out": str(out), "sequences": [str(p) for p in args.sequences]}
    (out / "config.json").write_text(json.dumps(echo, indent=2) + "\n")
    states = out / "states"
    states.mkdir(exist_ok=True)
    n_total = n_degenerate = 0
    for i, run in enumerate(runs):
        for r in run.results:
            n_total += 1
            if r.degenerate:
                n_degenerate += 1
                log.warning("sequence %d window %d degenerate: %s", i, r.start, r.reason)
                continue
            _write_states(states / f"seq{i:02d}_start{r.start:05d}.csv", r)
    if report is not None:
        (out / "report.txt").write_text(format_report(report))
        write_subsequence_csv(out / "subsequences.csv", report.subsequences)
        print(format_report(report), end="")
    else:
        print(f"{n_total - n_degenerate} windows estimated (no ground truth for metrics)")
    if n_total and n_degenerate == n_total:
        print("all windows degenerate", file=sys.stderr)
        return EXIT_DEGENERATE
    return EXIT_OK


def cmd_flowfield(args) -> int:
    values = resolve(args, RUN_DEFAULTS)
    config = _run_config(values | {"marginalize": False})
    if values["out"] is None:
        raise InputError("--out is required")
    bundle = _load([args.sequence], config)[0]
    n = len(bundle.frames)
    N = config.frames
    if not 0 <= args.frame < n:
        raise InputError(f"frame index {args.frame} outside 0..{n - 1}")
    if n < N:
        raise InputError(f"sequence has fewer than {N} frames")
    start = min(args.frame, n - N)
    runner = SequenceRunner(bundle, config.pyramid, config.workers)
    try:
        result = runner.run_window(start, config)
    except (ValueError, DegenerateSystemError) as exc:
        raise InputError(str(exc)) from None
    if result.degenerate:
        print(f"window at frame {start} is degenerate: {result.reason}", file=sys.stderr)
        return EXIT_DEGENERATE
    twist = result.twists[args.frame - start]
    frame = bundle.frames[args.frame]
    K = frame.intrinsics
    vv, uu = np.nonzero(frame.valid)
    pts = K.backproject(uu.astype(float), vv.astype(float), frame.depth[vv, uu])
    vel = rigid_flow(pts, twist)
    out = Path(values["out"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"flow_{args.frame:05d}.csv"
    np.savetxt(path, np.column_stack([uu, vv, pts, vel]), delimiter=",",
               header="u,v,x,y,z,vx,vy,vz", comments="", fmt="%.9g")
    (out / "config.json").write_text(json.dumps(
        config.as_dict() | {"frame": args.frame, "sequence": str(args.sequence),
                            "twist": [float(x) for x in twist]}, indent=2) + "\n")
    print(f"wrote {len(pts)} points to {path}")
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    for d in args.runs:
        path = Path(d) / "subsequences.csv"
        if not path.is_file():
            raise InputError(f"missing {path}")
        rep = aggregate(read_subsequence_csv(path))
        rows.append((str(d), rep))
        print(f"== {d}")
        print(format_report(rep), end="")
    if args.out:
        Path(args.out).write_text("".join(f"== {d}\n{format_report(r)}" for d, r in rows))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rgbdi-flow", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="render a synthetic depth + IMU sequence")
    s.add_argument("--out")
    s.add_argument("--config")
    s.add_argument("--num-frames", dest="num_frames", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--trajectory", choices=["random", "orbit", "stationary"])
    s.add_argument("--scene", help="scene file with plane/box lines")
    s.add_argument("--depth-noise", dest="depth_noise", type=float)
    s.add_argument("--camera-rate", dest="camera_rate", type=float)
    s.add_argument("--imu-rate", dest="imu_rate", type=float)
    s.add_argument("--gyro-noise-density", dest="gyro_noise_density", type=float)
    s.add_argument("--accel-noise-density", dest="accel_noise_density", type=float)
    s.set_defaults(func=cmd_simulate)

    def run_flags(q):
        q.add_argument("--out")
        q.add_argument("--config")
        q.add_argument("--frames", type=int, help="window size N (2-5)")
        q.add_argument("--imu", type=_on_off, help="on|off")
        q.add_argument("--stride", type=int)
        q.add_argument("--seed", type=int)
        q.add_argument("--pyramid", type=int, help="pyramid levels")
        q.add_argument("--workers", type=int)
        q.add_argument("--visual-sigma", dest="visual_sigma", type=float)
        q.add_argument("--gyro-noise-density", dest="gyro_noise_density", type=float)
        q.add_argument("--accel-noise-density", dest="accel_noise_density", type=float)
        q.add_argument("--depth-is-range", dest="depth_is_range", type=_on_off)

    r = sub.add_parser("run", help="estimate velocities over evaluation windows")
    r.add_argument("sequences", nargs="+")
    run_flags(r)
    r.add_argument("--marginalize", type=_on_off, help="on|off")
    r.set_defaults(func=cmd_run)

    f = sub.add_parser("flowfield", help="export the rigid velocity field of one frame")
    f.add_argument("sequence")
    f.add_argument("--frame", type=int, required=True)
    run_flags(f)
    f.set_defaults(func=cmd_flowfield)

    rp = sub.add_parser("report", help="aggregate the metrics of finished runs")
    rp.add_argument("runs", nargs="+")
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
