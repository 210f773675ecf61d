"""Command-line entry point: ``attnloc {synth,build-map,localize,eval,ablate}``.

Dataset directories use this layout (``N`` = zero-padded frame index, ``c``
= camera index)::

    cameras.json                      list of camera objects
    mapping/trajectory.csv            ground-truth poses of the mapping drive
    mapping/cam<c>/<N>.alfp|.npy|.png pyramid or image per frame
    mapping/cam<c>/<N>_depth.csv      u,v,x,y,z pixels with known 3D points
    online/motion.csv                 incremental motion per frame
    online/initial_prior.csv          one trajectory row
    online/ground_truth.csv           optional, for evaluation
    online/cam<c>/<N>.alfp|.npy|.png
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from attnloc import benchmark
from attnloc.evaluation import (
    EvaluationError,
    decompose_error,
    read_results,
    read_trajectory,
    read_motion,
    summarize,
    write_motion,
    write_results,
    write_summary,
    write_trajectory,
)
from attnloc.features import SCALES, FeatureError, export_pyramid, import_pyramid
from attnloc.geometry import CameraModel, GeometryError, Pose3
from attnloc.mapdb import MapError, load, save
from attnloc.matching import Collapse, Marginalization, MatchingError
from attnloc.pipeline import FrameInput, LocalizerConfig, MappingFrame, PipelineError, generate_map_with_policy, run_sequence
from attnloc.selection import SelectionConfig, SelectionError
from attnloc.synth import WorldSpec, WorldSpecError, read_kv_file

logger = logging.getLogger("attnloc")

STATUS_HEADER = ["timestamp", "available", "failed_level", "total_ms"] + [f"level{s}_ms" for s in (8, 4, 2)]


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _typed(cls, values: dict) -> dict:
    out = {}
    for f in fields(cls):
        if f.name in values:
            raw = values[f.name]
            if f.type in ("bool", bool):
                out[f.name] = str(raw).strip().lower() in ("1", "true", "yes", "on")
            elif f.type in ("int", int):
                out[f.name] = int(raw)
            elif f.type in ("float", float):
                out[f.name] = float(raw)
    return out


def load_config(path: str | None, overrides: dict) -> dict:
    """Merge a ``key = value`` file with command-line overrides (which win)."""
    values = read_kv_file(path) if path else {}
    values = {k.strip().replace("-", "_"): v for k, v in values.items()}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return values


def selection_config(values: dict) -> SelectionConfig:
    cfg = SelectionConfig(**_typed(SelectionConfig, values))
    if "keypoints_per_level" in values:
        n = int(values["keypoints_per_level"])
        cfg = replace(cfg, keypoints_per_level={s: n for s in SCALES})
    if "seed" in values:
        cfg = replace(cfg, rng_seed=int(values["seed"]))
    return cfg


def localizer_config(values: dict) -> LocalizerConfig:
    cfg = LocalizerConfig()
    if "temperature" in values:
        cfg = replace(cfg, temperature={s: float(values["temperature"]) for s in SCALES})
    if "marginalization" in values:
        cfg = replace(cfg, marginalization=Marginalization(values["marginalization"]))
    if "collapse" in values:
        cfg = replace(cfg, collapse=Collapse(values["collapse"]))
    return cfg


def benchmark_config(values: dict) -> benchmark.BenchmarkConfig:
    world = WorldSpec(**_typed(WorldSpec, values))
    kw = _typed(benchmark.BenchmarkConfig, values)
    kw.pop("world", None)
    return benchmark.BenchmarkConfig(world=world, **kw)


# ---------------------------------------------------------------------------
# dataset IO
# ---------------------------------------------------------------------------


def camera_to_dict(cam: CameraModel) -> dict:
    return {
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height,
        "extrinsic": {"position": cam.extrinsic.position.tolist(), "quaternion": cam.extrinsic.quaternion.tolist()},
    }


def camera_from_dict(d: dict) -> CameraModel:
    ext = d.get("extrinsic")
    pose = Pose3(ext["position"], ext["quaternion"]) if ext else Pose3.identity()
    return CameraModel(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]), pose)


def read_cameras(root: Path) -> list[CameraModel]:
    path = root / "cameras.json"
    try:
        data = json.loads(path.read_text())
        return [camera_from_dict(d) for d in data]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CliError(f"{path}: {exc}") from exc


def _view_path(folder: Path, index: int) -> Path:
    for ext in (".alfp", ".npy", ".png"):
        p = folder / f"{index:06d}{ext}"
        if p.exists():
            return p
    raise CliError(f"{folder}: no pyramid or image for frame {index}")


def load_view(path: Path):
    if path.suffix == ".alfp":
        return import_pyramid(path)
    if path.suffix == ".npy":
        return np.load(path)
    from PIL import Image

    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.float64)


def read_depth(path: Path) -> tuple[np.ndarray, np.ndarray]:
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        raise CliError(f"{path}: {exc}") from exc
    if data.size == 0:
        return np.zeros((0, 2)), np.zeros((0, 3))
    if data.shape[1] != 5:
        raise CliError(f"{path}: expected columns u,v,x,y,z")
    return data[:, :2], data[:, 2:]


def write_depth(path: Path, depth) -> None:
    pix, world = depth
    np.savetxt(path, np.hstack([pix, world]), delimiter=",", header="u,v,x,y,z", comments="", fmt="%.17g")


def read_mapping(root: Path, n_cams: int) -> list[MappingFrame]:
    traj = read_trajectory(root / "mapping" / "trajectory.csv")
    frames = []
    for i, (t, pose) in enumerate(traj):
        views, depths = [], []
        for c in range(n_cams):
            folder = root / "mapping" / f"cam{c}"
            views.append(load_view(_view_path(folder, i)))
            depths.append(read_depth(folder / f"{i:06d}_depth.csv"))
        frames.append(MappingFrame(FrameInput(t, tuple(views)), pose, tuple(depths)))
    return frames


def read_online(root: Path, n_cams: int) -> tuple[list[FrameInput], Pose3]:
    motion = read_motion(root / "online" / "motion.csv")
    prior_rows = read_trajectory(root / "online" / "initial_prior.csv")
    if not prior_rows:
        raise CliError("online/initial_prior.csv has no rows")
    frames = []
    for i, (t, m) in enumerate(motion):
        views = tuple(load_view(_view_path(root / "online" / f"cam{c}", i)) for c in range(n_cams))
        frames.append(FrameInput(t, views, m))
    return frames, prior_rows[0][1]


def write_dataset(root: Path, scenario: benchmark.Scenario) -> None:
    """Write a synthetic scenario in the dataset layout (single camera)."""
    (root / "mapping" / "cam0").mkdir(parents=True, exist_ok=True)
    (root / "online" / "cam0").mkdir(parents=True, exist_ok=True)
    (root / "cameras.json").write_text(json.dumps([camera_to_dict(c) for c in scenario.world.cameras[:1]], indent=2))
    write_trajectory(root / "mapping" / "trajectory.csv", [(mf.frame.timestamp, mf.ground_truth) for mf in scenario.mapping])
    for i, mf in enumerate(scenario.mapping):
        export_pyramid(mf.frame.views[0], root / "mapping" / "cam0" / f"{i:06d}.alfp")
        write_depth(root / "mapping" / "cam0" / f"{i:06d}_depth.csv", mf.depth_points[0])
    write_motion(root / "online" / "motion.csv", [(f.timestamp, f.incremental_motion) for f in scenario.online])
    write_trajectory(root / "online" / "initial_prior.csv", [(scenario.online[0].timestamp, scenario.priors[0])])
    write_trajectory(
        root / "online" / "ground_truth.csv", [(f.timestamp, gt) for f, gt in zip(scenario.online, scenario.ground_truth)]
    )
    for i, f in enumerate(scenario.online):
        export_pyramid(f.views[0], root / "online" / "cam0" / f"{i:06d}.alfp")


def write_status(path: Path, results) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STATUS_HEADER)
        for r in results:
            lv = [f"{r.timing.get(f'level{s}_ms', float('nan')):.3f}" for s in (8, 4, 2)]
            w.writerow([repr(r.timestamp), int(r.available), r.failed_level or "", f"{r.timing['total_ms']:.3f}", *lv])


def read_status(path: Path) -> dict[float, bool]:
    with open(path, newline="") as fh:
        return {float(row["timestamp"]): row["available"].strip() == "1" for row in csv.DictReader(fh)}


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _print_summary(summary, out_dir: Path | None, records) -> None:
    print(summary.table())
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_results(out_dir / "results.csv", records)
        write_summary(out_dir / "summary.json", summary)


def cmd_synth(args) -> int:
    values = load_config(
        args.config,
        {"poses": args.frames, "landmarks": args.landmarks, "noise": args.noise, "drop_rate": args.drop_rate,
         "stable_fraction": args.stable_fraction, "seed": args.seed},
    )
    if args.sequential:
        values["sequential"] = "true"
    cfg = benchmark_config(values)
    scenario = benchmark.make_scenario(cfg)
    db = scenario.build_map(selection_config(values))
    run = benchmark.evaluate(scenario, db, localizer_config(values))
    out = Path(args.out) if args.out else None
    if out is not None and args.write_dataset:
        write_dataset(out / "dataset", scenario)
        save(db, out / "map.almp")
    _print_summary(run.summary, out, run.records)
    print(f"mean localization time {run.mean_ms:.1f} ms/frame")
    return 0


def cmd_build_map(args) -> int:
    values = load_config(args.config, {"seed": args.seed})
    cfg = selection_config(values)
    if args.fps:
        cfg = replace(cfg, weighted=False)
    root = Path(args.dataset)
    cams = read_cameras(root)
    db = generate_map_with_policy(read_mapping(root, len(cams)), cfg)
    save(db, args.out)
    print(f"wrote {len(db)} nodes to {args.out}")
    return 0


def cmd_localize(args) -> int:
    values = load_config(args.config, {"seed": args.seed})
    root = Path(args.dataset)
    cams = read_cameras(root)
    db = load(args.map)
    frames, prior = read_online(root, len(cams))
    results = run_sequence(frames, prior, db, cams, localizer_config(values))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_trajectory(out / "estimates.csv", [(r.timestamp, r.estimated_pose) for r in results])
    write_status(out / "status.csv", results)
    n_ok = sum(r.available for r in results)
    print(f"localized {len(results)} frames, {n_ok} available; wrote {out}")
    gt_path = root / "online" / "ground_truth.csv"
    if gt_path.exists():
        gt = dict(read_trajectory(gt_path))
        records = [decompose_error(r.estimated_pose, gt[r.timestamp], r.available, r.timestamp) for r in results if r.timestamp in gt]
        if records:
            _print_summary(summarize(records), out, records)
    return 0


def cmd_eval(args) -> int:
    if args.results:
        records = read_results(args.results)
    else:
        if not (args.estimates and args.ground_truth):
            raise CliError("eval needs --results, or --estimates with --ground-truth")
        est = read_trajectory(args.estimates)
        gt = dict(read_trajectory(args.ground_truth))
        status = read_status(Path(args.status)) if args.status else {}
        records = []
        for t, pose in est:
            if t not in gt:
                raise CliError(f"no ground truth for timestamp {t!r}")
            records.append(decompose_error(pose, gt[t], status.get(t, True), t))
    if not records:
        raise CliError("no frames to evaluate")
    summary = summarize(records)
    _print_summary(summary, Path(args.out) if args.out else None, records)
    if args.json:
        print(json.dumps(summary.to_dict(), indent=2))
    return 0


def cmd_ablate(args) -> int:
    values = load_config(
        args.config,
        {"poses": args.frames, "noise": args.noise, "drop_rate": args.drop_rate,
         "stable_fraction": args.stable_fraction, "seed": args.seed},
    )
    rows = benchmark.run_ablation(benchmark_config(values), selection_config(values), localizer_config(values))
    print(f"{'selection':10s}{'marginal.':10s}{'RMS h (m)':>11s}{'RMS yaw':>10s}{'avail %':>9s}")
    for r in rows:
        s = r.summary
        rms_h = f"{s.rms_horizontal:.4f}" if s.rms_horizontal is not None else "n/a"
        rms_y = f"{s.rms_yaw:.4f}" if s.rms_yaw is not None else "n/a"
        print(f"{r.selection:10s}{r.marginalization:10s}{rms_h:>11s}{rms_y:>10s}{s.available_percent:9.1f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["selection", "marginalization", "rms_horizontal", "rms_yaw", "available_percent"])
            for r in rows:
                w.writerow([r.selection, r.marginalization, r.summary.rms_horizontal, r.summary.rms_yaw, r.summary.available_percent])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attnloc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value file")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("synth", help="generate a synthetic world and run the closed-loop benchmark")
    common(p)
    p.add_argument("--frames", type=int)
    p.add_argument("--landmarks", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--drop-rate", type=float)
    p.add_argument("--stable-fraction", type=float)
    p.add_argument("--sequential", action="store_true", help="dead-reckon priors instead of perturbing each frame")
    p.add_argument("--out", help="directory for results.csv and summary.json")
    p.add_argument("--write-dataset", action="store_true", help="also write the dataset and map under --out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-map", help="select keypoints for every mapping frame")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fps", action="store_true", help="plain FPS instead of WFPS")
    p.set_defaults(func=cmd_build_map)

    p = sub.add_parser("localize", help="localize the online drive against a map")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--map", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("eval", help="summarize localization errors")
    common(p)
    p.add_argument("--results", help="per-frame results CSV")
    p.add_argument("--estimates")
    p.add_argument("--ground-truth")
    p.add_argument("--status", help="status.csv from localize (availability flags)")
    p.add_argument("--out", help="directory for results.csv and summary.json")
    p.add_argument("--json", action="store_true", help="also print the summary as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="FPS/WFPS x reduce/weighted comparison")
    common(p)
    p.add_argument("--frames", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--drop-rate", type=float)
    p.add_argument("--stable-fraction", type=float)
    p.add_argument("--out", help="CSV file for the four rows")
    p.set_defaults(func=cmd_ablate)
    return parser


ERRORS = (
    CliError, EvaluationError, FeatureError, GeometryError, MapError, MatchingError, PipelineError,
    SelectionError, WorldSpecError, OSError, ValueError,
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ERRORS as exc:
        print(f"attnloc {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
