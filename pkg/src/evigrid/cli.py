"""Command line pipeline: file-to-file stages from simulated scans to evaluated grids.

Every stage writes ``config.json`` (the effective pipeline configuration)
next to its outputs. Failures print one JSON object on stderr and exit with
status 1.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import io as evio
from .core import PointCloud, ScanSequence
from .evidential import SensorEvidenceConfig
from .ground import PlaneParams, fit_plane, segment_points
from .mapping import (
    BeliefGrid,
    TargetParams,
    augment_crop,
    build_input_grid,
    build_voxel_map,
    project_to_grid,
    segment_corridor,
)
from .metrics import cell_l1, evaluate, false_free_cells, false_occupied_cells, residuals
from .registration import RegistrationParams, RegistrationWarning, register_sequence
from .spatial import GridGeometry
from . import synth

DEMOS = {
    "box": synth.box_scene,
    "drive": synth.drive_scene,
    "moving": synth.moving_box_scene,
    "occlusion": synth.occlusion_scene,
}


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    voxel_edge: float = 0.125
    cell_edge: float = 0.125
    extent: float = 100.0  # side of the square target / input grid, meters
    crop_size: int = 512
    window: float = 2.0
    corridor_low: float = 0.2
    corridor_high: float = 3.0
    ground_scale: float = 0.05
    ground_band: float = 0.2
    multipath_cutoff: float = -0.2
    gicp_batch: int = 6
    gicp_max_distance: float = 1.0
    gicp_max_iterations: int = 50
    covariance_k: int = 10
    covariance_epsilon: float = 1e-3
    downsample: float = 0.0
    evidence: dict = field(default_factory=lambda: asdict(SensorEvidenceConfig()))
    asym_sign: float = 1.0
    seed: int = 0
    threads: Optional[int] = None

    def validate(self) -> "PipelineConfig":
        pos = ("voxel_edge", "cell_edge", "extent", "ground_scale", "gicp_max_distance")
        for name in pos:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.window < 0:
            raise ConfigError("window must be non-negative")
        if not self.corridor_low < self.corridor_high:
            raise ConfigError("corridor_low must be below corridor_high")
        if self.multipath_cutoff > self.ground_band:
            raise ConfigError("multipath_cutoff must not exceed ground_band")
        if self.gicp_batch < 2 or self.covariance_k < 3 or self.crop_size < 1 or self.gicp_max_iterations < 1:
            raise ConfigError("gicp_batch >= 2, covariance_k >= 3, crop_size >= 1 and gicp_max_iterations >= 1 required")
        if self.asym_sign not in (1.0, -1.0):
            raise ConfigError("asym_sign must be +1 or -1")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be at least 1")
        try:
            self.evidence_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"evidence: {exc}") from None
        return self

    def evidence_config(self) -> SensorEvidenceConfig:
        return SensorEvidenceConfig(**self.evidence)

    def geometry(self) -> GridGeometry:
        return GridGeometry.centered(self.extent, self.cell_edge)

    def target_params(self) -> TargetParams:
        return TargetParams(
            window=self.window,
            corridor_low=self.corridor_low,
            corridor_high=self.corridor_high,
            voxel_edge=self.voxel_edge,
            ground_scale=self.ground_scale,
            ground_band=self.ground_band,
            multipath_cutoff=self.multipath_cutoff,
            evidence=self.evidence_config(),
        )

    def registration_params(self) -> RegistrationParams:
        return RegistrationParams(
            batch=self.gicp_batch,
            max_correspondence_distance=self.gicp_max_distance,
            covariance_k=self.covariance_k,
            covariance_epsilon=self.covariance_epsilon,
            max_iterations=self.gicp_max_iterations,
            downsample=self.downsample,
        )

    def echo(self) -> dict:
        # thread count only changes speed, never results, so it is left out
        d = asdict(self)
        d.pop("threads")
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**data)
        if set(cfg.evidence) != set(asdict(SensorEvidenceConfig())):
            cfg.evidence = {**asdict(SensorEvidenceConfig()), **cfg.evidence}
        return cfg.validate()


def load_config(path: Optional[str], overrides: dict) -> PipelineConfig:
    data = {}
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    data.update({k: v for k, v in overrides.items() if v is not None})
    return PipelineConfig.from_dict(data)


def resolve_threads(flag: Optional[int], cfg: PipelineConfig) -> int:
    if flag is not None:
        return max(1, flag)
    env = os.environ.get("EVIGRID_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"EVIGRID_THREADS={env!r} is not an integer") from None
    if cfg.threads is not None:
        return cfg.threads
    return os.cpu_count() or 1


def echo_config(directory, cfg: PipelineConfig) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    evio.dump_json(cfg.echo(), directory / "config.json")


def _out_dir_of_file(path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p.parent


def _load_sequence(manifest, poses=None) -> ScanSequence:
    seq = evio.read_manifest(manifest)
    if poses:
        seq = evio.attach_poses(seq, evio.read_poses(poses))
    return seq


def _load_scan(path, scan_id=None) -> PointCloud:
    path = Path(path)
    if path.suffix == ".json":
        seq = evio.read_manifest(path)
        if scan_id is None:
            scan_id = seq.scans[len(seq) // 2].scan_id
        return seq.scans[seq.index_of(scan_id)]
    return evio.read_scan(path)


def _load_plane(path) -> PlaneParams:
    return PlaneParams.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# -- commands ----------------------------------------------------------------

def cmd_synth(args, cfg, threads):
    if args.demo:
        scene = DEMOS[args.demo]()
        extra = {}
    else:
        extra = json.loads(Path(args.scene).read_text(encoding="utf-8"))
        scene = synth.SceneSpec.from_dict(extra)
    rate = args.rate if args.rate is not None else float(extra.get("rate", 10.0))
    duration = args.duration if args.duration is not None else float(extra.get("duration", 0.0))
    t0 = args.t0 if args.t0 is not None else extra.get("t0")
    sim = synth.simulate_sequence(scene, rate, duration, t0)
    out = Path(args.output)
    evio.write_manifest(sim.sequence, out)
    ids = [s.scan_id for s in sim.sequence.scans]
    evio.write_poses(ids, sim.relative_gt(), out / "gt_poses.txt")
    evio.write_poses(ids, sim.gt_poses, out / "gt_poses_world.txt")
    (out / "labels").mkdir(exist_ok=True)
    for sid, lab in zip(ids, sim.labels):
        lab.astype("<i4").tofile(out / "labels" / f"{sid}.lbl")
    scene_dict = scene.to_dict()
    scene_dict.update({"rate": rate, "duration": duration})
    evio.dump_json(scene_dict, out / "scene.json")
    echo_config(out, cfg)
    return {"scans": len(ids), "output": str(out)}


def cmd_register(args, cfg, threads):
    seq = _load_sequence(args.manifest)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RegistrationWarning)
        res = register_sequence(seq, params=cfg.registration_params(), threads=threads, details=True)
    out_dir = _out_dir_of_file(args.output)
    evio.write_poses([s.scan_id for s in seq.scans], res.sequence.poses, args.output)
    echo_config(out_dir, cfg)
    return {
        "scans": len(seq),
        "batches": len(res.batches),
        "graph_converged": bool(res.graph_result.converged),
        "warnings": len(caught),
    }


def cmd_ground_fit(args, cfg, threads):
    scan = _load_scan(args.input, args.scan)
    plane = fit_plane(scan.points, cfg.ground_scale)
    seg = segment_points(scan, plane, cfg.ground_band, cfg.multipath_cutoff)
    out_dir = _out_dir_of_file(args.output)
    evio.dump_json(plane.to_dict(), args.output)
    echo_config(out_dir, cfg)
    return {"scan": scan.scan_id, **seg.counts()}


def cmd_voxelize(args, cfg, threads):
    seq = _load_sequence(args.manifest, args.poses)
    center = args.center if args.center is not None else seq.scans[len(seq) // 2].scan_id
    plane = _load_plane(args.plane) if args.plane else None
    geo = cfg.geometry()
    params = cfg.target_params()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            vmap, plane, idx = build_voxel_map(seq, center, geo, params, plane=plane, executor=ex)
    else:
        vmap, plane, idx = build_voxel_map(seq, center, geo, params, plane=plane)
    corridor = segment_corridor(vmap, plane, cfg.corridor_low, cfg.corridor_high)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    evio.write_voxel_map(vmap, out / "voxels.evx")
    evio.write_voxel_map(corridor, out / "corridor.evx")
    evio.dump_json(plane.to_dict(), out / "plane.json")
    evio.dump_json({"center": center, "scans": [seq.scans[i].scan_id for i in idx]}, out / "window.json")
    echo_config(out, cfg)
    return {"center": center, "scans": len(idx), "voxels": len(vmap), "corridor_voxels": len(corridor)}


def cmd_project(args, cfg, threads):
    src = Path(args.input)
    if src.is_dir():
        src = src / "corridor.evx"
    vmap = evio.read_voxel_map(src)
    if args.plane:
        vmap = segment_corridor(vmap, _load_plane(args.plane), cfg.corridor_low, cfg.corridor_high)
    if abs(vmap.edge - cfg.cell_edge) > 1e-12:
        raise ConfigError("voxel edge of the map differs from the configured cell edge")
    grid = project_to_grid(vmap, cfg.geometry(), cfg.evidence_config())
    evio.write_grid(grid, args.output, cfg.echo())
    echo_config(args.output, cfg)
    return {"determinate_cells": int(grid.determinate().sum()), "observed_cells": int((grid.certainty > 0).sum())}


def cmd_input_grid(args, cfg, threads):
    scan = _load_scan(args.input, args.scan)
    plane = _load_plane(args.plane) if args.plane else fit_plane(scan.points, cfg.ground_scale)
    grid = build_input_grid(scan, plane, cfg.geometry(), cfg.ground_band, cfg.multipath_cutoff)
    evio.write_grid(grid, args.output, cfg.echo())
    echo_config(args.output, cfg)
    return {"scan": scan.scan_id, "detections": int(sum(grid[k].sum() for k in grid.layers if k.startswith("detections")))}


def random_crop_params(geometry: GridGeometry, out_size: int, seed: int):
    """Rotation in [0, 2 pi) and an offset drawn from the disk that keeps any rotated crop inside."""
    half_src = 0.5 * min(geometry.width, geometry.height) * geometry.edge
    radius = half_src - np.sqrt(2.0) * 0.5 * out_size * geometry.edge
    if radius < 0:
        raise ValueError("crop does not fit the source grid under arbitrary rotation")
    gen = np.random.default_rng(seed)
    rot = float(gen.uniform(0.0, 2 * np.pi))
    r = radius * np.sqrt(gen.uniform())
    a = gen.uniform(0.0, 2 * np.pi)
    return rot, (float(r * np.cos(a)), float(r * np.sin(a)))


def cmd_augment(args, cfg, threads):
    grid = evio.read_grid(args.input)
    size = args.size if args.size is not None else cfg.crop_size
    if args.random:
        rot, offset = random_crop_params(grid.geometry, size, cfg.seed)
    else:
        rot = np.deg2rad(args.rotation)
        offset = tuple(args.offset)
    out = augment_crop(grid, rot, offset, size)
    evio.write_grid(out, args.output, {**cfg.echo(), "augment": {"rotation": rot, "offset": list(offset), "size": size}})
    echo_config(args.output, cfg)
    return {"rotation": rot, "offset": list(offset), "size": size}


def cmd_evaluate(args, cfg, threads):
    pred = evio.read_grid(args.pred)
    target = evio.read_grid(args.target)
    if not isinstance(pred, BeliefGrid) or not isinstance(target, BeliefGrid):
        raise ValueError("evaluate needs two belief grids")
    sign = args.asym_sign if args.asym_sign is not None else cfg.asym_sign
    rep = evaluate(pred, target, weight_k=args.weight_k, asym_k=args.asym_k, asym_sign=sign).to_dict()
    if args.heatmaps:
        eo, ef = residuals(pred, target)
        cells = {
            "l1": cell_l1(eo, ef) / 2.0,  # halved so the layer stays within [0, 1]
            "false_O": false_occupied_cells(pred, target),
            "false_F": false_free_cells(pred, target),
        }
        hm = Path(args.heatmaps)
        hm.mkdir(parents=True, exist_ok=True)
        for name, arr in cells.items():
            evio.write_pgm16(np.clip(np.rint(arr / evio.BELIEF_SCALE), 0, 65535), hm / f"{name}.pgm")
        echo_config(hm, cfg)
    if args.output:
        out_dir = _out_dir_of_file(args.output)
        evio.dump_json(rep, args.output)
        echo_config(out_dir, cfg)
    return rep


def cmd_render(args, cfg, threads):
    grid = evio.read_grid(args.input)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(grid, BeliefGrid):
        layers = {**grid.layers(), "theta": grid.theta}
    else:
        layers = dict(grid.layers)
    if args.layer:
        missing = [n for n in args.layer if n not in layers]
        if missing:
            raise ValueError(f"unknown layers {missing}")
        layers = {n: layers[n] for n in args.layer}
    for name, arr in layers.items():
        vmax = None if name.startswith(("detections", "transmissions")) else 1.0
        evio.render_png(arr, out / f"{name}.png", vmax)
    echo_config(out, cfg)
    return {"rendered": sorted(layers)}


# -- argument parsing --------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with PipelineConfig overrides")
    common.add_argument("--threads", type=int, help="worker threads (default: EVIGRID_THREADS or all cores)")
    common.add_argument("--seed", type=int)
    common.add_argument("--cell-edge", type=float, dest="cell_edge")
    common.add_argument("--voxel-edge", type=float, dest="voxel_edge")
    common.add_argument("--extent", type=float)

    p = argparse.ArgumentParser(prog="evigrid", description="Evidential occupancy grid pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="simulate a scan sequence")
    s.add_argument("scene", nargs="?", help="scene JSON")
    s.add_argument("--demo", choices=sorted(DEMOS))
    s.add_argument("--rate", type=float)
    s.add_argument("--duration", type=float)
    s.add_argument("--t0", type=float)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("register", parents=[common], help="register a manifest, write TUM-style poses")
    s.add_argument("manifest")
    s.add_argument("--batch", type=int, dest="gicp_batch")
    s.add_argument("--max-distance", type=float, dest="gicp_max_distance")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("ground-fit", parents=[common], help="robust ground plane of one scan")
    s.add_argument("input", help="EVS1 scan or manifest")
    s.add_argument("--scan", help="scan id when the input is a manifest (default: middle scan)")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_ground_fit)

    s = sub.add_parser("voxelize", parents=[common], help="accumulate the window around one scan")
    s.add_argument("manifest")
    s.add_argument("--poses", required=True)
    s.add_argument("--center", help="center scan id (default: middle scan)")
    s.add_argument("--window", type=float)
    s.add_argument("--plane", help="plane JSON in the center-scan frame (default: fit)")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_voxelize)

    s = sub.add_parser("project", parents=[common], help="project a corridor voxel map to a belief grid")
    s.add_argument("input", help="EVX1 file or voxelize output directory")
    s.add_argument("--plane", help="cut the corridor from a full map with this plane")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_project)

    s = sub.add_parser("input-grid", parents=[common], help="six-layer grid of one scan")
    s.add_argument("input", help="EVS1 scan or manifest")
    s.add_argument("--scan")
    s.add_argument("--plane")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_input_grid)

    s = sub.add_parser("augment", parents=[common], help="rotate, shift and crop a grid")
    s.add_argument("input")
    s.add_argument("--rotation", type=float, default=0.0, help="degrees")
    s.add_argument("--offset", type=float, nargs=2, default=(0.0, 0.0), metavar=("DX", "DY"))
    s.add_argument("--size", type=int)
    s.add_argument("--random", action="store_true", help="draw rotation and offset from the config seed")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("evaluate", parents=[common], help="compare a predicted and a target belief grid")
    s.add_argument("pred")
    s.add_argument("target")
    s.add_argument("--weight-k", type=float)
    s.add_argument("--asym-k", type=float)
    s.add_argument("--asym-sign", type=float, choices=(1.0, -1.0))
    s.add_argument("--heatmaps", help="directory for per-cell l1/2, false_O and false_F PGM layers")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("render", parents=[common], help="PNG heatmaps of grid layers")
    s.add_argument("input")
    s.add_argument("--layer", action="append")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_render)
    return p


_OVERRIDES = ("seed", "cell_edge", "voxel_edge", "extent", "gicp_batch", "gicp_max_distance", "window")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "synth" and bool(args.scene) == bool(args.demo):
            raise ConfigError("give either a scene file or --demo")
        overrides = {k: getattr(args, k) for k in _OVERRIDES if getattr(args, k, None) is not None}
        cfg = load_config(args.config, overrides)
        threads = resolve_threads(args.threads, cfg)
        summary = args.func(args, cfg, threads)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one error line
        err = {"error": type(exc).__name__, "command": args.command, "message": str(exc)}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, "ok": True, **(summary or {})}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
