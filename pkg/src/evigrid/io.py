"""File formats: EVS1 scans, TUM-style pose files, manifests, EVX1 voxel maps,
16-bit PGM grid layers with a JSON sidecar, and PNG heatmaps."""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .core import PointCloud, PoseSE3, ScanSequence
from .mapping import BeliefGrid, EvidentialVoxelMap, MultiLayerGridMap, pack_keys
from .spatial import GridGeometry

SCAN_MAGIC = b"EVS1"
VOXEL_MAGIC = b"EVX1"
_SCAN_HEADER = struct.Struct("<4sId")
_VOXEL_HEADER = struct.Struct("<4sddddQ")
_VOXEL_RECORD = np.dtype([("ix", "<i4"), ("iy", "<i4"), ("iz", "<i4"), ("m", "<u4"), ("n", "<u4")])
_POINT = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("intensity", "<f4")])


class FormatError(ValueError):
    pass


def dump_json(data, path) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- scans -------------------------------------------------------------------

def write_scan(cloud: PointCloud, path) -> None:
    rec = np.empty(len(cloud), _POINT)
    rec["x"], rec["y"], rec["z"] = cloud.points.T
    rec["intensity"] = cloud.intensity
    with open(path, "wb") as f:
        f.write(_SCAN_HEADER.pack(SCAN_MAGIC, len(cloud), float(cloud.timestamp)))
        f.write(rec.tobytes())


def read_scan(path, scan_id: Optional[str] = None, timestamp: Optional[float] = None) -> PointCloud:
    raw = Path(path).read_bytes()
    if len(raw) < _SCAN_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, count, stamp = _SCAN_HEADER.unpack_from(raw)
    if magic != SCAN_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    body = raw[_SCAN_HEADER.size:]
    if len(body) != count * _POINT.itemsize:
        raise FormatError(f"{path}: expected {count} points")
    rec = np.frombuffer(body, _POINT)
    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    inten = rec["intensity"].astype(np.float64)
    bad = (inten < 0) | (inten > 1)
    if bad.any():
        inten = np.clip(inten, 0.0, 1.0)
    return PointCloud(
        pts,
        inten,
        timestamp=stamp if timestamp is None else timestamp,
        scan_id=scan_id if scan_id is not None else Path(path).stem,
    )


def intensity_clamp_count(path) -> int:
    raw = Path(path).read_bytes()
    rec = np.frombuffer(raw[_SCAN_HEADER.size:], _POINT)
    return int(((rec["intensity"] < 0) | (rec["intensity"] > 1)).sum())


# -- manifests and poses -----------------------------------------------------

def write_manifest(seq: ScanSequence, directory, scan_dir: str = "scans", extra: Optional[dict] = None) -> Path:
    directory = Path(directory)
    (directory / scan_dir).mkdir(parents=True, exist_ok=True)
    entries = []
    for s in seq.scans:
        rel = f"{scan_dir}/{s.scan_id}.evs"
        write_scan(s, directory / rel)
        entries.append({"id": s.scan_id, "path": rel, "timestamp": s.timestamp})
    data = {"scans": entries}
    if extra:
        data.update(extra)
    path = directory / "manifest.json"
    dump_json(data, path)
    return path


def read_manifest(path) -> ScanSequence:
    path = Path(path)
    data = json.loads(path.read_text(encoding="utf-8"))
    if "scans" not in data:
        raise FormatError(f"{path}: manifest lacks 'scans'")
    scans = []
    for e in data["scans"]:
        scans.append(read_scan(path.parent / e["path"], scan_id=str(e["id"]), timestamp=float(e["timestamp"])))
    return ScanSequence(tuple(scans))


def format_pose_line(scan_id: str, pose: PoseSE3) -> str:
    vals = list(pose.translation) + list(pose.rotation)
    return " ".join([str(scan_id)] + [repr(float(v)) for v in vals])


def write_poses(ids, poses, path) -> None:
    lines = [format_pose_line(i, p) for i, p in zip(ids, poses)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_poses(path) -> dict:
    """``scan_id -> PoseSE3``; blank lines and ``#`` comments are skipped."""
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise FormatError(f"{path}:{n}: expected 'id tx ty tz qx qy qz qw'")
        v = [float(x) for x in parts[1:]]
        out[parts[0]] = PoseSE3(v[3:], v[:3])
    return out


def attach_poses(seq: ScanSequence, poses: dict) -> ScanSequence:
    try:
        return seq.with_poses([poses[s.scan_id] for s in seq.scans])
    except KeyError as exc:
        raise FormatError(f"no pose for scan {exc.args[0]}") from None


# -- voxel maps --------------------------------------------------------------

def write_voxel_map(vmap: EvidentialVoxelMap, path) -> None:
    idx = vmap.indices()
    rec = np.empty(len(vmap), _VOXEL_RECORD)
    rec["ix"], rec["iy"], rec["iz"] = idx.T
    if len(vmap) and (vmap.m.max() > 0xFFFFFFFF or vmap.n.max() > 0xFFFFFFFF):
        raise FormatError("count exceeds u32 range")
    rec["m"], rec["n"] = vmap.m, vmap.n
    with open(path, "wb") as f:
        f.write(_VOXEL_HEADER.pack(VOXEL_MAGIC, vmap.edge, *vmap.origin, len(vmap)))
        f.write(rec.tobytes())


def read_voxel_map(path) -> EvidentialVoxelMap:
    raw = Path(path).read_bytes()
    if len(raw) < _VOXEL_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, edge, ox, oy, oz, count = _VOXEL_HEADER.unpack_from(raw)
    if magic != VOXEL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    body = raw[_VOXEL_HEADER.size:]
    if len(body) != count * _VOXEL_RECORD.itemsize:
        raise FormatError(f"{path}: expected {count} voxel records")
    rec = np.frombuffer(body, _VOXEL_RECORD)
    vmap = EvidentialVoxelMap(edge, (ox, oy, oz))
    keys = pack_keys(np.stack([rec["ix"], rec["iy"], rec["iz"]], axis=1).astype(np.int64))
    vmap.add_counts(keys, rec["m"].astype(np.int64), rec["n"].astype(np.int64))
    return vmap


# -- grids -------------------------------------------------------------------

def write_pgm16(arr: np.ndarray, path) -> None:
    """Row 0 of the file is the highest-y row of the grid (north up)."""
    a = np.asarray(arr)
    h, w = a.shape
    data = np.flipud(a).astype(">u2").tobytes()
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(data)


def read_pgm16(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    dtype = ">u2" if maxval > 255 else "u1"
    a = np.frombuffer(raw[pos:], dtype=dtype, count=w * h).reshape(h, w)
    return np.flipud(a).astype(np.int64)


BELIEF_SCALE = 1.0 / 65535.0


def _layer_scale(name: str) -> float:
    if name.startswith(("detections", "transmissions")):
        return 1.0
    return BELIEF_SCALE


def write_grid(grid, directory, config: Optional[dict] = None) -> Path:
    """Write a :class:`BeliefGrid` or :class:`MultiLayerGridMap` as PGM layers plus ``grid.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    kind = "belief" if isinstance(grid, BeliefGrid) else "input"
    layers = grid.layers() if isinstance(grid, BeliefGrid) else grid.layers
    scales = {}
    for name, arr in layers.items():
        scale = _layer_scale(name)
        q = np.asarray(arr, dtype=np.float64) / scale
        q = np.clip(np.rint(q), 0, 65535)
        write_pgm16(q, directory / f"{name}.pgm")
        scales[name] = scale
    g = grid.geometry
    meta = {
        "kind": kind,
        "origin": [float(v) for v in g.origin],
        "cell_edge": g.edge,
        "width": g.width,
        "height": g.height,
        "layers": list(layers),
        "scale": scales,
    }
    if config is not None:
        meta["config"] = config
    path = directory / "grid.json"
    dump_json(meta, path)
    return path


def read_grid(directory):
    directory = Path(directory)
    meta_path = directory / "grid.json" if directory.is_dir() else directory
    directory = meta_path.parent
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    geo = GridGeometry(int(meta["width"]), int(meta["height"]), float(meta["cell_edge"]), tuple(meta["origin"]))
    layers = {}
    for name in meta["layers"]:
        raw = read_pgm16(directory / f"{name}.pgm")
        if raw.shape != geo.shape:
            raise FormatError(f"layer {name} shape {raw.shape} does not match sidecar")
        scale = float(meta["scale"][name])
        layers[name] = raw if scale == 1.0 else raw * scale
    if meta.get("kind") == "belief":
        bel_O = layers["bel_O"]
        bel_F = layers["bel_F"]
        # rounding can push the sum one quantum above 1
        over = bel_O + bel_F - 1.0
        bel_F = np.where(over > 0, bel_F - over, bel_F)
        return BeliefGrid(geo, bel_O, bel_F)
    return MultiLayerGridMap(geo, layers)


def heatmap_rgb(values: np.ndarray, vmax: Optional[float] = None) -> np.ndarray:
    """White for low values, red for high values; north-up ``(H, W, 3)`` uint8."""
    v = np.asarray(values, dtype=np.float64)
    top = vmax if vmax is not None else (float(v.max()) if v.size and v.max() > 0 else 1.0)
    x = np.clip(v / top, 0.0, 1.0)
    gb = np.rint(255.0 * (1.0 - x)).astype(np.uint8)
    rgb = np.stack([np.full_like(gb, 255), gb, gb], axis=-1)
    return np.flipud(rgb)


def render_png(values: np.ndarray, path, vmax: Optional[float] = None) -> None:
    from PIL import Image

    Image.fromarray(heatmap_rgb(values, vmax), mode="RGB").save(path, format="PNG", optimize=False)
