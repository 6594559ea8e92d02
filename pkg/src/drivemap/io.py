"""File formats for every pipeline artifact.

All text formats are whitespace-separated tokens in SI units, floats written
with shortest round-trip precision so read(write(x)) == x exactly and output
bytes are reproducible.  Rasters are binary portable graymaps/pixmaps (max
value 255) with a text sidecar carrying the world placement:

    line 1: origin_x origin_y resolution        (meters; cell (0,0) center)
    line 2: z_min z_scale                        (elevation rasters only)

Elevation cells quantize to 1..255 (0 stays background); dequantize with
z = z_min + (value - 1) * z_scale.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .elevation import ElevationField
from .fusion import FusedTrajectory, GnssFactor, OdometryFactor, StateNode
from .geometry import CameraIntrinsics, Pose, RigCalibration
from .sfm import ImageMeta, Observation, ReconstructionModel, Track
from .surface import BevRaster
from .vectormap import MapElement, MapElementClass, VectorMap


def _f(x) -> str:
    return repr(float(x))


def _lines(path):
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if line and not line.startswith("#"):
            yield line.split()


# ------------------------------------------------------------- trajectories

def write_trajectory(path, nodes, frame_ids=None):
    """One `timestamp_s frame_id tx ty tz qx qy qz qw` record per line."""
    nodes = nodes.nodes if isinstance(nodes, FusedTrajectory) else list(nodes)
    out = ["# timestamp_s frame_id tx ty tz qx qy qz qw"]
    for k, n in enumerate(nodes):
        fid = frame_ids[k] if frame_ids else f"n{k:06d}"
        t, q = n.pose.t, n.pose.q
        out.append(" ".join([_f(n.timestamp), str(fid), _f(t[0]), _f(t[1]), _f(t[2]),
                             _f(q[0]), _f(q[1]), _f(q[2]), _f(q[3])]))
    Path(path).write_text("\n".join(out) + "\n")


def read_trajectory(path):
    """Returns (list of StateNode, list of frame ids)."""
    nodes, ids = [], []
    for tok in _lines(path):
        if len(tok) != 9:
            raise ValueError(f"{path}: expected 9 fields, got {len(tok)}")
        nodes.append(StateNode(float(tok[0]),
                               Pose(t=[float(v) for v in tok[2:5]],
                                    q=[float(v) for v in tok[5:9]])))
        ids.append(tok[1])
    return nodes, ids


def write_odometry_factors(path, factors):
    out = ["# from_index to_index tx ty tz qx qy qz qw sigma_t sigma_r"]
    for f in factors:
        t, q = f.relative.t, f.relative.q
        out.append(" ".join([str(f.from_index), str(f.to_index),
                             _f(t[0]), _f(t[1]), _f(t[2]),
                             _f(q[0]), _f(q[1]), _f(q[2]), _f(q[3]),
                             _f(f.sigma_t), _f(f.sigma_r)]))
    Path(path).write_text("\n".join(out) + "\n")


def read_odometry_factors(path):
    factors = []
    for tok in _lines(path):
        factors.append(OdometryFactor(
            int(tok[0]), int(tok[1]),
            Pose(t=[float(v) for v in tok[2:5]], q=[float(v) for v in tok[5:9]]),
            float(tok[9]), float(tok[10])))
    return factors


def write_gnss_factors(path, factors):
    out = ["# node_index x y z sigma"]
    for g in factors:
        out.append(" ".join([str(g.node_index), _f(g.position[0]), _f(g.position[1]),
                             _f(g.position[2]), _f(g.sigma)]))
    Path(path).write_text("\n".join(out) + "\n")


def read_gnss_factors(path):
    return [GnssFactor(int(t[0]), [float(t[1]), float(t[2]), float(t[3])], float(t[4]))
            for t in _lines(path)]


# -------------------------------------------------------------- image index

def write_image_index(path, images):
    out = ["# image_id timestamp_s camera_name clip_id"]
    for m in images:
        out.append(f"{m.image_id} {_f(m.timestamp)} {m.camera_name} {m.clip_id or '-'}")
    Path(path).write_text("\n".join(out) + "\n")


def read_image_index(path):
    return [ImageMeta(t[0], float(t[1]), t[2], "" if t[3] == "-" else t[3])
            for t in _lines(path)]


# ------------------------------------------------------------------- tracks

def write_tracks(path, tracks):
    """`track_id image_id px py`, one observation per line."""
    out = ["# track_id image_id px py"]
    for trk in sorted(tracks, key=lambda t: t.track_id):
        for o in trk.observations:
            out.append(f"{trk.track_id} {o.image_id} {_f(o.pixel[0])} {_f(o.pixel[1])}")
    Path(path).write_text("\n".join(out) + "\n")


def read_tracks(path):
    by_id = {}
    for tok in _lines(path):
        tid = int(tok[0])
        by_id.setdefault(tid, []).append(
            Observation(tok[1], tid, [float(tok[2]), float(tok[3])]))
    return [Track(tid, obs) for tid, obs in sorted(by_id.items())]


def write_track_classes(path, classes):
    out = ["# track_id class_id"]
    for tid in sorted(classes):
        out.append(f"{tid} {int(classes[tid])}")
    Path(path).write_text("\n".join(out) + "\n")


def read_track_classes(path):
    return {int(t[0]): int(t[1]) for t in _lines(path)}


def write_outlier_labels(path, labels):
    out = ["# track_id image_id"]
    for tid, iid in sorted(labels):
        out.append(f"{tid} {iid}")
    Path(path).write_text("\n".join(out) + "\n")


def read_outlier_labels(path):
    return {(int(t[0]), t[1]) for t in _lines(path)}


# -------------------------------------------------------------------- pairs

def write_pairs(path, pairs):
    """`image_id_a image_id_b` per line, lexicographically sorted."""
    rows = sorted(tuple(sorted(p)) for p in pairs)
    Path(path).write_text("".join(f"{a} {b}\n" for a, b in rows))


def read_pairs(path):
    return {(t[0], t[1]) for t in _lines(path)}


def write_cross_tracks(path, groups):
    out = ["# track ids observing one physical feature"]
    for g in sorted(groups, key=lambda g: sorted(g)[0]):
        out.append(" ".join(str(x) for x in sorted(g)))
    Path(path).write_text("\n".join(out) + "\n")


def read_cross_tracks(path):
    return [[int(x) for x in tok] for tok in _lines(path)]


# -------------------------------------------------------------------- model

def write_model(path, model: ReconstructionModel, timestamps=None):
    """Camera records (trajectory format) followed by `track_id X Y Z` landmarks."""
    timestamps = timestamps or {}
    out = ["# cameras: timestamp_s image_id tx ty tz qx qy qz qw",
           "# landmarks: track_id X Y Z"]
    for iid in sorted(model.cameras):
        cam = model.cameras[iid]
        t, q = cam.pose.t, cam.pose.q
        out.append(" ".join([_f(timestamps.get(iid, 0.0)), iid,
                             _f(t[0]), _f(t[1]), _f(t[2]),
                             _f(q[0]), _f(q[1]), _f(q[2]), _f(q[3])]))
    for tid in sorted(model.landmarks):
        p = model.landmarks[tid]
        out.append(f"{tid} {_f(p[0])} {_f(p[1])} {_f(p[2])}")
    Path(path).write_text("\n".join(out) + "\n")


def read_model(path):
    """Returns (camera poses by image id, camera timestamps, landmarks by track id)."""
    poses, stamps, landmarks = {}, {}, {}
    for tok in _lines(path):
        if len(tok) == 9:
            poses[tok[1]] = Pose(t=[float(v) for v in tok[2:5]],
                                 q=[float(v) for v in tok[5:9]])
            stamps[tok[1]] = float(tok[0])
        elif len(tok) == 4:
            landmarks[int(tok[0])] = np.array([float(tok[1]), float(tok[2]), float(tok[3])])
        else:
            raise ValueError(f"{path}: unexpected field count {len(tok)}")
    return poses, stamps, landmarks


# ---------------------------------------------------------------------- rig

def write_rig(path, rig: RigCalibration, intrinsics):
    data = {"reference": rig.reference, "cameras": {}}
    for name in sorted(rig.camera_in_body):
        p = rig.camera_in_body[name]
        k = intrinsics[name]
        data["cameras"][name] = {
            "t": [float(v) for v in p.t], "q": [float(v) for v in p.q],
            "fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
            "width": k.width, "height": k.height,
        }
    write_json(path, data)


def read_rig(path):
    data = json.loads(Path(path).read_text())
    transforms, intr = {}, {}
    for name, c in data["cameras"].items():
        transforms[name] = Pose(t=c["t"], q=c["q"])
        intr[name] = CameraIntrinsics(fx=c["fx"], fy=c["fy"], cx=c["cx"], cy=c["cy"],
                                      width=int(c["width"]), height=int(c["height"]))
    return RigCalibration(transforms, data["reference"]), intr


# ------------------------------------------------------------------ rasters

def write_pgm(path, values: np.ndarray):
    arr = np.asarray(values)
    if arr.dtype != np.uint8:
        if arr.max(initial=0) > 255 or arr.min(initial=0) < 0:
            raise ValueError("PGM values must fit uint8")
        arr = arr.astype(np.uint8)
    h, w = arr.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes())


def read_pgm(path):
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM")
    parts = raw.split(b"\n", 3)
    w, h = (int(v) for v in parts[1].split())
    data = parts[3][:w * h]
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def write_ppm(path, values: np.ndarray):
    arr = np.asarray(values)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr), 0, 255).astype(np.uint8)
    h, w, _ = arr.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + arr.tobytes())


def read_ppm(path):
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM")
    parts = raw.split(b"\n", 3)
    w, h = (int(v) for v in parts[1].split())
    data = parts[3][:w * h * 3]
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def write_bev_raster(path, raster: BevRaster):
    """PGM/PPM plus `<path>.txt` sidecar with origin and resolution."""
    path = Path(path)
    sidecar = [f"{_f(raster.origin[0])} {_f(raster.origin[1])} {_f(raster.resolution)}"]
    vals = raster.values
    if raster.channel == "elevation":
        z = np.asarray(vals, dtype=float)
        z_min = float(z.min())
        z_scale = max(float(z.max()) - z_min, 1e-12) / 254.0
        q = np.clip(np.round((z - z_min) / z_scale), 0, 254).astype(np.uint8) + 1
        sidecar.append(f"{_f(z_min)} {_f(z_scale)}")
        write_pgm(path, q)
    elif vals.ndim == 3:
        write_ppm(path, vals)
    else:
        write_pgm(path, vals)
    Path(str(path) + ".txt").write_text("\n".join(sidecar) + "\n")


def read_bev_raster(path, channel=""):
    path = Path(path)
    side = Path(str(path) + ".txt").read_text().splitlines()
    ox, oy, res = (float(v) for v in side[0].split())
    if channel == "elevation":
        q = read_pgm(path).astype(float)
        z_min, z_scale = (float(v) for v in side[1].split())
        vals = z_min + (q - 1.0) * z_scale
        vals[q == 0] = 0.0
    elif path.suffix == ".ppm":
        vals = read_ppm(path)
    else:
        vals = read_pgm(path)
    return BevRaster(origin=[ox, oy], resolution=res, values=vals, channel=channel)


# --------------------------------------------------------------------- json

def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True,
                                     default=_json_default) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def write_elevation_field(path, field: ElevationField):
    write_json(path, {
        "bounds": list(field.bounds),
        "num_frequencies": field.num_frequencies,
        "z_mean": field.z_mean,
        "z_std": field.z_std,
        "weights": [w.tolist() for w in field.weights],
        "loss_history": field.loss_history,
    })


def read_elevation_field(path) -> ElevationField:
    d = read_json(path)
    return ElevationField(bounds=tuple(d["bounds"]),
                          num_frequencies=int(d["num_frequencies"]),
                          weights=[np.asarray(w, dtype=float) for w in d["weights"]],
                          z_mean=float(d["z_mean"]), z_std=float(d["z_std"]),
                          loss_history=list(d["loss_history"]))


def write_vector_map(path, vmap: VectorMap):
    write_json(path, {
        "frame": vmap.frame,
        "elements": [{"id": e.element_id, "class": e.element_class.value,
                      "points": np.asarray(e.polyline, dtype=float).tolist()}
                     for e in vmap.elements],
    })


def read_vector_map(path) -> VectorMap:
    d = read_json(path)
    elements = [MapElement(e["id"], MapElementClass(e["class"]), np.asarray(e["points"]))
                for e in d["elements"]]
    return VectorMap(elements=elements, frame=d.get("frame", "world"))


def write_report(path, report):
    def none_if_nan(x):
        return None if x != x else x
    write_json(path, {
        "sre_px": none_if_nan(report.sre_px),
        "precision": report.precision,
        "recall": report.recall,
        "f1": report.f1,
        "frames": [{"frame_id": f.frame_id, "error_px": none_if_nan(f.mean_error_px),
                    "matched": f.matched, "projected": f.projected,
                    "instances": f.instances} for f in report.frames],
    })


# ----------------------------------------------------------------- manifest

def sha256_file(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def write_manifest(out_dir, files):
    out_dir = Path(out_dir)
    entries = {str(Path(f).relative_to(out_dir)): sha256_file(f) for f in files}
    write_json(out_dir / "manifest.json", {"files": entries})
    return entries
