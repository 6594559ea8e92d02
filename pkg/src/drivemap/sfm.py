"""Odometry-guided reconstruction: camera initialization from fused poses,
multi-view triangulation, ordinary / rig-constrained / iterative bundle
adjustment, and cross-clip model merging.

There is no incremental next-best-view logic here: camera poses are seeded
from the fused vehicle trajectory and the rig calibration at real-world
scale, every track is triangulated against those poses, and the model is
polished by repeated (re-triangulate, adjust, filter) rounds.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import ba
from .errors import (CheiralityError, DisjointModelsError, EmptyModelError,
                     HighResidualError, LowParallaxError, MissingRigError,
                     OutOfRangeError, StationaryClipWarning)
from .fusion import interpolate_pose
from .geometry import CameraIntrinsics, Pose, RigCalibration, matrix_to_quat

# ---------------------------------------------------------------------------
# data model
# ---------------------------------------------------------------------------


@dataclass
class Observation:
    image_id: str
    track_id: int
    pixel: np.ndarray

    def __post_init__(self):
        self.pixel = np.asarray(self.pixel, dtype=float).reshape(2)


@dataclass
class Track:
    track_id: int
    observations: list

    def __post_init__(self):
        images = [o.image_id for o in self.observations]
        if len(set(images)) != len(images):
            raise ValueError(f"track {self.track_id}: duplicate observation image")

    def copy(self) -> "Track":
        return Track(self.track_id,
                     [Observation(o.image_id, o.track_id, o.pixel.copy())
                      for o in self.observations])


@dataclass
class Landmark:
    track_id: int
    position: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        if not np.all(np.isfinite(self.position)):
            raise ValueError("landmark position must be finite")


@dataclass
class Camera:
    pose: Pose
    intrinsics: CameraIntrinsics


@dataclass
class ImageMeta:
    image_id: str
    timestamp: float
    camera_name: str
    clip_id: str = ""


@dataclass
class RigFrame:
    """One body pose shared by all rig cameras captured at the same timestamp."""

    timestamp: float
    pose: Pose
    members: dict  # image_id -> camera-in-body Pose (fixed)


@dataclass
class IterationStats:
    observations: int
    filtered: int
    ratio: float
    mean_error_px: float


@dataclass
class IterativeBaStats:
    iterations: list = field(default_factory=list)
    dropped_images: list = field(default_factory=list)

    @property
    def ratios(self):
        return [s.ratio for s in self.iterations]

    @property
    def mean_errors(self):
        return [s.mean_error_px for s in self.iterations]


@dataclass
class ReconstructionModel:
    cameras: dict = field(default_factory=dict)   # image_id -> Camera
    tracks: dict = field(default_factory=dict)    # track_id -> Track
    landmarks: dict = field(default_factory=dict)  # track_id -> position (3,)
    residuals: dict = field(default_factory=dict)  # (image_id, track_id) -> px error
    flagged_images: set = field(default_factory=set)
    cost_history: list = field(default_factory=list)
    # track_id -> image ids backing the landmark; absent entry means all
    # observations participate.  Set by re-triangulation so observations it
    # had to exclude do not re-enter the adjustment at full weight.
    active_obs: dict = field(default_factory=dict)

    def copy(self) -> "ReconstructionModel":
        return ReconstructionModel(
            cameras={i: Camera(c.pose.copy(), c.intrinsics) for i, c in self.cameras.items()},
            tracks={t: trk.copy() for t, trk in self.tracks.items()},
            landmarks={t: p.copy() for t, p in self.landmarks.items()},
            residuals=dict(self.residuals),
            flagged_images=set(self.flagged_images),
            cost_history=list(self.cost_history),
            active_obs={t: set(s) for t, s in self.active_obs.items()},
        )

    def active_observations(self, tid):
        act = self.active_obs.get(tid)
        return [o for o in self.tracks[tid].observations
                if o.image_id in self.cameras and (act is None or o.image_id in act)]

    def validate(self):
        for tid in self.landmarks:
            if tid not in self.tracks:
                raise ValueError(f"landmark {tid} has no track")
        for trk in self.tracks.values():
            for o in trk.observations:
                if o.image_id not in self.cameras:
                    raise ValueError(f"observation references unknown camera {o.image_id}")

    def observation_count(self) -> int:
        return sum(len(self.active_observations(t)) for t in self.landmarks)

    def mean_reprojection_error(self) -> float:
        errs = [self.residuals[k] for k in self.residuals]
        return float(np.mean(errs)) if errs else 0.0


@dataclass
class SfmConfig:
    filter_gate_px: float = 4.0           # per-observation filter inside iterative BA
    min_triangulation_angle_deg: float = 1.0
    triangulation_gate_px: float = 12.0   # residual gate when (re-)triangulating
    image_error_gate_px: float = 6.0
    max_refinement_change: float = 0.001
    max_iterations: int = 5
    rigid_max_deviation_m: float = 0.05
    timestamp_tolerance_s: float = 0.040
    stationary_span_m: float = 1e-3
    solver: ba.SolverConfig = field(default_factory=ba.SolverConfig)


@dataclass
class MergeConfig:
    require_links: bool = False
    sfm: SfmConfig = field(default_factory=SfmConfig)


# ---------------------------------------------------------------------------
# camera initialization
# ---------------------------------------------------------------------------


def init_cameras_from_odometry(traj, rig: RigCalibration, image_index,
                               intrinsics_by_camera, tolerance_s: float = 0.040):
    """Seed a camera pose per image from the fused body trajectory.

    Image timestamps may lie up to ``tolerance_s`` outside the trajectory span
    (multi-camera shutters are not synchronized to the odometry clock); the
    query is clamped to the span in that case.
    """
    stamps = [n.timestamp for n in (traj.nodes if hasattr(traj, "nodes") else traj)]
    t0, t1 = stamps[0], stamps[-1]
    cameras = {}
    for meta in image_index:
        t = min(max(meta.timestamp, t0), t1)
        if abs(meta.timestamp - t) > tolerance_s + 1e-12:
            raise OutOfRangeError(
                f"image {meta.image_id}: timestamp {meta.timestamp} is "
                f"{abs(meta.timestamp - t):.3f}s outside trajectory span")
        body = interpolate_pose(traj, t)
        pose = rig.camera_pose(body, meta.camera_name)
        cameras[meta.image_id] = Camera(pose, intrinsics_by_camera[meta.camera_name])
    return cameras


# ---------------------------------------------------------------------------
# triangulation
# ---------------------------------------------------------------------------


def _world_to_cam_rows(camera: Camera, pixel):
    R = camera.pose.rotation()
    Rt = R.T
    C = camera.pose.t
    P = np.hstack([Rt, (-Rt @ C)[:, None]])  # 3x4 world -> camera
    un = (pixel[0] - camera.intrinsics.cx) / camera.intrinsics.fx
    vn = (pixel[1] - camera.intrinsics.cy) / camera.intrinsics.fy
    return np.stack([un * P[2] - P[0], vn * P[2] - P[1]])


def _reproject_errors(X, cams, pixels):
    errs = np.empty(len(cams))
    depths = np.empty(len(cams))
    for k, (cam, px) in enumerate(zip(cams, pixels)):
        p_cam = cam.pose.rotation().T @ (X - cam.pose.t)
        depths[k] = p_cam[2]
        if p_cam[2] <= 0:
            errs[k] = np.inf
            continue
        u = cam.intrinsics.fx * p_cam[0] / p_cam[2] + cam.intrinsics.cx
        v = cam.intrinsics.fy * p_cam[1] / p_cam[2] + cam.intrinsics.cy
        errs[k] = np.hypot(u - px[0], v - px[1])
    return errs, depths


def triangulate(track: Track, cameras, min_angle_deg: float = 1.0,
                max_error_px: float = 4.0) -> Landmark:
    """Multi-view DLT triangulation with a short Gauss-Newton polish.

    Accepts only if the point has positive depth in all views, the maximum
    reprojection error stays under ``max_error_px``, and the largest pairwise
    ray angle exceeds ``min_angle_deg``.
    """
    obs = [o for o in track.observations if o.image_id in cameras]
    if len(obs) < 2:
        raise ValueError(f"track {track.track_id}: need >= 2 observations with cameras")
    cams = [cameras[o.image_id] for o in obs]
    pixels = [o.pixel for o in obs]

    A = np.vstack([_world_to_cam_rows(c, px) for c, px in zip(cams, pixels)])
    _, _, vt = np.linalg.svd(A, full_matrices=False)
    Xh = vt[-1]
    if abs(Xh[3]) < 1e-12 * np.linalg.norm(Xh[:3]):
        raise LowParallaxError(f"track {track.track_id}: point at infinity")
    X = Xh[:3] / Xh[3]

    centers = np.stack([c.pose.t for c in cams])
    rays = centers - X[None, :]
    norms = np.linalg.norm(rays, axis=1)
    if np.any(norms < 1e-9):
        raise LowParallaxError(f"track {track.track_id}: point on a camera center")
    rays = rays / norms[:, None]
    cosmax = -1.0
    max_angle = 0.0
    for i in range(len(rays)):
        dots = np.clip(rays[i + 1:] @ rays[i], -1.0, 1.0)
        if dots.size:
            max_angle = max(max_angle, float(np.degrees(np.arccos(dots.min()))))
            cosmax = max(cosmax, 1.0)
    if max_angle < min_angle_deg:
        raise LowParallaxError(
            f"track {track.track_id}: max ray angle {max_angle:.3f} deg < {min_angle_deg}")

    errs, depths = _reproject_errors(X, cams, pixels)
    if np.any(depths <= 0):
        raise CheiralityError(f"track {track.track_id}: negative depth in some view")

    # small point-only refinement; keeps noiseless DLT results untouched
    for _ in range(3):
        J = np.zeros((2 * len(cams), 3))
        r = np.zeros(2 * len(cams))
        for k, (cam, px) in enumerate(zip(cams, pixels)):
            R = cam.pose.rotation()
            p_cam = R.T @ (X - cam.pose.t)
            z = p_cam[2]
            fx, fy = cam.intrinsics.fx, cam.intrinsics.fy
            du = np.array([[fx / z, 0, -fx * p_cam[0] / z ** 2],
                           [0, fy / z, -fy * p_cam[1] / z ** 2]])
            J[2 * k:2 * k + 2] = du @ R.T
            r[2 * k] = fx * p_cam[0] / z + cam.intrinsics.cx - px[0]
            r[2 * k + 1] = fy * p_cam[1] / z + cam.intrinsics.cy - px[1]
        H = J.T @ J + 1e-12 * np.eye(3)
        try:
            step = np.linalg.solve(H, -(J.T @ r))
        except np.linalg.LinAlgError:
            break
        new_X = X + step
        new_errs, new_depths = _reproject_errors(new_X, cams, pixels)
        if np.any(new_depths <= 0) or np.sum(new_errs ** 2) > np.sum(errs ** 2):
            break
        X, errs = new_X, new_errs

    if float(errs.max()) >= max_error_px:
        raise HighResidualError(
            f"track {track.track_id}: max reprojection error {errs.max():.2f} px")
    return Landmark(track.track_id, X)


def _two_view_midpoint(cam_a: Camera, px_a, cam_b: Camera, px_b):
    """Midpoint of the common perpendicular of two back-projected rays."""
    Ra, Rb = cam_a.pose.rotation(), cam_b.pose.rotation()
    da = Ra @ np.array([(px_a[0] - cam_a.intrinsics.cx) / cam_a.intrinsics.fx,
                        (px_a[1] - cam_a.intrinsics.cy) / cam_a.intrinsics.fy, 1.0])
    db = Rb @ np.array([(px_b[0] - cam_b.intrinsics.cx) / cam_b.intrinsics.fx,
                        (px_b[1] - cam_b.intrinsics.cy) / cam_b.intrinsics.fy, 1.0])
    ca, cb = cam_a.pose.t, cam_b.pose.t
    a11 = da @ da
    a12 = -(da @ db)
    a22 = db @ db
    b = cb - ca
    det = a11 * a22 - a12 * a12
    if abs(det) < 1e-12 * a11 * a22:
        return None  # near-parallel rays
    s = (a22 * (da @ b) + a12 * (db @ b)) / det
    t = -(a11 * (db @ b) + a12 * (da @ b)) / det
    if s <= 0 or t <= 0:
        return None  # intersection behind a camera
    return 0.5 * (ca + s * da + cb + t * db)


def triangulate_robust(track: Track, cameras, min_angle_deg: float,
                       max_error_px: float):
    """Triangulate a track, tolerating gross outlier observations.

    Plain multi-view DLT first; when any gate trips, an exhaustive two-view
    consensus search picks the observation subset to keep (gross outliers
    drag the algebraic DLT solution far enough to break the parallax and
    cheirality gates, so worst-residual peeling is not reliable).  Returns
    (Landmark, used_observations) or (None, []); excluded observations stay
    in the track.
    """
    working = [o for o in track.observations if o.image_id in cameras]
    if len(working) < 2:
        return None, []
    try:
        lm = triangulate(Track(track.track_id, working), cameras,
                         min_angle_deg, max_error_px)
        return lm, list(working)
    except (HighResidualError, LowParallaxError, CheiralityError):
        pass

    cams = [cameras[o.image_id] for o in working]
    pixels = [o.pixel for o in working]
    best_inliers = None
    for i in range(len(working)):
        for j in range(i + 1, len(working)):
            X = _two_view_midpoint(cams[i], pixels[i], cams[j], pixels[j])
            if X is None:
                continue
            errs, depths = _reproject_errors(X, cams, pixels)
            inliers = (errs < max_error_px) & (depths > 0)
            if best_inliers is None or inliers.sum() > best_inliers.sum():
                best_inliers = inliers
    if best_inliers is None or best_inliers.sum() < 2:
        return None, []
    subset = [o for o, keep in zip(working, best_inliers) if keep]
    try:
        lm = triangulate(Track(track.track_id, subset), cameras,
                         min_angle_deg, max_error_px)
        return lm, subset
    except (HighResidualError, LowParallaxError, CheiralityError):
        return None, []


# ---------------------------------------------------------------------------
# bundle adjustment wrappers
# ---------------------------------------------------------------------------


def _pack_ordinary(model: ReconstructionModel):
    image_ids = sorted(model.cameras)
    cam_index = {i: k for k, i in enumerate(image_ids)}
    track_ids = sorted(model.landmarks)
    pt_index = {t: k for k, t in enumerate(track_ids)}
    obs_ent, obs_pt, uv, K = [], [], [], []
    for tid in track_ids:
        for o in model.active_observations(tid):
            cam = model.cameras[o.image_id]
            obs_ent.append(cam_index[o.image_id])
            obs_pt.append(pt_index[tid])
            uv.append(o.pixel)
            K.append([cam.intrinsics.fx, cam.intrinsics.fy,
                      cam.intrinsics.cx, cam.intrinsics.cy])
    ent_R = np.stack([model.cameras[i].pose.rotation() for i in image_ids])
    ent_t = np.stack([model.cameras[i].pose.t for i in image_ids])
    X = np.stack([model.landmarks[t] for t in track_ids]) if track_ids else np.zeros((0, 3))
    n_obs = len(obs_ent)
    rel_R = np.broadcast_to(np.eye(3), (n_obs, 3, 3))
    rel_t = np.zeros((n_obs, 3))
    return (image_ids, track_ids, ent_R, ent_t, X, rel_R, rel_t,
            np.array(obs_ent, dtype=int), np.array(obs_pt, dtype=int),
            np.array(uv, dtype=float).reshape(-1, 2), np.array(K, dtype=float).reshape(-1, 4))


def update_residuals(model: ReconstructionModel):
    """Recompute per-observation reprojection errors for all landmarks."""
    model.residuals = {}
    for tid, X in model.landmarks.items():
        for o in model.tracks[tid].observations:
            if o.image_id not in model.cameras:
                continue
            cam = model.cameras[o.image_id]
            p_cam = cam.pose.rotation().T @ (X - cam.pose.t)
            if p_cam[2] <= 0:
                model.residuals[(o.image_id, tid)] = float("inf")
                continue
            u = cam.intrinsics.fx * p_cam[0] / p_cam[2] + cam.intrinsics.cx
            v = cam.intrinsics.fy * p_cam[1] / p_cam[2] + cam.intrinsics.cy
            model.residuals[(o.image_id, tid)] = float(np.hypot(u - o.pixel[0],
                                                                v - o.pixel[1]))
    return model


def bundle_adjust(model: ReconstructionModel, cfg: SfmConfig | None = None,
                  fixed_images=None) -> ReconstructionModel:
    """Joint refinement of camera poses and landmark positions.

    Intrinsics stay fixed; by default the gauge is fixed by holding the first
    camera (lowest image id) constant.  ``fixed_images`` may name additional
    cameras to hold, or be the string ``"all"`` for structure-only refinement.
    """
    cfg = cfg or SfmConfig()
    usable = [t for t in model.landmarks
              if sum(o.image_id in model.cameras
                     for o in model.tracks[t].observations) >= 2]
    if not usable:
        raise ValueError("bundle adjustment needs >= 1 landmark with >= 2 observations")
    out = model.copy()
    (image_ids, track_ids, ent_R, ent_t, X, rel_R, rel_t,
     obs_ent, obs_pt, uv, K) = _pack_ordinary(out)
    if fixed_images == "all":
        fixed = list(range(len(image_ids)))
    elif fixed_images:
        fixed = [image_ids.index(i) for i in fixed_images]
        if 0 not in fixed:
            fixed.append(0)
    else:
        fixed = [0]
    ent_R, ent_t, X, costs = ba.solve_bundle(ent_R, ent_t, X, rel_R, rel_t,
                                             obs_ent, obs_pt, uv, K,
                                             fixed_entities=fixed, cfg=cfg.solver)
    for k, iid in enumerate(image_ids):
        out.cameras[iid] = Camera(Pose(t=ent_t[k], q=matrix_to_quat(ent_R[k])),
                                  out.cameras[iid].intrinsics)
    for k, tid in enumerate(track_ids):
        out.landmarks[tid] = X[k]
    out.cost_history = costs
    return update_residuals(out)


def rigid_bundle_adjust(frames, model: ReconstructionModel,
                        cfg: SfmConfig | None = None) -> ReconstructionModel:
    """Bundle adjustment with one pose block per rig frame.

    Camera poses are derived from the frame pose and the fixed camera-in-body
    transforms, cutting the pose parameter count from 6 per camera to 6 per
    frame.  After convergence each camera is re-estimated independently
    against the adjusted landmarks; cameras whose position deviates from the
    rigid prediction by more than ``rigid_max_deviation_m`` are flagged.
    """
    cfg = cfg or SfmConfig()
    frames = list(frames)
    member_of = {}
    for fi, fr in enumerate(frames):
        for iid in fr.members:
            member_of[iid] = fi
    for iid in model.cameras:
        if iid not in member_of:
            raise MissingRigError(f"camera {iid} has no rig-frame assignment")

    out = model.copy()
    track_ids = sorted(out.landmarks)
    if not track_ids:
        raise ValueError("rigid bundle adjustment needs landmarks")
    pt_index = {t: k for k, t in enumerate(track_ids)}
    obs_ent, obs_pt, uv, K, rel_R, rel_t = [], [], [], [], [], []
    for tid in track_ids:
        for o in out.active_observations(tid):
            fi = member_of[o.image_id]
            rel = frames[fi].members[o.image_id]
            cam = out.cameras[o.image_id]
            obs_ent.append(fi)
            obs_pt.append(pt_index[tid])
            uv.append(o.pixel)
            K.append([cam.intrinsics.fx, cam.intrinsics.fy,
                      cam.intrinsics.cx, cam.intrinsics.cy])
            rel_R.append(rel.rotation())
            rel_t.append(rel.t)

    ent_R = np.stack([fr.pose.rotation() for fr in frames])
    ent_t = np.stack([fr.pose.t for fr in frames])
    X = np.stack([out.landmarks[t] for t in track_ids])
    ent_R, ent_t, X, costs = ba.solve_bundle(
        ent_R, ent_t, X, np.stack(rel_R), np.stack(rel_t),
        np.array(obs_ent, dtype=int), np.array(obs_pt, dtype=int),
        np.array(uv, dtype=float).reshape(-1, 2), np.array(K, dtype=float).reshape(-1, 4),
        fixed_entities=[0], cfg=cfg.solver)

    for fi, fr in enumerate(frames):
        fr.pose = Pose(t=ent_t[fi], q=matrix_to_quat(ent_R[fi]))
        for iid, rel in fr.members.items():
            if iid in out.cameras:
                out.cameras[iid] = Camera(fr.pose.compose(rel),
                                          out.cameras[iid].intrinsics)
    for k, tid in enumerate(track_ids):
        out.landmarks[tid] = X[k]
    out.cost_history = costs
    update_residuals(out)

    # independent per-camera re-estimation against the adjusted structure;
    # big deviations mean the rigid assumption is off for that view
    obs_by_image = {}
    for tid in track_ids:
        for o in out.tracks[tid].observations:
            obs_by_image.setdefault(o.image_id, []).append((tid, o.pixel))
    out.flagged_images = set()
    for iid, cam in out.cameras.items():
        entries = obs_by_image.get(iid, [])
        if len(entries) < 6:
            continue
        Xs = np.stack([out.landmarks[t] for t, _ in entries])
        uvs = np.stack([p for _, p in entries])
        Kc = np.tile([cam.intrinsics.fx, cam.intrinsics.fy,
                      cam.intrinsics.cx, cam.intrinsics.cy], (len(entries), 1))
        R_i, t_i, _ = ba.refine_single_pose(cam.pose.rotation(), cam.pose.t, Xs, uvs, Kc,
                                            cfg.solver)
        if np.linalg.norm(t_i - cam.pose.t) > cfg.rigid_max_deviation_m:
            out.flagged_images.add(iid)
    return out


# ---------------------------------------------------------------------------
# iterative BA (re-triangulate, adjust, filter until the filter ratio settles)
# ---------------------------------------------------------------------------


def _retriangulate(model: ReconstructionModel, cfg: SfmConfig):
    model.landmarks = {}
    model.active_obs = {}
    for tid, trk in model.tracks.items():
        lm, used = triangulate_robust(trk, model.cameras,
                                      cfg.min_triangulation_angle_deg,
                                      cfg.triangulation_gate_px)
        if lm is not None:
            model.landmarks[tid] = lm.position
            model.active_obs[tid] = {o.image_id for o in used}
    return model


def _filter_model(model: ReconstructionModel, cfg: SfmConfig) -> int:
    """Remove observations over the reprojection gate (permanently) and drop
    landmarks that lose geometric support.  Returns removed observation count."""
    update_residuals(model)
    removed = 0
    for tid in list(model.landmarks):
        trk = model.tracks[tid]
        keep, drop = [], []
        for o in trk.observations:
            err = model.residuals.get((o.image_id, tid))
            if err is not None and err > cfg.filter_gate_px:
                drop.append(o)
            else:
                keep.append(o)
        if drop:
            removed += len(drop)
            trk.observations = keep
        present = [o for o in keep if o.image_id in model.cameras]
        ok = len(present) >= 2
        if ok:
            X = model.landmarks[tid]
            cams = [model.cameras[o.image_id] for o in present]
            errs, depths = _reproject_errors(X, cams, [o.pixel for o in present])
            centers = np.stack([c.pose.t for c in cams])
            rays = centers - X[None, :]
            nn = np.linalg.norm(rays, axis=1)
            ok = np.all(depths > 0) and np.all(nn > 1e-9)
            if ok:
                rays = rays / nn[:, None]
                max_angle = 0.0
                for i in range(len(rays)):
                    dots = np.clip(rays[i + 1:] @ rays[i], -1.0, 1.0)
                    if dots.size:
                        max_angle = max(max_angle, float(np.degrees(np.arccos(dots.min()))))
                ok = max_angle >= cfg.min_triangulation_angle_deg
        if not ok:
            removed += len(present)
            del model.landmarks[tid]
        model.active_obs.pop(tid, None)  # survivors all pass the gate now
    update_residuals(model)
    return removed


def iterative_ba(model: ReconstructionModel, cfg: SfmConfig | None = None):
    """Alternate re-triangulation, bundle adjustment, and outlier filtering.

    Stops when the filtered-to-observed ratio falls to
    ``max_refinement_change`` or the iteration cap is hit; afterwards drops
    whole images whose mean reprojection error exceeds the image gate.
    """
    cfg = cfg or SfmConfig()
    out = model.copy()
    stats = IterativeBaStats()
    for _ in range(cfg.max_iterations):
        _retriangulate(out, cfg)
        if not out.landmarks:
            raise EmptyModelError("no landmarks survive re-triangulation")
        observations = out.observation_count()
        out = bundle_adjust(out, cfg)
        _retriangulate(out, cfg)
        if not out.landmarks:
            raise EmptyModelError("no landmarks survive post-adjustment re-triangulation")
        filtered = _filter_model(out, cfg)
        if not out.landmarks:
            raise EmptyModelError("filtering removed every landmark")
        ratio = min(1.0, filtered / max(observations, 1))
        stats.iterations.append(IterationStats(observations, filtered, ratio,
                                               out.mean_reprojection_error()))
        if ratio <= cfg.max_refinement_change:
            break

    # drop whole images whose mean residual stays high
    by_image = {}
    for (iid, _tid), err in out.residuals.items():
        by_image.setdefault(iid, []).append(err)
    bad = {iid for iid, errs in by_image.items()
           if float(np.mean(errs)) > cfg.image_error_gate_px}
    if bad:
        stats.dropped_images = sorted(bad)
        for iid in bad:
            del out.cameras[iid]
        for trk in out.tracks.values():
            trk.observations = [o for o in trk.observations if o.image_id not in bad]
        for tid in list(out.landmarks):
            if sum(o.image_id in out.cameras
                   for o in out.tracks[tid].observations) < 2:
                del out.landmarks[tid]
        if not out.landmarks:
            raise EmptyModelError("image filtering removed every landmark")
        update_residuals(out)
    return out, stats


# ---------------------------------------------------------------------------
# clip reconstruction and merging
# ---------------------------------------------------------------------------


def reconstruct_clip(traj, rig: RigCalibration, intrinsics_by_camera, images,
                     tracks, cfg: SfmConfig | None = None):
    """Full single-clip pipeline: odometry-seeded cameras, triangulation,
    iterative bundle adjustment.  Deterministic given its inputs."""
    cfg = cfg or SfmConfig()
    cameras = init_cameras_from_odometry(traj, rig, images, intrinsics_by_camera,
                                         cfg.timestamp_tolerance_s)
    model = ReconstructionModel(cameras=cameras,
                                tracks={t.track_id: t.copy() for t in tracks})
    nodes = traj.nodes if hasattr(traj, "nodes") else list(traj)
    positions = np.stack([n.pose.t for n in nodes])
    span = float(np.linalg.norm(positions.max(axis=0) - positions.min(axis=0)))
    if span < cfg.stationary_span_m:
        warnings.warn(
            "stationary clip: zero baseline everywhere, no structure recovered",
            StationaryClipWarning)
        return model
    model, _stats = iterative_ba(model, cfg)
    return model


def merge_models(models, cross_pairs, cross_tracks,
                 cfg: MergeConfig | None = None) -> ReconstructionModel:
    """Concatenate per-clip models, unify cross-clip tracks, and re-optimize.

    ``cross_tracks`` is an iterable of track-id groups that observe the same
    physical feature in different clips; each group is collapsed onto its
    smallest id.  ``cross_pairs`` (the spatial pair list) is accepted for
    bookkeeping; track identity alone drives the unification.
    """
    cfg = cfg or MergeConfig()
    models = list(models)
    cross_tracks = [list(g) for g in cross_tracks]
    if cfg.require_links and not cross_tracks:
        raise DisjointModelsError("no cross-clip track links between models")

    merged = ReconstructionModel()
    for m in models:
        for iid, cam in m.cameras.items():
            if iid in merged.cameras:
                raise ValueError(f"duplicate image id across models: {iid}")
            merged.cameras[iid] = Camera(cam.pose.copy(), cam.intrinsics)
        for tid, trk in m.tracks.items():
            if tid in merged.tracks:
                seen = {o.image_id for o in merged.tracks[tid].observations}
                merged.tracks[tid].observations.extend(
                    o for o in trk.copy().observations if o.image_id not in seen)
            else:
                merged.tracks[tid] = trk.copy()

    parent = {}

    def find(x):
        parent.setdefault(x, x)
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            if rb < ra:
                ra, rb = rb, ra
            parent[rb] = ra

    for group in cross_tracks:
        for other in group[1:]:
            union(group[0], other)
    remap = {tid: find(tid) for tid in merged.tracks if find(tid) != tid}
    for old, new in sorted(remap.items()):
        src = merged.tracks.pop(old)
        if new not in merged.tracks:
            merged.tracks[new] = Track(new, [])
        seen = {o.image_id for o in merged.tracks[new].observations}
        for o in src.observations:
            if o.image_id not in seen:
                merged.tracks[new].observations.append(
                    Observation(o.image_id, new, o.pixel))
                seen.add(o.image_id)

    merged, _stats = iterative_ba(merged, cfg.sfm)
    return merged
