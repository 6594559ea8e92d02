"""Deterministic synthetic driving scenes: ground-truth world, noisy sensor
streams, feature tracks, and rendered masks for every pipeline stage.

The world model is a set of straight roads (centerline, width, painted lane
dividers / boundaries / optional crossings) over an analytic elevation
function.  Clips drive along a road lane at constant speed; every trajectory,
factor, track, and raster is a pure function of (spec, seed), so two
generations are byte-identical.

The vehicle frame has x forward / y left / z up with the origin on the
ground; the published trajectories are reference-camera poses (the rig is
anchored at the front camera per the rig-calibration convention), so the
configured ground offset of the rig carries the camera height.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidSpecError
from .evaluation import CropBox, project_map_to_frame
from .fusion import GnssFactor, OdometryFactor, StateNode
from .geometry import CameraIntrinsics, Pose, RigCalibration, quat_multiply, rotvec_to_quat
from .sfm import Camera, ImageMeta, Observation, Track
from .surface import SemanticClass
from .vectormap import MapElement, MapElementClass, VectorMap

# ---------------------------------------------------------------------------
# world specification
# ---------------------------------------------------------------------------


@dataclass
class RoadSpec:
    start: tuple = (0.0, 0.0)
    heading_deg: float = 0.0
    length: float = 120.0
    width: float = 14.0
    divider_offsets: tuple = (-1.8, 1.8)
    boundary_offsets: tuple = (-6.9, 6.9)
    crossing_positions: tuple = ()


@dataclass
class ClipSpec:
    clip_id: str = "clip_00"
    road_index: int = 0
    lane_offset: float = -3.6
    start_s: float = 40.0
    end_s: float = 80.0
    reverse: bool = False


@dataclass
class SceneSpec:
    roads: list = field(default_factory=lambda: [RoadSpec()])
    clips: list = field(default_factory=lambda: [
        ClipSpec("clip_00", 0, -3.6, 40.0, 80.0),
        ClipSpec("clip_01", 0, 3.6, 42.0, 82.0),
    ])
    elevation: str = "flat"              # flat | slope | sinusoid
    elevation_params: dict = field(default_factory=dict)
    speed_mps: float = 10.0
    node_rate_hz: float = 10.0
    image_every: int = 5                 # image frame every N-th trajectory node
    camera_time_offset: float = 0.002    # per-camera shutter offset, seconds
    n_ground_points: int = 1400
    lane_point_fraction: float = 0.25
    teeth_point_fraction: float = 0.15
    visibility_range: tuple = (2.0, 40.0)
    pixel_margin: float = 4.0
    min_track_length: int = 2
    odom_drift: float = 0.0              # translation error fraction per step
    odom_rot_sigma: float = 0.0          # radians per step
    odom_sigma_t: float = 0.05
    odom_sigma_r: float = 0.005
    gnss_sigma: float = 0.0
    gnss_every: int = 10
    pixel_sigma: float = 0.0
    outlier_fraction: float = 0.0
    mask_cameras: tuple = ("front", "back")
    mask_depth: tuple = (7.0, 35.0)
    mask_lateral: float = 14.5
    # only mid-clip frames get evaluation masks: their crop views stay inside
    # the region the surface stage can paint densely
    eval_node_range: tuple = (0.3, 0.7)
    eval_crop: tuple = (-15.0, 15.0, 6.5, 35.5)
    match_gate_px: float = 20.0
    min_instance_px: int = 30
    stroke_radius_px: float = 1.5     # evaluation instance masks (image space)
    paint_half_width_m: float = 0.125  # semantic paint bands (ground space)
    render_masks: bool = True
    render_images: bool = True
    covisibility: bool = False
    covis_min_shared: int = 12
    seed: int = 0

    def validate(self):
        if not self.roads or not self.clips:
            raise InvalidSpecError("need at least one road and one clip")
        for c in self.clips:
            if c.road_index >= len(self.roads):
                raise InvalidSpecError(f"{c.clip_id}: road index out of range")
            if c.end_s <= c.start_s:
                raise InvalidSpecError(f"{c.clip_id}: end_s must exceed start_s")
        for name, val in (("odom_drift", self.odom_drift),
                          ("odom_rot_sigma", self.odom_rot_sigma),
                          ("gnss_sigma", self.gnss_sigma),
                          ("pixel_sigma", self.pixel_sigma)):
            if val < 0:
                raise InvalidSpecError(f"{name} must be >= 0")
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise InvalidSpecError("outlier_fraction must be in [0,1]")
        if self.elevation not in ("flat", "slope", "sinusoid"):
            raise InvalidSpecError(f"unknown elevation kind {self.elevation!r}")

    def to_dict(self):
        d = asdict(self)
        d["roads"] = [asdict(r) for r in self.roads]
        d["clips"] = [asdict(c) for c in self.clips]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["roads"] = [RoadSpec(**{**r, "start": tuple(r["start"]),
                                  "divider_offsets": tuple(r["divider_offsets"]),
                                  "boundary_offsets": tuple(r["boundary_offsets"]),
                                  "crossing_positions": tuple(r["crossing_positions"])})
                      for r in d["roads"]]
        d["clips"] = [ClipSpec(**c) for c in d["clips"]]
        for key in ("visibility_range", "mask_cameras", "mask_depth", "eval_crop"):
            d[key] = tuple(d[key])
        return cls(**d)


def elevation_function(kind: str, params: dict):
    if kind == "flat":
        return lambda x, y: np.zeros_like(np.asarray(x, dtype=float))
    if kind == "slope":
        sx = params.get("sx", 0.02)
        sy = params.get("sy", 0.0)
        return lambda x, y: sx * np.asarray(x, dtype=float) + sy * np.asarray(y, dtype=float)
    if kind == "sinusoid":
        amp = params.get("amplitude", 0.5)
        scale = params.get("scale", 10.0)
        return lambda x, y: amp * np.sin(np.asarray(x, dtype=float) / scale)
    raise InvalidSpecError(f"unknown elevation kind {kind!r}")


# ---------------------------------------------------------------------------
# rig
# ---------------------------------------------------------------------------

CAMERA_HEIGHT = 1.6
PITCH_DOWN_DEG = 10.0
# surround layout: (name, yaw from forward in deg, mount offset in vehicle frame)
CAMERA_LAYOUT = [
    ("front", 0.0, (1.2, 0.0, CAMERA_HEIGHT)),
    ("front_left", 55.0, (0.8, 0.5, CAMERA_HEIGHT)),
    ("front_right", -55.0, (0.8, -0.5, CAMERA_HEIGHT)),
    ("back", 180.0, (-1.2, 0.0, CAMERA_HEIGHT)),
    ("back_left", 125.0, (-0.8, 0.5, CAMERA_HEIGHT)),
    ("back_right", -125.0, (-0.8, -0.5, CAMERA_HEIGHT)),
]
DEFAULT_INTRINSICS = dict(fx=320.0, fy=320.0, cx=256.0, cy=160.0, width=512, height=320)

# camera axes for a forward-looking camera in the vehicle frame
_CAM_BASE = np.array([[0, 0, 1], [-1, 0, 0], [0, -1, 0]], dtype=float)


def _camera_in_vehicle(yaw_deg: float, position) -> Pose:
    yaw = math.radians(yaw_deg)
    pitch = math.radians(PITCH_DOWN_DEG)
    cz, sz = math.cos(yaw), math.sin(yaw)
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    cp, sp = math.cos(-pitch), math.sin(-pitch)
    Rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    return Pose.from_rt(Rz @ _CAM_BASE @ Rx, position)


def default_rig(camera_names=None):
    """Six-camera surround rig anchored at the front camera.

    Returns (RigCalibration, intrinsics dict, camera-in-vehicle dict).  Rig
    transforms are relative to the front camera so its entry is the identity,
    as the calibration convention requires.
    """
    names = list(camera_names) if camera_names else [n for n, _, _ in CAMERA_LAYOUT]
    in_vehicle = {n: _camera_in_vehicle(yaw, pos)
                  for n, yaw, pos in CAMERA_LAYOUT if n in names}
    if "front" not in in_vehicle:
        raise InvalidSpecError("rig needs the front (reference) camera")
    ref_inv = in_vehicle["front"].inverse()
    transforms = {n: ref_inv.compose(p) for n, p in in_vehicle.items()}
    intr = {n: CameraIntrinsics(**DEFAULT_INTRINSICS) for n in transforms}
    return RigCalibration(transforms, reference="front"), intr, in_vehicle


# ---------------------------------------------------------------------------
# generated bundle
# ---------------------------------------------------------------------------


@dataclass
class ClipBundle:
    clip_id: str
    nodes_gt: list
    nodes_init: list
    odom_factors: list
    gnss_factors: list
    images: list
    tracks: list


@dataclass
class SceneBundle:
    spec: SceneSpec
    rig: RigCalibration
    intrinsics: dict
    clips: list
    gt_cameras: dict               # image_id -> Camera (ground truth)
    track_classes: dict            # per-clip track id -> SemanticClass
    cross_tracks: list
    outlier_labels: set            # (track_id, image_id)
    vector_map: VectorMap
    masks: dict                    # image_id -> {class value: (H,W) int raster}
    semantic_images: dict          # image_id -> (H,W) uint8 class raster
    photo_images: dict             # image_id -> (H,W,3) uint8
    eval_frames: list              # image ids with masks
    gt_points: dict = field(default_factory=dict)  # global point id -> (3,)
    covisible_pairs: set | None = None

    def gt_point_of_track(self, track_id: int):
        return self.gt_points.get(track_id % 1_000_000)

    @property
    def elevation_fn(self):
        return elevation_function(self.spec.elevation, self.spec.elevation_params)

    def eval_crop(self) -> CropBox:
        x0, x1, y0, y1 = self.spec.eval_crop
        return CropBox(x_min=x0, x_max=x1, y_min=y0, y_max=y1)


# ---------------------------------------------------------------------------
# world construction helpers
# ---------------------------------------------------------------------------


def _road_frame(road: RoadSpec):
    h = math.radians(road.heading_deg)
    d = np.array([math.cos(h), math.sin(h)])
    left = np.array([-d[1], d[0]])
    start = np.asarray(road.start, dtype=float)
    return start, d, left


def _road_point(road: RoadSpec, s, lateral, elev):
    start, d, left = _road_frame(road)
    xy = start[None] + np.outer(np.atleast_1d(s), d) + np.outer(np.atleast_1d(lateral), left)
    z = elev(xy[:, 0], xy[:, 1])
    return np.column_stack([xy, z])


def build_vector_map(spec: SceneSpec, elev) -> VectorMap:
    """Ground-truth 3D map elements across all roads, sampled every 2 m."""
    elements = []
    for ri, road in enumerate(spec.roads):
        s = np.arange(0.0, road.length + 1e-9, 2.0)
        for k, off in enumerate(road.divider_offsets):
            pts = _road_point(road, s, np.full_like(s, off), elev)
            elements.append(MapElement(f"r{ri}_divider_{k}",
                                       MapElementClass.LANE_DIVIDER, pts))
        for k, off in enumerate(road.boundary_offsets):
            pts = _road_point(road, s, np.full_like(s, off), elev)
            elements.append(MapElement(f"r{ri}_boundary_{k}",
                                       MapElementClass.ROAD_BOUNDARY, pts))
        half = road.width / 2.0 - 0.5
        lat = np.arange(-half, half + 1e-9, 1.0)
        for k, cs in enumerate(road.crossing_positions):
            pts = _road_point(road, np.full_like(lat, cs), lat, elev)
            elements.append(MapElement(f"r{ri}_crossing_{k}",
                                       MapElementClass.PED_CROSSING, pts))
    return VectorMap(elements=elements)


def _sample_ground_points(spec: SceneSpec, elev, rng):
    """World points with semantic classes; lane/teeth points sit on the paint."""
    positions, classes = [], []
    total_len = sum(r.length for r in spec.roads)
    for road in spec.roads:
        n = max(int(round(spec.n_ground_points * road.length / total_len)), 1)
        n_lane = int(n * spec.lane_point_fraction)
        n_teeth = int(n * spec.teeth_point_fraction)
        n_road = n - n_lane - n_teeth
        s = rng.uniform(0.0, road.length, n_road)
        lat = rng.uniform(-road.width / 2.0, road.width / 2.0, n_road)
        positions.append(_road_point(road, s, lat, elev))
        classes.extend([SemanticClass.ROAD_SURFACE] * n_road)
        if road.divider_offsets and n_lane:
            s = rng.uniform(0.0, road.length, n_lane)
            lat = rng.choice(road.divider_offsets, n_lane) + rng.uniform(-0.08, 0.08, n_lane)
            positions.append(_road_point(road, s, lat, elev))
            classes.extend([SemanticClass.LANE_MARKING] * n_lane)
        if road.boundary_offsets and n_teeth:
            s = rng.uniform(0.0, road.length, n_teeth)
            lat = rng.choice(road.boundary_offsets, n_teeth) + rng.uniform(-0.08, 0.08, n_teeth)
            positions.append(_road_point(road, s, lat, elev))
            classes.extend([SemanticClass.ROAD_TEETH] * n_teeth)
    return np.vstack(positions), classes


def _vehicle_pose(road: RoadSpec, s: float, lateral: float, reverse: bool, elev) -> Pose:
    heading = math.radians(road.heading_deg) + (math.pi if reverse else 0.0)
    p = _road_point(road, s, lateral, elev)[0]
    return Pose(t=p, q=rotvec_to_quat([0.0, 0.0, heading]))


# ---------------------------------------------------------------------------
# rasterization helpers
# ---------------------------------------------------------------------------


def _stamp_polyline(raster, uv, value, radius):
    """Paint a stroke of ~2*radius width along a pixel polyline."""
    h, w = raster.shape[:2]
    if len(uv) < 2:
        return
    dense = []
    for a, b in zip(uv[:-1], uv[1:]):
        n = max(int(np.ceil(np.linalg.norm(b - a) / 0.5)), 1)
        t = np.linspace(0.0, 1.0, n + 1)
        dense.append(a[None] + t[:, None] * (b - a)[None])
    pts = np.vstack(dense)
    offs = [(du, dv) for du in range(-2, 3) for dv in range(-2, 3)
            if math.hypot(du, dv) <= radius]
    base = np.round(pts).astype(int)
    for du, dv in offs:
        uu = base[:, 0] + du
        vv = base[:, 1] + dv
        ok = (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h)
        raster[vv[ok], uu[ok]] = value


def classify_ground(spec: SceneSpec, x, y) -> np.ndarray:
    """Semantic class of ground positions from the analytic world model.

    Paint bands (dividers, crossings, curbs) have a fixed metric width
    ``paint_half_width_m``; road surface fills the road rectangles; anything
    else is OTHER.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    out = np.full(x.shape, int(SemanticClass.OTHER), dtype=np.uint8)
    hw = spec.paint_half_width_m
    for road in spec.roads:
        start, d, left = _road_frame(road)
        s = (x - start[0]) * d[0] + (y - start[1]) * d[1]
        lat = (x - start[0]) * left[0] + (y - start[1]) * left[1]
        on_road = (s >= 0) & (s <= road.length) & (np.abs(lat) <= road.width / 2.0)
        out[on_road & (out == int(SemanticClass.OTHER))] = int(SemanticClass.ROAD_SURFACE)
        for off in road.boundary_offsets:
            band = on_road & (np.abs(lat - off) <= hw)
            out[band] = int(SemanticClass.ROAD_TEETH)
        for off in road.divider_offsets:
            band = on_road & (np.abs(lat - off) <= hw)
            out[band] = int(SemanticClass.LANE_MARKING)
        for cs in road.crossing_positions:
            band = on_road & (np.abs(s - cs) <= 1.5) \
                & (np.abs(lat) <= road.width / 2.0 - 0.5)
            out[band] = int(SemanticClass.LANE_MARKING)
    return out


def render_semantic_image(camera: Camera, spec: SceneSpec, elev,
                          max_depth: float = 120.0):
    """Class raster seen by one camera, by casting every pixel to the ground.

    Ray/surface intersection iterates the height lookup a few times, which
    converges for the gentle elevation profiles the generator produces.
    Pixels at or above the horizon (or beyond ``max_depth``) stay OTHER.
    """
    intr = camera.intrinsics
    R = camera.pose.rotation()
    C = camera.pose.t
    us, vs = np.meshgrid(np.arange(intr.width) + 0.0, np.arange(intr.height) + 0.0)
    d_cam = np.stack([(us.ravel() - intr.cx) / intr.fx,
                      (vs.ravel() - intr.cy) / intr.fy,
                      np.ones(us.size)], axis=1)
    d = d_cam @ R.T
    down = d[:, 2] < -1e-6
    s = np.full(us.size, np.nan)
    z_ground = np.zeros(us.size)
    s[down] = (z_ground[down] - C[2]) / d[down, 2]
    for _ in range(3):
        px = C[0] + s[down] * d[down, 0]
        py = C[1] + s[down] * d[down, 1]
        z_ground[down] = elev(px, py)
        s[down] = (z_ground[down] - C[2]) / d[down, 2]
    hit = down & (s > 0) & (s * np.linalg.norm(d, axis=1) < max_depth)
    raster = np.full(us.size, int(SemanticClass.OTHER), dtype=np.uint8)
    gx = C[0] + s[hit] * d[hit, 0]
    gy = C[1] + s[hit] * d[hit, 1]
    raster[hit] = classify_ground(spec, gx, gy)
    return raster.reshape(intr.height, intr.width)


CLASS_COLORS = {
    int(SemanticClass.ROAD_SURFACE): (98, 98, 98),
    int(SemanticClass.LANE_MARKING): (222, 222, 222),
    int(SemanticClass.ROAD_TEETH): (72, 66, 58),
    int(SemanticClass.OTHER): (34, 80, 38),
}


def photo_from_semantic(semantic: np.ndarray) -> np.ndarray:
    img = np.zeros(semantic.shape + (3,), dtype=np.uint8)
    for value, rgb in CLASS_COLORS.items():
        img[semantic == value] = rgb
    return img


def render_instance_masks(camera: Camera, spec: SceneSpec, vmap: VectorMap):
    """Per-class instance-id rasters for one frame, stroked like the paint.

    Instances are numbered 1..K per class in element order after dropping
    instances with fewer than ``min_instance_px`` pixels, keeping ids
    contiguous.
    """
    intr = camera.intrinsics
    crop = CropBox(x_min=-spec.mask_lateral, x_max=spec.mask_lateral,
                   y_min=spec.mask_depth[0], y_max=spec.mask_depth[1])
    projected = project_map_to_frame(vmap, camera.pose, intr, crop, densify_m=0.5)
    masks = {}
    for cls in MapElementClass:
        layers = []
        for pe in projected:
            if MapElementClass(pe.element_class) != cls:
                continue
            layer = np.zeros((intr.height, intr.width), dtype=np.uint8)
            for pl in pe.polylines:
                _stamp_polyline(layer, pl, 1, spec.stroke_radius_px)
            if int(layer.sum()) >= spec.min_instance_px:
                layers.append(layer)
        if not layers:
            continue
        mask = np.zeros((intr.height, intr.width), dtype=np.uint8)
        for k, layer in enumerate(layers):
            mask[layer > 0] = k + 1  # later elements overwrite on overlap
        masks[cls.value] = mask
    return masks


# ---------------------------------------------------------------------------
# the generator
# ---------------------------------------------------------------------------


def generate_scene(spec: SceneSpec) -> SceneBundle:
    """Produce the full ground-truth bundle for a scene spec (pure in seed)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    elev = elevation_function(spec.elevation, spec.elevation_params)
    rig, intrinsics, in_vehicle = default_rig()
    ref_in_vehicle = in_vehicle["front"]
    vmap = build_vector_map(spec, elev)
    points, classes = _sample_ground_points(spec, elev, rng)

    clips = []
    gt_cameras = {}
    track_classes = {}
    outlier_labels = set()
    image_visible = {}       # image_id -> set of global point ids (pre-noise)
    global_tracks = {}       # gid -> list of (clip_idx, per-clip obs)

    dt = 1.0 / spec.node_rate_hz
    step = spec.speed_mps * dt
    cam_names = sorted(rig.camera_in_body)

    for ci, clip in enumerate(spec.clips):
        road = spec.roads[clip.road_index]
        n_nodes = int(math.floor((clip.end_s - clip.start_s) / step + 1e-9)) + 1

        def s_at(k_or_t):
            travel = k_or_t * step if isinstance(k_or_t, int) else spec.speed_mps * k_or_t
            return (clip.end_s - travel) if clip.reverse else (clip.start_s + travel)

        nodes_gt = []
        for k in range(n_nodes):
            veh = _vehicle_pose(road, s_at(k), clip.lane_offset, clip.reverse, elev)
            nodes_gt.append(StateNode(k * dt, veh.compose(ref_in_vehicle)))

        # odometry with a per-clip systematic drift direction plus white noise
        bias_dir = rng.standard_normal(3)
        bias_dir /= max(np.linalg.norm(bias_dir), 1e-12)
        odom = []
        for k in range(n_nodes - 1):
            rel = nodes_gt[k].pose.inverse().compose(nodes_gt[k + 1].pose)
            mag = spec.odom_drift * np.linalg.norm(rel.t)
            noise = mag * (0.7 * bias_dir + 0.7 * rng.standard_normal(3))
            dq = rotvec_to_quat(rng.standard_normal(3) * spec.odom_rot_sigma)
            odom.append(OdometryFactor(k, k + 1,
                                       Pose(t=rel.t + noise, q=quat_multiply(rel.q, dq)),
                                       spec.odom_sigma_t, max(spec.odom_sigma_r, 1e-4)))
        nodes_init = [StateNode(nodes_gt[0].timestamp, nodes_gt[0].pose.copy())]
        for k, f in enumerate(odom):
            nodes_init.append(StateNode(nodes_gt[k + 1].timestamp,
                                        nodes_init[-1].pose.compose(f.relative)))

        gnss_idx = sorted(set(range(0, n_nodes, spec.gnss_every)) | {n_nodes - 1})
        gnss = [GnssFactor(k, nodes_gt[k].pose.t + rng.standard_normal(3) * spec.gnss_sigma,
                           max(spec.gnss_sigma, 0.1)) for k in gnss_idx]

        images = []
        clip_tracks = {}
        # stop image frames one node early so per-camera shutter offsets stay
        # inside the trajectory span (no clamped interpolation at the tail)
        for k in range(0, n_nodes - 1, spec.image_every):
            for cn, name in enumerate(cam_names):
                t_img = nodes_gt[k].timestamp + cn * spec.camera_time_offset
                # exact vehicle pose at the shutter time (clips are straight lines)
                veh = _vehicle_pose(road, s_at(float(t_img)), clip.lane_offset,
                                    clip.reverse, elev)
                cam_pose = veh.compose(in_vehicle[name])
                image_id = f"{clip.clip_id}_{k:04d}_{name}"
                images.append(ImageMeta(image_id, t_img, name, clip.clip_id))
                cam = Camera(cam_pose, intrinsics[name])
                gt_cameras[image_id] = cam

                R = cam_pose.rotation()
                p_cam = (points - cam_pose.t) @ R
                z = p_cam[:, 2]
                near, far = spec.visibility_range
                intr_u = intrinsics[name]
                m = spec.pixel_margin
                cand = np.flatnonzero((z > near) & (z < far))
                uu = intr_u.fx * p_cam[cand, 0] / z[cand] + intr_u.cx
                vv = intr_u.fy * p_cam[cand, 1] / z[cand] + intr_u.cy
                in_img = ((uu >= m) & (uu < intr_u.width - m)
                          & (vv >= m) & (vv < intr_u.height - m))
                gids = cand[in_img]
                image_visible[image_id] = gids
                if gids.size == 0:
                    continue
                px = np.stack([uu[in_img], vv[in_img]], axis=1)
                px = px + rng.standard_normal(px.shape) * spec.pixel_sigma
                if spec.outlier_fraction > 0:
                    bad = rng.random(len(gids)) < spec.outlier_fraction
                    n_bad = int(bad.sum())
                    if n_bad:
                        px[bad, 0] = rng.uniform(m, intr_u.width - m, n_bad)
                        px[bad, 1] = rng.uniform(m, intr_u.height - m, n_bad)
                else:
                    bad = np.zeros(len(gids), dtype=bool)
                for g, pix, is_bad in zip(gids, px, bad):
                    tid = ci * 1_000_000 + int(g)
                    clip_tracks.setdefault(tid, []).append(
                        Observation(image_id, tid, pix))
                    if is_bad:
                        outlier_labels.add((tid, image_id))

        tracks = []
        for tid in sorted(clip_tracks):
            obs = clip_tracks[tid]
            if len(obs) >= spec.min_track_length:
                tracks.append(Track(tid, obs))
                track_classes[tid] = classes[tid % 1_000_000]
                global_tracks.setdefault(tid % 1_000_000, []).append(tid)
            else:
                for o in obs:
                    outlier_labels.discard((tid, o.image_id))
        clips.append(ClipBundle(clip.clip_id, nodes_gt, nodes_init, odom, gnss,
                                images, tracks))

    cross_tracks = [tids for gid, tids in sorted(global_tracks.items())
                    if len(tids) >= 2]

    masks = {}
    eval_frames = []
    if spec.render_masks:
        lo, hi = spec.eval_node_range
        for ci, cb in enumerate(clips):
            span = max(cb.nodes_gt[-1].timestamp - cb.nodes_gt[0].timestamp, 1e-9)
            for meta in cb.images:
                frac = (meta.timestamp - cb.nodes_gt[0].timestamp) / span
                if meta.camera_name in spec.mask_cameras and lo <= frac <= hi:
                    m = render_instance_masks(gt_cameras[meta.image_id], spec, vmap)
                    if m:
                        masks[meta.image_id] = m
                        eval_frames.append(meta.image_id)

    semantic_images = {}
    photo_images = {}
    if spec.render_images:
        for cb in clips:
            for meta in cb.images:
                sem = render_semantic_image(gt_cameras[meta.image_id], spec, elev)
                semantic_images[meta.image_id] = sem
                photo_images[meta.image_id] = photo_from_semantic(sem)

    covis = None
    if spec.covisibility:
        covis = compute_covisible_pairs(image_visible, spec.covis_min_shared)

    return SceneBundle(spec=spec, rig=rig, intrinsics=intrinsics, clips=clips,
                       gt_cameras=gt_cameras, track_classes=track_classes,
                       cross_tracks=cross_tracks, outlier_labels=outlier_labels,
                       vector_map=vmap, masks=masks, semantic_images=semantic_images,
                       photo_images=photo_images, eval_frames=sorted(eval_frames),
                       gt_points={g: points[g] for g in range(len(points))},
                       covisible_pairs=covis)


def compute_covisible_pairs(image_visible: dict, min_shared: int) -> set:
    """Unordered image pairs sharing at least ``min_shared`` visible points."""
    from scipy import sparse

    ids = sorted(image_visible)
    rows, cols = [], []
    for r, iid in enumerate(ids):
        for g in image_visible[iid]:
            rows.append(r)
            cols.append(int(g))
    if not rows:
        return set()
    n_pts = max(cols) + 1
    M = sparse.csr_matrix((np.ones(len(rows), dtype=np.int32), (rows, cols)),
                          shape=(len(ids), n_pts))
    C = (M @ M.T).tocoo()
    out = set()
    for r, c, v in zip(C.row, C.col, C.data):
        if r < c and v >= min_shared:
            out.add((ids[r], ids[c]))
    return out


# ---------------------------------------------------------------------------
# canned specs
# ---------------------------------------------------------------------------


def save_bundle(bundle: SceneBundle, out_dir):
    """Write every bundle artifact in the pipeline's file formats.

    Generated data is indistinguishable from ingested data: the stages read
    these files with the same loaders they use for real logs.
    """
    from pathlib import Path

    from . import io as dio

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dio.write_json(out / "scene.json", bundle.spec.to_dict())
    dio.write_rig(out / "rig.json", bundle.rig, bundle.intrinsics)
    dio.write_vector_map(out / "map_gt.json", bundle.vector_map)
    dio.write_json(out / "eval_config.json",
                   {"crop": list(bundle.spec.eval_crop),
                    "gate_px": bundle.spec.match_gate_px})
    dio.write_cross_tracks(out / "cross_tracks.txt", bundle.cross_tracks)
    dio.write_outlier_labels(out / "outliers.txt", bundle.outlier_labels)
    dio.write_track_classes(out / "track_classes.txt", bundle.track_classes)
    Path(out / "eval_frames.txt").write_text(
        "".join(f"{i}\n" for i in bundle.eval_frames))
    for cb in bundle.clips:
        cdir = out / "clips" / cb.clip_id
        cdir.mkdir(parents=True, exist_ok=True)
        dio.write_trajectory(cdir / "trajectory_gt.txt", cb.nodes_gt)
        dio.write_trajectory(cdir / "trajectory_init.txt", cb.nodes_init)
        dio.write_odometry_factors(cdir / "odometry.txt", cb.odom_factors)
        dio.write_gnss_factors(cdir / "gnss.txt", cb.gnss_factors)
        dio.write_image_index(cdir / "images.txt", cb.images)
        dio.write_tracks(cdir / "tracks.txt", cb.tracks)
    if bundle.masks:
        (out / "masks").mkdir(exist_ok=True)
        for iid in sorted(bundle.masks):
            for cls, raster in sorted(bundle.masks[iid].items()):
                dio.write_pgm(out / "masks" / f"{iid}__{cls}.pgm", raster)
    if bundle.semantic_images:
        (out / "semantic").mkdir(exist_ok=True)
        (out / "photo").mkdir(exist_ok=True)
        for iid in sorted(bundle.semantic_images):
            dio.write_pgm(out / "semantic" / f"{iid}.pgm", bundle.semantic_images[iid])
            dio.write_ppm(out / "photo" / f"{iid}.ppm", bundle.photo_images[iid])
    if bundle.covisible_pairs is not None:
        dio.write_pairs(out / "covisible_pairs.txt", bundle.covisible_pairs)
    rows = ["# gid x y z"]
    for g in sorted(bundle.gt_points):
        p = bundle.gt_points[g]
        rows.append(f"{g} {float(p[0])!r} {float(p[1])!r} {float(p[2])!r}")
    Path(out / "points_gt.txt").write_text("\n".join(rows) + "\n")
    # ground-truth camera poses, for tests and GT-based evaluation runs
    gt_model_cams = {iid: cam for iid, cam in bundle.gt_cameras.items()}
    from .sfm import ReconstructionModel
    stamps = {m.image_id: m.timestamp for cb in bundle.clips for m in cb.images}
    dio.write_model(out / "cameras_gt.txt",
                    ReconstructionModel(cameras=gt_model_cams), stamps)


def load_bundle(out_dir) -> SceneBundle:
    """Read a bundle saved by :func:`save_bundle`."""
    from pathlib import Path

    from . import io as dio

    out = Path(out_dir)
    spec = SceneSpec.from_dict(dio.read_json(out / "scene.json"))
    rig, intrinsics = dio.read_rig(out / "rig.json")
    vmap = dio.read_vector_map(out / "map_gt.json")
    cross = dio.read_cross_tracks(out / "cross_tracks.txt")
    outliers = dio.read_outlier_labels(out / "outliers.txt")
    classes = {t: SemanticClass(c)
               for t, c in dio.read_track_classes(out / "track_classes.txt").items()}
    eval_frames = [l.strip() for l in (out / "eval_frames.txt").read_text().splitlines()
                   if l.strip()]
    clips = []
    for cdir in sorted((out / "clips").iterdir()):
        nodes_gt, _ = dio.read_trajectory(cdir / "trajectory_gt.txt")
        nodes_init, _ = dio.read_trajectory(cdir / "trajectory_init.txt")
        clips.append(ClipBundle(
            clip_id=cdir.name, nodes_gt=nodes_gt, nodes_init=nodes_init,
            odom_factors=dio.read_odometry_factors(cdir / "odometry.txt"),
            gnss_factors=dio.read_gnss_factors(cdir / "gnss.txt"),
            images=dio.read_image_index(cdir / "images.txt"),
            tracks=dio.read_tracks(cdir / "tracks.txt")))
    poses, stamps, _ = dio.read_model(out / "cameras_gt.txt")
    name_of = {m.image_id: m.camera_name for cb in clips for m in cb.images}
    gt_cameras = {iid: Camera(p, intrinsics[name_of[iid]]) for iid, p in poses.items()}
    masks = {}
    if (out / "masks").is_dir():
        for f in sorted((out / "masks").glob("*.pgm")):
            iid, cls = f.stem.rsplit("__", 1)
            masks.setdefault(iid, {})[cls] = dio.read_pgm(f).astype(int)
    semantic_images = {}
    photo_images = {}
    if (out / "semantic").is_dir():
        for f in sorted((out / "semantic").glob("*.pgm")):
            semantic_images[f.stem] = dio.read_pgm(f)
            photo_images[f.stem] = dio.read_ppm(out / "photo" / f"{f.stem}.ppm")
    covis = None
    if (out / "covisible_pairs.txt").exists():
        covis = dio.read_pairs(out / "covisible_pairs.txt")
    gt_points = {}
    if (out / "points_gt.txt").exists():
        for tok in (l.split() for l in (out / "points_gt.txt").read_text().splitlines()
                    if l.strip() and not l.startswith("#")):
            gt_points[int(tok[0])] = np.array([float(tok[1]), float(tok[2]), float(tok[3])])
    return SceneBundle(spec=spec, rig=rig, intrinsics=intrinsics, clips=clips,
                       gt_cameras=gt_cameras, track_classes=classes,
                       cross_tracks=cross, outlier_labels=outliers, vector_map=vmap,
                       masks=masks, semantic_images=semantic_images,
                       photo_images=photo_images, eval_frames=eval_frames,
                       gt_points=gt_points, covisible_pairs=covis)


def default_scene_spec(seed: int = 0, **overrides) -> SceneSpec:
    """Two same-direction clips on adjacent lanes of one flat road."""
    spec = SceneSpec(seed=seed)
    for k, v in overrides.items():
        setattr(spec, k, v)
    return spec


def noisy_scene_spec(seed: int = 0, **overrides) -> SceneSpec:
    spec = default_scene_spec(seed=seed, odom_drift=0.01, odom_rot_sigma=0.002,
                              gnss_sigma=0.5, pixel_sigma=0.5, outlier_fraction=0.05)
    for k, v in overrides.items():
        setattr(spec, k, v)
    return spec


def site_scene_spec(seed: int = 0, n_clip_pairs: int = 4, **overrides) -> SceneSpec:
    """Eight clips over four roads crossing one intersection (pairing-scale)."""
    roads = []
    clips = []
    for k in range(n_clip_pairs):
        ang = 180.0 * k / n_clip_pairs
        h = math.radians(ang)
        half = 120.0
        start = (-half * math.cos(h), -half * math.sin(h))
        roads.append(RoadSpec(start=start, heading_deg=ang, length=2 * half))
        clips.append(ClipSpec(f"clip_{2 * k:02d}", k, -3.6, 15.0, 2 * half - 15.0))
        clips.append(ClipSpec(f"clip_{2 * k + 1:02d}", k, 3.6, 15.0, 2 * half - 15.0,
                              reverse=True))
    spec = SceneSpec(roads=roads, clips=clips, seed=seed,
                     image_every=3, n_ground_points=6000,
                     render_masks=False, render_images=False,
                     covisibility=True)
    for k, v in overrides.items():
        setattr(spec, k, v)
    return spec
