"""Rigid-body transforms, pinhole projection, and ground-plane footprints.

Conventions used everywhere in this package:

- World frame: right-handed, z up, meters.
- A ``Pose`` is the pose of a body in a parent frame: it maps body-frame
  points into the parent frame via ``p_parent = R(q) @ p_body + t``.
- Quaternions are stored as ``(x, y, z, w)``, Hamilton convention, and are
  normalized on construction.
- Camera frame: x right, y down, z forward along the optical axis.  A camera
  pose is camera-to-world, so ``pose.t`` is the camera center.
- Images are rectified; projection uses the pinhole model only, no
  distortion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CheiralityError, NoFootprintError

# ---------------------------------------------------------------------------
# quaternion utilities (x, y, z, w)
# ---------------------------------------------------------------------------


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ValueError("zero-norm quaternion")
    if abs(n - 1.0) < 1e-12:  # already unit: keep bytes stable across round-trips
        return q.copy()
    return q / n


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product a*b for (x,y,z,w) quaternions."""
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array([
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    ])


def quat_conjugate(q) -> np.ndarray:
    return np.array([-q[0], -q[1], -q[2], q[3]])


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion (maps body to parent frame)."""
    x, y, z, w = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R) -> np.ndarray:
    """Unit quaternion (x,y,z,w) of a rotation matrix (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = math.sqrt(tr + 1.0) * 2.0
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    return quat_normalize([x, y, z, w])


def rotvec_to_quat(v) -> np.ndarray:
    """Axis-angle vector (radians) to quaternion; small angles are safe."""
    v = np.asarray(v, dtype=float)
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        return quat_normalize(np.array([0.5 * v[0], 0.5 * v[1], 0.5 * v[2], 1.0]))
    axis = v / angle
    s = math.sin(0.5 * angle)
    return np.array([axis[0] * s, axis[1] * s, axis[2] * s, math.cos(0.5 * angle)])


def quat_to_rotvec(q) -> np.ndarray:
    """Axis-angle vector of a unit quaternion; shortest rotation."""
    x, y, z, w = q
    if w < 0.0:  # pick the representative with w >= 0 for the short arc
        x, y, z, w = -x, -y, -z, -w
    n = math.sqrt(x * x + y * y + z * z)
    if n < 1e-12:
        return 2.0 * np.array([x, y, z])
    angle = 2.0 * math.atan2(n, w)
    return np.array([x, y, z]) * (angle / n)


def quat_slerp(qa, qb, u: float) -> np.ndarray:
    """Spherical linear interpolation between unit quaternions, u in [0,1]."""
    qa = np.asarray(qa, dtype=float)
    qb = np.asarray(qb, dtype=float)
    dot = float(np.dot(qa, qb))
    if dot < 0.0:
        qb = -qb
        dot = -dot
    if dot > 1.0 - 1e-12:
        return quat_normalize(qa + u * (qb - qa))
    theta = math.acos(min(1.0, dot))
    s = math.sin(theta)
    return quat_normalize(qa * (math.sin((1.0 - u) * theta) / s)
                          + qb * (math.sin(u * theta) / s))


def so3_hat(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(v) -> np.ndarray:
    """Rotation matrix of an axis-angle vector (Rodrigues)."""
    v = np.asarray(v, dtype=float)
    angle = np.linalg.norm(v)
    K = so3_hat(v)
    if angle < 1e-8:
        return np.eye(3) + K + 0.5 * (K @ K)
    K = K / angle
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


def so3_log(R) -> np.ndarray:
    """Axis-angle vector of a rotation matrix."""
    return quat_to_rotvec(matrix_to_quat(R))


def so3_right_jacobian_inverse(phi) -> np.ndarray:
    """Inverse right Jacobian of SO(3) at axis-angle phi.

    Needed to express how a tangent-space rotation residual changes under a
    local perturbation of its argument.
    """
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi)
    K = so3_hat(phi)
    if angle < 1e-6:
        return np.eye(3) + 0.5 * K + (1.0 / 12.0) * (K @ K)
    coeff = 1.0 / (angle * angle) - (1.0 + math.cos(angle)) / (2.0 * angle * math.sin(angle))
    return np.eye(3) + 0.5 * K + coeff * (K @ K)


# ---------------------------------------------------------------------------
# rigid transforms
# ---------------------------------------------------------------------------


@dataclass
class Pose:
    """Rigid transform: position ``t`` (meters) and unit quaternion ``q`` (x,y,z,w).

    Treated as immutable after construction (every operation returns a new
    Pose); the rotation matrix is cached on first use.
    """

    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    _rot: np.ndarray = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(3).copy()
        self.q = quat_normalize(np.asarray(self.q, dtype=float).reshape(4))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_rt(cls, R, t) -> "Pose":
        return cls(t=np.asarray(t, dtype=float), q=matrix_to_quat(R))

    def rotation(self) -> np.ndarray:
        if self._rot is None:
            self._rot = quat_to_matrix(self.q)
        return self._rot

    def apply(self, p) -> np.ndarray:
        """Transform point(s) from this pose's frame into the parent frame."""
        p = np.asarray(p, dtype=float)
        return p @ self.rotation().T + self.t

    def compose(self, other: "Pose") -> "Pose":
        """self then other: the result maps other's frame into self's parent frame."""
        return Pose(t=self.apply(other.t), q=quat_multiply(self.q, other.q))

    def inverse(self) -> "Pose":
        q_inv = quat_conjugate(self.q)
        return Pose(t=-(quat_to_matrix(q_inv) @ self.t), q=q_inv)

    def copy(self) -> "Pose":
        return Pose(t=self.t.copy(), q=self.q.copy())


def se3_apply(pose: Pose, p) -> np.ndarray:
    """R(q) @ p + t for a single point or an (N,3) array."""
    return pose.apply(p)


def se3_compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def se3_inverse(pose: Pose) -> Pose:
    return pose.inverse()


# ---------------------------------------------------------------------------
# pinhole camera
# ---------------------------------------------------------------------------


@dataclass
class CameraIntrinsics:
    """Pinhole intrinsics of a rectified camera, all in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ValueError("principal point outside image")


def project(cam: CameraIntrinsics, p_cam) -> np.ndarray:
    """Project a camera-frame point to pixel coordinates.

    Raises CheiralityError when the point is at or behind the camera plane.
    """
    p_cam = np.asarray(p_cam, dtype=float)
    if p_cam.ndim == 1:
        if p_cam[2] <= 0.0:
            raise CheiralityError(f"point depth {p_cam[2]:.6g} <= 0")
        return np.array([cam.fx * p_cam[0] / p_cam[2] + cam.cx,
                         cam.fy * p_cam[1] / p_cam[2] + cam.cy])
    if np.any(p_cam[:, 2] <= 0.0):
        raise CheiralityError("point(s) with non-positive depth")
    uv = np.empty((p_cam.shape[0], 2))
    uv[:, 0] = cam.fx * p_cam[:, 0] / p_cam[:, 2] + cam.cx
    uv[:, 1] = cam.fy * p_cam[:, 1] / p_cam[:, 2] + cam.cy
    return uv


def project_array(cam: CameraIntrinsics, p_cam: np.ndarray):
    """Vectorized projection that masks instead of raising.

    Returns (uv (N,2), depth (N,)); uv rows with depth <= 0 are NaN.
    """
    p_cam = np.asarray(p_cam, dtype=float)
    depth = p_cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([cam.fx * p_cam[:, 0] / depth + cam.cx,
                       cam.fy * p_cam[:, 1] / depth + cam.cy], axis=1)
    uv[depth <= 0.0] = np.nan
    return uv, depth


def back_project(cam: CameraIntrinsics, pixel) -> np.ndarray:
    """Camera-frame ray direction (x, y, 1) through a pixel."""
    u, v = pixel
    return np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])


def optical_axis(pose: Pose) -> np.ndarray:
    """World-frame unit vector along the camera's optical (+z) axis."""
    return pose.rotation()[:, 2]


# ---------------------------------------------------------------------------
# rig calibration
# ---------------------------------------------------------------------------


@dataclass
class RigCalibration:
    """Fixed camera-in-body transforms for a multi-camera rig.

    ``camera_in_body[name]`` maps camera-frame points to the body frame; the
    world pose of a camera is ``body_pose.compose(camera_in_body[name])``.
    The reference camera's transform is the identity, i.e. the body frame is
    the reference camera frame.
    """

    camera_in_body: dict
    reference: str

    def __post_init__(self):
        if self.reference not in self.camera_in_body:
            raise ValueError(f"reference camera {self.reference!r} not in rig")
        ref = self.camera_in_body[self.reference]
        if np.linalg.norm(ref.t) > 1e-9 or abs(abs(ref.q[3]) - 1.0) > 1e-9:
            raise ValueError("reference camera transform must be identity")

    def camera_pose(self, body_pose: Pose, name: str) -> Pose:
        return body_pose.compose(self.camera_in_body[name])


# ---------------------------------------------------------------------------
# ground-plane polygons
# ---------------------------------------------------------------------------


@dataclass
class GroundPolygon:
    """Simple polygon on the z = const ground plane, vertices in meters."""

    vertices: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 2)
        if self.vertices.shape[0] < 3:
            raise ValueError("polygon needs at least 3 vertices")

    def area(self) -> float:
        x = self.vertices[:, 0]
        y = self.vertices[:, 1]
        return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of `subject` against convex `clip` (CCW)."""
    output = list(subject)
    n = len(clip)
    for i in range(n):
        a = clip[i]
        b = clip[(i + 1) % n]
        edge = b - a
        if not output:
            break
        inputs = output
        output = []
        prev = inputs[-1]
        prev_in = edge[0] * (prev[1] - a[1]) - edge[1] * (prev[0] - a[0]) >= 0.0
        for cur in inputs:
            cur_in = edge[0] * (cur[1] - a[1]) - edge[1] * (cur[0] - a[0]) >= 0.0
            if cur_in != prev_in:
                d = cur - prev
                denom = edge[0] * d[1] - edge[1] * d[0]
                if abs(denom) > 1e-15:
                    s = (edge[1] * (prev[0] - a[0]) - edge[0] * (prev[1] - a[1])) / denom
                    output.append(prev + s * d)
            if cur_in:
                output.append(cur)
            prev, prev_in = cur, cur_in
    return np.asarray(output).reshape(-1, 2)


def _ccw_order(points: np.ndarray) -> np.ndarray:
    centroid = points.mean(axis=0)
    ang = np.arctan2(points[:, 1] - centroid[1], points[:, 0] - centroid[0])
    return points[np.argsort(ang, kind="stable")]


def polygon_iou(a: GroundPolygon, b: GroundPolygon) -> float:
    """Intersection-over-union of two (convex) ground polygons."""
    pa = _ccw_order(a.vertices)
    pb = _ccw_order(b.vertices)
    inter = _clip_polygon(pa, pb)
    if inter.shape[0] < 3:
        return 0.0
    ia = GroundPolygon(inter).area()
    ua = GroundPolygon(pa).area() + GroundPolygon(pb).area() - ia
    if ua <= 0.0:
        return 0.0
    return float(ia / ua)


def ground_footprint(cam_pose: Pose, cam: CameraIntrinsics, ground_z: float,
                     max_range: float = 100.0) -> GroundPolygon:
    """Quadrilateral where the four image-corner rays meet the ground plane.

    Rays that run parallel to or away from the plane are clamped at
    ``max_range`` along their horizontal direction.  Raises NoFootprintError
    when every corner ray points away from the plane.
    """
    center = cam_pose.t
    if center[2] <= ground_z:
        raise ValueError("camera must be above the ground plane")
    R = cam_pose.rotation()
    corners = [(0.0, 0.0), (cam.width, 0.0), (cam.width, cam.height), (0.0, cam.height)]
    pts = []
    hits = 0
    axis_xy = R[:2, 2]
    for (u, v) in corners:
        d = R @ back_project(cam, (u, v))
        rel = ground_z - center[2]  # negative: plane below camera
        hit = d[2] < -1e-12 and rel / d[2] > 0.0
        if hit:
            s = rel / d[2]
            p = center + s * d
            horiz = p[:2] - center[:2]
            dist = np.linalg.norm(horiz)
            if dist > max_range:
                p = np.concatenate([center[:2] + horiz * (max_range / dist), [ground_z]])
            hits += 1
            pts.append(p[:2])
        else:
            horiz = d[:2]
            n = np.linalg.norm(horiz)
            if n < 1e-12:
                horiz = axis_xy
                n = np.linalg.norm(horiz)
                if n < 1e-12:
                    continue  # camera looking straight up/down: skip corner
            pts.append(center[:2] + horiz * (max_range / n))
    if hits == 0:
        raise NoFootprintError("all corner rays point away from the ground plane")
    if len(pts) < 3:
        raise NoFootprintError("fewer than 3 usable corner rays")
    return GroundPolygon(np.asarray(pts))
