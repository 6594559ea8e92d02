"""Dense road-surface reconstruction: semantic surface points, grid meshing
over the elevation field, per-vertex semantic/photometric painting from
camera views, and bird's-eye-view rasterization."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from scipy.spatial import cKDTree

from .elevation import ElevationField
from .errors import EmptySurfaceError, NoCameraError


class SemanticClass(IntEnum):
    """Closed surface class set; 0 is reserved for background in rasters."""

    ROAD_SURFACE = 1
    LANE_MARKING = 2
    ROAD_TEETH = 3
    OTHER = 4


ROAD_CLASSES = (SemanticClass.ROAD_SURFACE, SemanticClass.LANE_MARKING,
                SemanticClass.ROAD_TEETH)


@dataclass
class SemanticPoint:
    position: np.ndarray
    class_id: SemanticClass

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.class_id = SemanticClass(self.class_id)


def init_surface_points(model, semantics, traj, corridor_half_width: float = 2.0,
                        min_density: float = 1.0, spacing: float = 1.0,
                        ground_offset: float = 0.0):
    """Collect road-class landmarks, padding with an ego corridor when sparse.

    ``semantics`` maps track id to SemanticClass for the model's landmarks.
    When the landmark density over the driven corridor drops below
    ``min_density`` points per square meter, synthetic points are laid out on
    a corridor grid at vehicle ground height along the trajectory;
    ``ground_offset`` shifts the trajectory height down to the ground when
    the reference frame rides above it (camera-anchored rigs).
    """
    points = []
    if model is not None:
        for tid, pos in sorted(model.landmarks.items()):
            cls = semantics.get(tid) if semantics else None
            if cls is not None and SemanticClass(cls) in ROAD_CLASSES:
                points.append(SemanticPoint(pos, SemanticClass(cls)))

    nodes = []
    if traj is not None:
        nodes = traj.nodes if hasattr(traj, "nodes") else list(traj)
    if not points and not nodes:
        raise EmptySurfaceError("no road-class landmarks and no trajectory")

    if nodes:
        positions = np.stack([n.pose.t for n in nodes])
        seg = np.diff(positions[:, :2], axis=0)
        seg_len = np.linalg.norm(seg, axis=1)
        path_length = float(seg_len.sum())
        area = max(path_length * 2.0 * corridor_half_width, 1e-9)
        if len(points) / area < min_density and path_length > 0:
            lateral = np.arange(-corridor_half_width, corridor_half_width + 1e-9, 0.5)
            cum = np.concatenate([[0.0], np.cumsum(seg_len)])
            for s in np.arange(0.0, path_length + 1e-9, spacing):
                k = min(int(np.searchsorted(cum, s, side="right")) - 1, len(seg) - 1)
                u = 0.0 if seg_len[k] == 0 else (s - cum[k]) / seg_len[k]
                base = positions[k] + u * (positions[k + 1] - positions[k])
                d = seg[k] / max(seg_len[k], 1e-12)
                left = np.array([-d[1], d[0]])
                for off in lateral:
                    p = np.array([base[0] + off * left[0], base[1] + off * left[1],
                                  base[2] + ground_offset])
                    points.append(SemanticPoint(p, SemanticClass.ROAD_SURFACE))
    if not points:
        raise EmptySurfaceError("no surface points could be produced")
    return points


# ---------------------------------------------------------------------------
# mesh painting
# ---------------------------------------------------------------------------


@dataclass
class RoadMesh:
    """Regular-grid road mesh with per-vertex paint accumulators.

    ``votes[:, k]`` counts observations of class k+1; votes sum to the
    observation count per vertex.  ``colors`` holds summed RGB; divide by
    ``counts`` for the mean.
    """

    vertices: np.ndarray          # (V,3)
    faces: np.ndarray             # (F,3) int
    votes: np.ndarray             # (V,4)
    colors: np.ndarray            # (V,3) accumulated
    counts: np.ndarray            # (V,)
    grid_shape: tuple             # (ny, nx)
    origin: np.ndarray            # (2,) position of vertex (0,0)
    resolution: float

    def vertex_classes(self) -> np.ndarray:
        """Majority class per vertex (1..4); 0 where never observed.

        np.argmax takes the first maximum, so ties go to ROAD_SURFACE first
        per the class ordering.
        """
        cls = np.argmax(self.votes, axis=1) + 1
        cls[self.counts == 0] = 0
        return cls.astype(np.uint8)

    def class_fraction(self, class_id: int) -> np.ndarray:
        """Fraction of observations voting for one class, per vertex."""
        out = np.zeros(len(self.vertices))
        seen = self.counts > 0
        out[seen] = self.votes[seen, int(class_id) - 1] / self.counts[seen]
        return out

    def mean_colors(self) -> np.ndarray:
        out = np.zeros_like(self.colors)
        seen = self.counts > 0
        out[seen] = self.colors[seen] / self.counts[seen, None]
        return out


def _snapped_grid(bounds, resolution):
    """Grid aligned to multiples of the resolution, kept inside the bounds."""
    x_min, x_max, y_min, y_max = bounds
    x0 = np.ceil(x_min / resolution - 1e-9) * resolution
    y0 = np.ceil(y_min / resolution - 1e-9) * resolution
    nx = max(int(np.floor((x_max - x0) / resolution + 1e-9)) + 1, 1)
    ny = max(int(np.floor((y_max - y0) / resolution + 1e-9)) + 1, 1)
    xs = x0 + resolution * np.arange(nx)
    ys = y0 + resolution * np.arange(ny)
    return xs, ys, np.array([x0, y0])


def build_and_paint_mesh(elev: ElevationField, cameras, semantic_masks,
                         photometric_images, grid_resolution: float = 0.1,
                         training_points=None, refine_iterations: int = 200,
                         bounds_margin: float = 0.0,
                         max_paint_depth: float | None = None) -> RoadMesh:
    """Grid mesh over the field bounds, painted by projecting every vertex
    into every camera.

    A vertex that projects inside an image with positive depth gains one
    observation, one class vote from the semantic mask, and the image color.
    The grid is snapped to multiples of the resolution so cells are stable
    across runs; ``bounds_margin`` extends it past the field bounds so paint
    bands near the data edge are not truncated.  ``max_paint_depth`` skips
    observations beyond that camera distance (far grazing views smear mask
    pixels over meters of ground); leave it None for the plain
    every-visible-vertex count.  When ``training_points`` is given the
    elevation field is refined once on the points that land in the observed
    region, and the mesh is rebuilt and repainted against the refined field.
    """
    cameras = list(cameras)
    if not cameras:
        raise NoCameraError("painting needs at least one camera")
    if len(semantic_masks) != len(cameras) or len(photometric_images) != len(cameras):
        raise ValueError("cameras, masks and images must align")
    x_min, x_max, y_min, y_max = elev.bounds
    grid_bounds = (x_min - bounds_margin, x_max + bounds_margin,
                   y_min - bounds_margin, y_max + bounds_margin)

    def paint():
        xs, ys, origin = _snapped_grid(grid_bounds, grid_resolution)
        gx, gy = np.meshgrid(xs, ys)
        xy = np.stack([gx.ravel(), gy.ravel()], axis=1)
        z = elev.predict(xy)
        vertices = np.column_stack([xy, z])
        ny, nx = len(ys), len(xs)
        idx = np.arange(ny * nx).reshape(ny, nx)
        faces = np.concatenate([
            np.stack([idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel(), idx[1:, :-1].ravel()], axis=1),
            np.stack([idx[1:, :-1].ravel(), idx[:-1, 1:].ravel(), idx[1:, 1:].ravel()], axis=1),
        ])
        votes = np.zeros((len(vertices), 4), dtype=np.int64)
        colors = np.zeros((len(vertices), 3))
        counts = np.zeros(len(vertices), dtype=np.int64)
        for cam, sem, photo in zip(cameras, semantic_masks, photometric_images):
            intr = cam.intrinsics
            R = cam.pose.rotation()
            p_cam = (vertices - cam.pose.t) @ R
            zc = p_cam[:, 2]
            front = zc > 1e-9
            if max_paint_depth is not None:
                front &= zc <= max_paint_depth
            u = np.empty(len(vertices))
            v = np.empty(len(vertices))
            u[front] = intr.fx * p_cam[front, 0] / zc[front] + intr.cx
            v[front] = intr.fy * p_cam[front, 1] / zc[front] + intr.cy
            vis = front.copy()
            vis[front] &= (u[front] >= 0) & (u[front] < intr.width) \
                & (v[front] >= 0) & (v[front] < intr.height)
            if not np.any(vis):
                continue
            iu = np.floor(u[vis]).astype(int)
            iv = np.floor(v[vis]).astype(int)
            cls = np.asarray(sem)[iv, iu].astype(int)
            cls = np.where((cls >= 1) & (cls <= 4), cls, int(SemanticClass.OTHER))
            vidx = np.flatnonzero(vis)
            np.add.at(votes, (vidx, cls - 1), 1)
            colors[vidx] += np.asarray(photo, dtype=float)[iv, iu].reshape(len(vidx), -1)[:, :3]
            counts[vidx] += 1
        return RoadMesh(vertices, faces, votes, colors, counts,
                        (ny, nx), origin, grid_resolution)

    mesh = paint()
    if training_points is not None and refine_iterations > 0:
        pts = training_points
        arr = pts if hasattr(pts, "shape") else np.stack(
            [np.asarray(p.position, dtype=float) for p in pts])
        observed = mesh.counts > 0
        if np.any(observed):
            tree = cKDTree(mesh.vertices[observed, :2])
            dist, _ = tree.query(arr[:, :2])
            near = arr[dist <= 2.0 * grid_resolution]
            if len(near) >= 10:
                elev.refine(near, iterations=refine_iterations)
                mesh = paint()
    return mesh


# ---------------------------------------------------------------------------
# BEV rasters
# ---------------------------------------------------------------------------


@dataclass
class BevRaster:
    """Top-down raster; cell (row, col) center sits at origin + (col, row)*resolution."""

    origin: np.ndarray
    resolution: float
    values: np.ndarray
    channel: str = ""

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float).reshape(2)
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")

    def cell_centers(self):
        h, w = self.values.shape[:2]
        xs = self.origin[0] + self.resolution * np.arange(w)
        ys = self.origin[1] + self.resolution * np.arange(h)
        return xs, ys

    def to_meters(self, cols, rows):
        return (self.origin[0] + self.resolution * np.asarray(cols, dtype=float),
                self.origin[1] + self.resolution * np.asarray(rows, dtype=float))


def export_bev(mesh: RoadMesh, resolution: float):
    """Nearest-vertex rasterization of the painted mesh.

    Returns (semantic, photometric, elevation) rasters; cells with no vertex
    within ``resolution`` hold the background value 0.  Purely a function of
    the mesh, so re-running is bit-identical.
    """
    if mesh.vertices.size == 0:
        raise ValueError("empty mesh")
    xs, ys, origin = _snapped_grid((mesh.vertices[:, 0].min(), mesh.vertices[:, 0].max(),
                                    mesh.vertices[:, 1].min(), mesh.vertices[:, 1].max()),
                                   resolution)
    gx, gy = np.meshgrid(xs, ys)
    centers = np.stack([gx.ravel(), gy.ravel()], axis=1)
    tree = cKDTree(mesh.vertices[:, :2])
    dist, nearest = tree.query(centers, distance_upper_bound=resolution + 1e-12)
    valid = np.isfinite(dist)
    nearest = np.where(valid, nearest, 0)

    classes = mesh.vertex_classes()
    sem = np.zeros(len(centers), dtype=np.uint8)
    sem[valid] = classes[nearest[valid]]
    photo = np.zeros((len(centers), 3))
    photo[valid] = mesh.mean_colors()[nearest[valid]]
    elev_vals = np.zeros(len(centers))
    elev_vals[valid] = mesh.vertices[nearest[valid], 2]

    shape = (len(ys), len(xs))
    return (BevRaster(origin, resolution, sem.reshape(shape), "semantic"),
            BevRaster(origin, resolution, photo.reshape(shape + (3,)), "photometric"),
            BevRaster(origin, resolution, elev_vals.reshape(shape), "elevation"))


def export_observation_count(mesh: RoadMesh, resolution: float) -> BevRaster:
    """Nearest-vertex raster of per-vertex observation counts."""
    if mesh.vertices.size == 0:
        raise ValueError("empty mesh")
    xs, ys, origin = _snapped_grid((mesh.vertices[:, 0].min(), mesh.vertices[:, 0].max(),
                                    mesh.vertices[:, 1].min(), mesh.vertices[:, 1].max()),
                                   resolution)
    gx, gy = np.meshgrid(xs, ys)
    centers = np.stack([gx.ravel(), gy.ravel()], axis=1)
    tree = cKDTree(mesh.vertices[:, :2])
    dist, nearest = tree.query(centers, distance_upper_bound=resolution + 1e-12)
    valid = np.isfinite(dist)
    nearest = np.where(valid, nearest, 0)
    counts = np.zeros(len(centers), dtype=np.int64)
    counts[valid] = mesh.counts[nearest[valid]]
    return BevRaster(origin, resolution, counts.reshape(len(ys), len(xs)), "counts")


def export_class_fraction(mesh: RoadMesh, resolution: float, class_id: int) -> BevRaster:
    """Nearest-vertex raster of one class's vote fraction (values in [0, 1]).

    A continuous companion to the argmax semantic raster: polyline extraction
    uses it to recover the sub-cell lateral position of painted bands.
    """
    if mesh.vertices.size == 0:
        raise ValueError("empty mesh")
    xs, ys, origin = _snapped_grid((mesh.vertices[:, 0].min(), mesh.vertices[:, 0].max(),
                                    mesh.vertices[:, 1].min(), mesh.vertices[:, 1].max()),
                                   resolution)
    gx, gy = np.meshgrid(xs, ys)
    centers = np.stack([gx.ravel(), gy.ravel()], axis=1)
    tree = cKDTree(mesh.vertices[:, :2])
    dist, nearest = tree.query(centers, distance_upper_bound=resolution + 1e-12)
    valid = np.isfinite(dist)
    nearest = np.where(valid, nearest, 0)
    frac = np.zeros(len(centers))
    frac[valid] = mesh.class_fraction(class_id)[nearest[valid]]
    return BevRaster(origin, resolution, frac.reshape(len(ys), len(xs)), "fraction")
