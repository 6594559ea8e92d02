"""Vectorized map elements: polyline extraction from BEV semantics and
elevation lifting to 3D."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import ndimage

from .elevation import ElevationField
from .errors import OutOfBoundsError
from .morphology import douglas_peucker, trace_skeleton_paths, zhang_suen_thin
from .surface import BevRaster, SemanticClass


class MapElementClass(str, Enum):
    LANE_DIVIDER = "lane_divider"
    PED_CROSSING = "ped_crossing"
    ROAD_BOUNDARY = "road_boundary"


# which BEV semantic class produces which map element by default
RASTER_TO_ELEMENT = {
    int(SemanticClass.LANE_MARKING): MapElementClass.LANE_DIVIDER,
    int(SemanticClass.ROAD_TEETH): MapElementClass.ROAD_BOUNDARY,
}


@dataclass
class MapElement:
    element_id: str
    element_class: MapElementClass
    polyline: np.ndarray  # (N,2) or (N,3) meters, world frame

    def __post_init__(self):
        self.element_class = MapElementClass(self.element_class)
        self.polyline = np.asarray(self.polyline, dtype=float)
        if self.polyline.ndim != 2 or self.polyline.shape[0] < 2 \
                or self.polyline.shape[1] not in (2, 3):
            raise ValueError("polyline must be (N>=2, 2|3)")
        if np.any(np.linalg.norm(np.diff(self.polyline, axis=0), axis=1) < 1e-12):
            raise ValueError("consecutive polyline vertices must be distinct")


@dataclass
class VectorMap:
    elements: list = field(default_factory=list)
    frame: str = "world"

    def __post_init__(self):
        ids = [e.element_id for e in self.elements]
        if len(set(ids)) != len(ids):
            raise ValueError("element ids must be unique")

    def by_class(self, cls):
        cls = MapElementClass(cls)
        return [e for e in self.elements if e.element_class == cls]


def _refine_path_lateral(path: np.ndarray, mask: np.ndarray, window: int,
                         reach: int = 4, weights=None,
                         weight_floor: float = 0.3) -> np.ndarray:
    """Sub-cell lateral correction of a traced path against the class band.

    For every path cell, takes the weighted centroid of the band along the
    local perpendicular, then smooths the lateral offsets along the path;
    thinning quantizes the band centerline to whole cells, and the centroid
    plus along-path averaging recovers the sub-cell position.  ``weights``
    (e.g. per-cell class-vote fractions) sharpen the centroid; without them
    the binary class mask is used.
    """
    h, w = mask.shape
    n = len(path)
    pts = path.astype(float)
    offsets = np.zeros(n)
    for k in range(n):
        a = path[max(k - 2, 0)]
        b = path[min(k + 2, n - 1)]
        d = (b - a).astype(float)
        norm = np.hypot(d[0], d[1])
        if norm < 1e-9:
            continue
        d /= norm
        nrm = np.array([-d[1], d[0]])
        num = den = 0.0
        for off in range(-reach, reach + 1):
            r = int(round(path[k, 0] + off * nrm[0]))
            c = int(round(path[k, 1] + off * nrm[1]))
            if not (0 <= r < h and 0 <= c < w):
                continue
            if weights is not None:
                wt = max(float(weights[r, c]) - weight_floor, 0.0)
            else:
                wt = 1.0 if mask[r, c] else 0.0
            num += wt * off
            den += wt
        if den > 0:
            offsets[k] = num / den
    if window > 1:
        kernel = np.ones(window) / window
        smooth = np.convolve(offsets, kernel, mode="same")
        counts = np.convolve(np.ones(n), kernel, mode="same")
        offsets = smooth / counts
    for k in range(n):
        a = path[max(k - 2, 0)]
        b = path[min(k + 2, n - 1)]
        d = (b - a).astype(float)
        norm = np.hypot(d[0], d[1])
        if norm < 1e-9:
            continue
        d /= norm
        pts[k] += offsets[k] * np.array([-d[1], d[0]])
    return pts


def _stitch_paths(paths, max_gap: float = 2.9, max_turn_deg: float = 35.0):
    """Join traced paths whose ends nearly touch and continue collinearly.

    Junction splitting and speckle can cut one painted line into several
    arcs; greedily reconnecting end-to-end keeps each physical line a single
    element.
    """
    paths = [np.asarray(p, dtype=float) for p in paths]

    def end_dir(p, head):
        seg = p[min(4, len(p) - 1)] - p[0] if head else p[-1] - p[-min(5, len(p))]
        n = np.linalg.norm(seg)
        return seg / n if n > 1e-9 else None

    changed = True
    while changed:
        changed = False
        for i in range(len(paths)):
            if paths[i] is None:
                continue
            for j in range(len(paths)):
                if i == j or paths[j] is None:
                    continue
                for flip_i in (False, True):
                    a = paths[i][::-1] if flip_i else paths[i]
                    for flip_j in (False, True):
                        b = paths[j][::-1] if flip_j else paths[j]
                        if np.linalg.norm(b[0] - a[-1]) > max_gap:
                            continue
                        da = end_dir(a, head=False)
                        db = end_dir(b, head=True)
                        if da is None or db is None:
                            continue
                        if np.dot(da, db) < np.cos(np.radians(max_turn_deg)):
                            continue
                        gap = np.linalg.norm(b[0] - a[-1])
                        joined = np.vstack([a, b]) if gap > 1e-9 else np.vstack([a, b[1:]])
                        paths[i] = joined
                        paths[j] = None
                        changed = True
                        break
                    if changed:
                        break
                if changed:
                    break
            if changed:
                break
    return [p for p in paths if p is not None]


def extract_polylines(bev_semantic: BevRaster, class_id: int, simplify_eps: float,
                      element_class: MapElementClass | None = None,
                      min_cells: int = 2, refine_window: int = 0,
                      weights=None, min_component_cells: int = 1,
                      stitch: bool = False) -> list:
    """Threshold -> thin -> trace -> simplify one semantic class of a BEV raster.

    Output coordinates are meters via the raster origin/resolution; every
    vertex sits on a skeleton cell center.  Options for noisy rasters:
    ``min_component_cells`` removes speckle blobs before thinning,
    ``stitch`` reconnects collinear arc fragments, and ``refine_window > 0``
    snaps each traced vertex to the sub-cell lateral centroid of the class
    band (smoothed along the path), trading the on-skeleton guarantee for
    geometric accuracy; ``weights`` may supply a per-cell band-confidence
    raster (class-vote fractions) for a sharper centroid.  Returns 2D
    MapElements.
    """
    cls = element_class or RASTER_TO_ELEMENT.get(int(class_id))
    if cls is None:
        raise ValueError(f"no element class for raster class {class_id}; pass element_class")
    mask = np.asarray(bev_semantic.values) == class_id
    if not mask.any():
        return []
    if min_component_cells > 1:
        labels, n_lab = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
        sizes = np.bincount(labels.ravel())
        mask = mask & (sizes[labels] >= min_component_cells)
        if not mask.any():
            return []
    warr = None
    if weights is not None:
        warr = np.asarray(getattr(weights, "values", weights), dtype=float)
        if warr.max(initial=0.0) > 1.0:
            warr = warr / 255.0
    skel = zhang_suen_thin(mask)
    paths = trace_skeleton_paths(skel)
    if stitch:
        paths = _stitch_paths(paths)
    elements = []
    for path in sorted(paths, key=lambda p: (p[0, 0], p[0, 1], len(p))):
        if len(path) < max(min_cells, 2):
            continue
        cells = np.asarray(path, dtype=float)
        if refine_window > 0 and len(path) >= 3:
            cells = _refine_path_lateral(np.asarray(path, dtype=int), mask,
                                         refine_window, weights=warr)
        x, y = bev_semantic.to_meters(cells[:, 1], cells[:, 0])
        pts = douglas_peucker(np.stack([x, y], axis=1), simplify_eps)
        if len(pts) >= 2:
            elements.append(MapElement(f"{cls.value}_{len(elements):03d}", cls, pts))
    return elements


def densify_polyline(points: np.ndarray, max_spacing: float) -> np.ndarray:
    """Insert evenly spaced vertices so no segment exceeds ``max_spacing``."""
    points = np.asarray(points, dtype=float)
    if max_spacing <= 0 or len(points) < 2:
        return points.copy()
    out = [points[0]]
    for a, b in zip(points[:-1], points[1:]):
        d = float(np.linalg.norm(b - a))
        n = max(int(np.ceil(d / max_spacing)), 1)
        for k in range(1, n + 1):
            out.append(a + (b - a) * (k / n))
    return np.asarray(out)


def lift_to_3d(elements, elev: ElevationField, max_spacing: float = 1.0,
               bounds_margin: float = 0.0) -> VectorMap:
    """Lift 2D elements onto the elevation surface.

    Polylines are densified to at most ``max_spacing`` vertex separation
    first so the lifted line samples the surface curvature, then each vertex
    (x, y) becomes (x, y, field(x, y)).  Raises OutOfBoundsError listing
    every vertex more than ``bounds_margin`` outside the field bounds.
    """
    densified = []
    offenders = []
    x_min, x_max, y_min, y_max = elev.bounds
    for e in elements:
        pts = densify_polyline(np.asarray(e.polyline, dtype=float)[:, :2], max_spacing)
        inside = ((pts[:, 0] >= x_min - bounds_margin) & (pts[:, 0] <= x_max + bounds_margin)
                  & (pts[:, 1] >= y_min - bounds_margin) & (pts[:, 1] <= y_max + bounds_margin))
        if not np.all(inside):
            offenders.extend([tuple(v) for v in pts[~inside]])
        densified.append((e, pts))
    if offenders:
        raise OutOfBoundsError(offenders)
    lifted = []
    for e, pts in densified:
        z = elev.predict(pts)
        lifted.append(MapElement(e.element_id, e.element_class,
                                 np.column_stack([pts, z])))
    return VectorMap(elements=lifted)
