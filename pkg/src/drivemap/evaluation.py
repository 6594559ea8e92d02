"""Map/image consistency metric: project 3D map vectors into frames, match
them against skeletonized lane instances with the Hungarian algorithm, and
aggregate pixel distances.

The headline number is the semantic reprojection error (SRE): for every
matched (projected element, mask instance) pair, the mean over the instance's
skeleton pixels of their distance to the projected polyline, averaged over
pairs and then over frames.  A distance gate turns the same matching into
precision/recall counts: unmatched projections are false positives,
unmatched instances false negatives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MissingInstanceError, NoFramesError
from .geometry import CameraIntrinsics, Pose
from .morphology import zhang_suen_thin
from .vectormap import MapElementClass, VectorMap, densify_polyline


@dataclass
class CropBox:
    """Region kept around the camera, meters: x lateral, y along the optical axis."""

    x_min: float = -15.0
    x_max: float = 15.0
    y_min: float = 0.0
    y_max: float = 60.0

    def __post_init__(self):
        if self.x_min >= self.x_max or self.y_min >= self.y_max:
            raise ValueError("crop box must have min < max on both axes")


@dataclass
class EvalFrame:
    frame_id: str
    pose: Pose                   # camera-to-world
    intrinsics: CameraIntrinsics
    masks: dict                  # class name/value -> (H,W) int raster of instance ids


@dataclass
class ProjectedElement:
    element_id: str
    element_class: MapElementClass
    polylines: list              # list of (n,2) pixel arrays (crop may split one element)


@dataclass
class MatchResult:
    pairs: list                  # (row index, col index, mean distance px)
    unmatched_rows: list
    unmatched_cols: list


@dataclass
class FrameEval:
    frame_id: str
    mean_error_px: float
    matched: int
    projected: int
    instances: int


@dataclass
class SreReport:
    frames: list = field(default_factory=list)
    sre_px: float = float("nan")
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0


MIN_DEPTH = 0.1  # meters; vertices closer than this to the camera plane are cut


def _clip_segments(points: np.ndarray, inside: np.ndarray, values: np.ndarray,
                   limit_lo, limit_hi):
    """Clip a 3D polyline against lo <= value <= hi with interpolation.

    ``values`` is the per-vertex clip coordinate.  Returns a list of vertex
    runs (sub-polylines).
    """
    out = []
    cur = []

    def interp(a, b, va, vb, bound):
        t = (bound - va) / (vb - va)
        return points[a] + t * (points[b] - points[a])

    for k in range(len(points)):
        if inside[k]:
            if not cur and k > 0 and not inside[k - 1]:
                v_prev, v_cur = values[k - 1], values[k]
                bound = limit_lo if v_prev < limit_lo else limit_hi
                cur.append(interp(k - 1, k, v_prev, v_cur, bound))
            cur.append(points[k])
        else:
            if cur:
                v_prev, v_cur = values[k - 1], values[k]
                bound = limit_lo if v_cur < limit_lo else limit_hi
                cur.append(interp(k - 1, k, v_prev, v_cur, bound))
                out.append(np.asarray(cur))
                cur = []
    if cur:
        out.append(np.asarray(cur))
    return [seg for seg in out if len(seg) >= 2]


def _clip_polyline_to_box(p_cam: np.ndarray, crop: CropBox):
    """Clip camera-frame vertices to the crop box and the near plane."""
    runs = [p_cam]
    for axis, lo, hi in ((2, max(crop.y_min, MIN_DEPTH), crop.y_max),
                         (0, crop.x_min, crop.x_max)):
        nxt = []
        for seg in runs:
            vals = seg[:, axis]
            inside = (vals >= lo) & (vals <= hi)
            nxt.extend(_clip_segments(seg, inside, vals, lo, hi))
        runs = nxt
    return runs


def project_map_to_frame(vmap: VectorMap, pose: Pose, cam: CameraIntrinsics,
                         crop: CropBox | None = None,
                         densify_m: float = 0.5) -> list:
    """Project map elements into one camera frame.

    Vertices are transformed into the camera frame, densified to at most
    ``densify_m`` spacing, clipped against the crop box (lateral x, depth
    along the optical axis) and the near plane, then projected.  One element
    can yield several pixel polylines after clipping; empty elements are
    dropped.
    """
    crop = crop or CropBox()
    R = pose.rotation()
    out = []
    for e in vmap.elements:
        pts = np.asarray(e.polyline, dtype=float)
        if pts.shape[1] == 2:
            pts = np.column_stack([pts, np.zeros(len(pts))])
        pts = densify_polyline(pts, densify_m)
        p_cam = (pts - pose.t) @ R
        polylines = []
        for seg in _clip_polyline_to_box(p_cam, crop):
            uv = np.stack([cam.fx * seg[:, 0] / seg[:, 2] + cam.cx,
                           cam.fy * seg[:, 1] / seg[:, 2] + cam.cy], axis=1)
            if len(uv) >= 2:
                polylines.append(uv)
        if polylines:
            out.append(ProjectedElement(e.element_id, e.element_class, polylines))
    return out


def skeletonize(mask: np.ndarray, instance_id: int) -> np.ndarray:
    """(N,2) pixel coordinates (u, v) of the thinned instance."""
    binary = np.asarray(mask) == instance_id
    if not binary.any():
        raise MissingInstanceError(f"instance {instance_id} not in mask")
    skel = zhang_suen_thin(binary)
    rc = np.argwhere(skel)
    return np.stack([rc[:, 1], rc[:, 0]], axis=1).astype(float)


def _points_to_segments_distance(points: np.ndarray, polyline: np.ndarray) -> np.ndarray:
    """Min distance of each point to any segment of one polyline (clamped)."""
    a = polyline[:-1]
    d = polyline[1:] - a
    len2 = np.einsum("ij,ij->i", d, d)
    len2 = np.where(len2 < 1e-18, 1.0, len2)
    diff = points[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("pij,ij->pi", diff, d) / len2, 0.0, 1.0)
    proj = a[None, :, :] + t[:, :, None] * d[None, :, :]
    dist = np.linalg.norm(points[:, None, :] - proj, axis=2)
    degenerate = np.einsum("ij,ij->i", polyline[1:] - a, polyline[1:] - a) < 1e-18
    if np.any(degenerate):
        dd = np.linalg.norm(points[:, None, :] - a[None, degenerate, :], axis=2)
        dist[:, degenerate] = dd
    return dist.min(axis=1)


def point_to_curve_distance(p, polyline) -> float:
    """Euclidean distance from a pixel to the nearest point of a polyline."""
    polyline = np.asarray(polyline, dtype=float)
    if polyline.ndim != 2 or len(polyline) < 2:
        raise ValueError("polyline needs >= 2 vertices")
    p = np.asarray(p, dtype=float).reshape(1, 2)
    return float(_points_to_segments_distance(p, polyline)[0])


def points_to_element_distance(points: np.ndarray, polylines) -> np.ndarray:
    """Min distance of each point to any polyline of a projected element."""
    dists = np.stack([_points_to_segments_distance(points, pl) for pl in polylines])
    return dists.min(axis=0)


# ---------------------------------------------------------------------------
# assignment
# ---------------------------------------------------------------------------

_SENTINEL = 1e9


def _assignment(cost: np.ndarray):
    """Minimum-cost one-to-one assignment (shortest augmenting paths, O(n^3)).

    Requires rows <= cols; returns row -> col indices.
    """
    n, m = cost.shape
    INF = float("inf")
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)  # p[j]: row (1-based) matched to column j
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = 0
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = np.full(n, -1, dtype=int)
    for j in range(1, m + 1):
        if p[j] > 0:
            row_to_col[p[j] - 1] = j - 1
    return row_to_col


def hungarian_match(cost, gate: float) -> MatchResult:
    """Globally optimal one-to-one matching, then gate the accepted pairs.

    ``cost`` is a (rows, cols) matrix of mean distances in pixels; non-finite
    entries are replaced by a large sentinel.  Pairs whose cost exceeds the
    gate are discarded after the assignment and both sides count as
    unmatched.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    n, m = cost.shape
    if n == 0 or m == 0:
        return MatchResult([], list(range(n)), list(range(m)))
    work = np.where(np.isfinite(cost), cost, _SENTINEL)
    if n <= m:
        row_to_col = _assignment(work)
        pairs = [(i, int(j), float(cost[i, j])) for i, j in enumerate(row_to_col) if j >= 0]
    else:
        col_to_row = _assignment(work.T)
        pairs = [(int(j), i, float(cost[j, i])) for i, j in enumerate(col_to_row) if j >= 0]
    kept = [(i, j, c) for i, j, c in pairs if c <= gate]
    mi = {i for i, _, _ in kept}
    mj = {j for _, j, _ in kept}
    return MatchResult(pairs=sorted(kept),
                       unmatched_rows=[i for i in range(n) if i not in mi],
                       unmatched_cols=[j for j in range(m) if j not in mj])


# ---------------------------------------------------------------------------
# the metric
# ---------------------------------------------------------------------------


def compute_sre(vmap: VectorMap, frames, crop: CropBox | None = None,
                gate: float = 20.0) -> SreReport:
    """Semantic reprojection error over a set of frames.

    Per frame and per element class: project the map, skeletonize mask
    instances, build the (instance x projection) matrix of mean
    skeleton-to-curve distances, match with the Hungarian algorithm, and keep
    pairs under the gate.  Frame error is the mean over matched pairs; the
    overall error is the unweighted mean over frames that produced at least
    one pair.  Precision counts matched projections over all projected
    elements, recall matched instances over all mask instances.
    """
    frames = list(frames)
    if not frames:
        raise NoFramesError("need at least one frame")
    crop = crop or CropBox()
    report = SreReport()
    total_projected = 0
    total_instances = 0
    total_matched = 0
    frame_errors = []
    for fr in frames:
        projected = project_map_to_frame(vmap, fr.pose, fr.intrinsics, crop)
        by_class = {}
        for pe in projected:
            by_class.setdefault(MapElementClass(pe.element_class), []).append(pe)
        pair_errors = []
        n_proj = len(projected)
        n_inst = 0
        n_matched = 0
        for cls_key, mask in sorted(fr.masks.items(), key=lambda kv: str(kv[0])):
            cls = MapElementClass(cls_key) if not isinstance(cls_key, MapElementClass) else cls_key
            mask = np.asarray(mask)
            ids = sorted(int(i) for i in np.unique(mask) if i != 0)
            n_inst += len(ids)
            elems = by_class.get(cls, [])
            if not ids or not elems:
                continue
            skeletons = [skeletonize(mask, i) for i in ids]
            cost = np.empty((len(ids), len(elems)))
            for a, sk in enumerate(skeletons):
                for b, pe in enumerate(elems):
                    cost[a, b] = float(np.mean(points_to_element_distance(sk, pe.polylines)))
            match = hungarian_match(cost, gate)
            n_matched += len(match.pairs)
            pair_errors.extend(c for _, _, c in match.pairs)
        total_projected += n_proj
        total_instances += n_inst
        total_matched += n_matched
        mean_err = float(np.mean(pair_errors)) if pair_errors else float("nan")
        if pair_errors:
            frame_errors.append(mean_err)
        report.frames.append(FrameEval(fr.frame_id, mean_err, n_matched, n_proj, n_inst))
    report.sre_px = float(np.mean(frame_errors)) if frame_errors else float("nan")
    report.precision = total_matched / total_projected if total_projected else 0.0
    report.recall = total_matched / total_instances if total_instances else 0.0
    pr = report.precision + report.recall
    report.f1 = 2.0 * report.precision * report.recall / pr if pr > 0 else 0.0
    return report
