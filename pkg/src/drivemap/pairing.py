"""Pose-prior image pair selection for cross-clip matching.

Exhaustive pairing is quadratic in image count and sequential pairing misses
cross-clip overlap, so candidate pairs come from a k-nearest-neighbour query
on camera centers and are then filtered by cheap geometric tests:

  1. height gate: |z_i - z_j| must stay below ``delta_z`` (overpasses and
     multi-level roads produce nearby centers that share no ground),
  2. view-cone test: drop a pair when both the angle between the optical
     axes and the angle between axis A and the center-to-center direction
     exceed 90 degrees (no cone overlap),
  3. face-to-face test: drop nearly opposing cameras that are close together
     (head-on pairs mislead matching),
  4. ground-footprint overlap: the IoU of the two ground footprints must
     reach ``min_footprint_iou``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import NoFootprintError
from .geometry import (CameraIntrinsics, GroundPolygon, Pose, ground_footprint,
                       optical_axis, polygon_iou)


@dataclass
class CameraRecord:
    image_id: str
    clip_id: str
    pose: Pose
    intrinsics: CameraIntrinsics


@dataclass
class PairGeometry:
    cos_theta1: float
    cos_theta2: float
    footprint_iou: float
    center_distance: float


@dataclass
class PairingConfig:
    k_neighbors: int = 30
    delta_z: float = 3.0
    face_to_face_distance: float = 8.0
    min_footprint_iou: float = 0.05
    ground_z: float = 0.0
    max_range: float = 100.0

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        if self.delta_z <= 0:
            raise ValueError("delta_z must be positive")


_FACE_COS = -math.cos(math.radians(30.0))


def _footprint(record: CameraRecord, ground_z: float, max_range: float):
    try:
        return ground_footprint(record.pose, record.intrinsics, ground_z, max_range)
    except (NoFootprintError, ValueError):
        return None


def _iou(fa, fb) -> float:
    if fa is None or fb is None:
        return 0.0
    return polygon_iou(fa, fb)


def cone_overlap(a: CameraRecord, b: CameraRecord, ground_z: float = 0.0,
                 max_range: float = 100.0) -> PairGeometry:
    """View-cone geometry of an (a, b) camera pair.

    cos_theta1 is the cosine between the optical axes; cos_theta2 between the
    a->b center direction and a's axis.  Coincident centers leave theta2
    undefined and it is set to 1 by convention.
    """
    av = optical_axis(a.pose)
    bv = optical_axis(b.pose)
    cos1 = float(np.dot(av, bv))
    ab = b.pose.t - a.pose.t
    dist = float(np.linalg.norm(ab))
    cos2 = 1.0 if dist < 1e-12 else float(np.dot(ab / dist, av))
    iou = _iou(_footprint(a, ground_z, max_range), _footprint(b, ground_z, max_range))
    return PairGeometry(cos_theta1=cos1, cos_theta2=cos2, footprint_iou=iou,
                        center_distance=dist)


def select_pairs(records, cfg: PairingConfig | None = None) -> set:
    """Unordered image-id pairs worth matching, deduplicated.

    Candidates are each record's k nearest neighbours by 3D center distance;
    every unordered candidate pair is evaluated once with the lower image id
    in the "a" role, which makes the output order-independent.
    """
    cfg = cfg or PairingConfig()
    records = list(records)
    if len(records) < 2:
        raise ValueError("need at least 2 camera records")
    ids = [r.image_id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("image ids must be unique")
    by_id = {r.image_id: r for r in records}

    centers = np.stack([r.pose.t for r in records])
    tree = cKDTree(centers)
    k = min(cfg.k_neighbors + 1, len(records))
    _, nbr = tree.query(centers, k=k)
    if k == 1:
        nbr = nbr[:, None]

    candidates = set()
    for i, row in enumerate(nbr):
        for j in row:
            if j == i or j >= len(records):
                continue
            candidates.add((min(ids[i], ids[j]), max(ids[i], ids[j])))

    axes = {r.image_id: optical_axis(r.pose) for r in records}
    footprints = {r.image_id: _footprint(r, cfg.ground_z, cfg.max_range) for r in records}

    kept = set()
    for ida, idb in candidates:
        a, b = by_id[ida], by_id[idb]
        if abs(a.pose.t[2] - b.pose.t[2]) >= cfg.delta_z:
            continue
        ab = b.pose.t - a.pose.t
        dist = float(np.linalg.norm(ab))
        cos1 = float(np.dot(axes[ida], axes[idb]))
        cos2 = 1.0 if dist < 1e-12 else float(np.dot(ab / dist, axes[ida]))
        if cos1 < 0.0 and cos2 < 0.0:  # both angles beyond 90 deg: no cone overlap
            continue
        if cos1 < _FACE_COS and dist < cfg.face_to_face_distance:
            continue
        if _iou(footprints[ida], footprints[idb]) < cfg.min_footprint_iou:
            continue
        kept.add((ida, idb))
    return kept
