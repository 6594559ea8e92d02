"""Stage functions chaining the toolkit on a generated or ingested data
bundle.  The command-line front end wraps these; tests call them directly.

Each stage is a pure function of its inputs and configuration, so a run is
reproducible end to end.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .elevation import ElevationConfig, ElevationField, fit_elevation
from .evaluation import CropBox, EvalFrame, SreReport, compute_sre
from .fusion import FusionConfig, FusedTrajectory, fuse_pose_graph
from .pairing import CameraRecord, PairingConfig, select_pairs
from .sfm import (ImageMeta, MergeConfig, ReconstructionModel, SfmConfig,
                  init_cameras_from_odometry, merge_models, reconstruct_clip)
from .surface import (RoadMesh, SemanticClass, build_and_paint_mesh, export_bev,
                      export_class_fraction, export_observation_count,
                      init_surface_points)
from .vectormap import (MapElementClass, VectorMap, extract_polylines, lift_to_3d)


@dataclass
class SurfaceStageConfig:
    corridor_half_width: float = 2.0
    corridor_ground_offset: float = -1.6  # reference camera height above ground
    grid_resolution: float = 0.1
    bounds_margin: float = 0.6
    max_paint_depth: float = 22.0
    refine_iterations: int = 200
    elevation: ElevationConfig = field(default_factory=ElevationConfig)


@dataclass
class VectorizeStageConfig:
    simplify_eps: float = 0.05
    refine_window: int = 9
    min_component_cells: int = 12
    min_cells: int = 25
    stitch: bool = True
    fraction_floor: float = 0.35   # band membership from class-vote fractions
    min_observations: int = 3
    lift_spacing: float = 1.0
    bounds_margin: float = 1.5


@dataclass
class EvaluateStageConfig:
    crop: CropBox = field(default_factory=CropBox)
    gate_px: float = 20.0


def fuse_stage(nodes_init, odom_factors, gnss_factors,
               cfg: FusionConfig | None = None) -> FusedTrajectory:
    return fuse_pose_graph(nodes_init, odom_factors, gnss_factors, cfg)


def pairs_stage(trajectories: dict, rig, intrinsics, images_by_clip: dict,
                cfg: PairingConfig | None = None):
    """Camera records from fused trajectories, then spatial pair selection."""
    records = []
    for clip_id in sorted(trajectories):
        cams = init_cameras_from_odometry(trajectories[clip_id], rig,
                                          images_by_clip[clip_id], intrinsics)
        for meta in images_by_clip[clip_id]:
            cam = cams[meta.image_id]
            records.append(CameraRecord(meta.image_id, clip_id, cam.pose,
                                        cam.intrinsics))
    return select_pairs(records, cfg)


def reconstruct_stage(traj, rig, intrinsics, images, tracks,
                      cfg: SfmConfig | None = None) -> ReconstructionModel:
    return reconstruct_clip(traj, rig, intrinsics, images, tracks, cfg)


def merge_stage(models, cross_pairs, cross_tracks,
                cfg: MergeConfig | None = None) -> ReconstructionModel:
    return merge_models(models, cross_pairs, cross_tracks, cfg)


@dataclass
class SurfaceStageOutput:
    points: list
    elevation: ElevationField
    mesh: RoadMesh
    bev_semantic: object
    bev_photometric: object
    bev_elevation: object
    bev_counts: object
    fractions: dict  # class id -> BevRaster


def surface_stage(model: ReconstructionModel, track_classes: dict, traj,
                  semantic_images: dict, photo_images: dict,
                  cfg: SurfaceStageConfig | None = None) -> SurfaceStageOutput:
    cfg = cfg or SurfaceStageConfig()
    semantics = {tid: SemanticClass(c) for tid, c in track_classes.items()
                 if tid in model.landmarks}
    points = init_surface_points(model, semantics, traj,
                                 corridor_half_width=cfg.corridor_half_width,
                                 ground_offset=cfg.corridor_ground_offset)
    elev = fit_elevation(points, cfg.elevation)
    image_ids = [i for i in sorted(model.cameras) if i in semantic_images]
    cams = [model.cameras[i] for i in image_ids]
    sems = [semantic_images[i] for i in image_ids]
    photos = [photo_images[i] for i in image_ids]
    mesh = build_and_paint_mesh(elev, cams, sems, photos,
                                grid_resolution=cfg.grid_resolution,
                                training_points=points,
                                refine_iterations=cfg.refine_iterations,
                                bounds_margin=cfg.bounds_margin,
                                max_paint_depth=cfg.max_paint_depth)
    bev_sem, bev_photo, bev_elev = export_bev(mesh, cfg.grid_resolution)
    bev_counts = export_observation_count(mesh, cfg.grid_resolution)
    fractions = {int(c): export_class_fraction(mesh, cfg.grid_resolution, int(c))
                 for c in (SemanticClass.LANE_MARKING, SemanticClass.ROAD_TEETH)}
    return SurfaceStageOutput(points, elev, mesh, bev_sem, bev_photo, bev_elev,
                              bev_counts, fractions)


def _boosted_class_mask(bev_semantic, fraction, counts, class_id: int,
                        cfg: VectorizeStageConfig):
    """Stable band raster for one class: argmax cells plus cells whose vote
    fraction clears the floor, gated by a minimum observation count."""
    sem = np.asarray(bev_semantic.values)
    frac = np.asarray(fraction.values, dtype=float)
    cnt = np.asarray(counts.values)
    band = (sem == class_id) | (frac >= cfg.fraction_floor)
    band &= cnt >= cfg.min_observations
    out = np.zeros_like(sem, dtype=np.uint8)
    out[band] = class_id
    return type(bev_semantic)(origin=bev_semantic.origin.copy(),
                              resolution=bev_semantic.resolution,
                              values=out, channel="semantic")


def vectorize_stage(bev_semantic, fractions: dict, counts, elev: ElevationField,
                    cfg: VectorizeStageConfig | None = None) -> VectorMap:
    """Extract lane dividers and road boundaries from the painted BEV and
    lift them onto the elevation surface."""
    cfg = cfg or VectorizeStageConfig()
    elements = []
    for class_id, element_class in ((int(SemanticClass.LANE_MARKING),
                                     MapElementClass.LANE_DIVIDER),
                                    (int(SemanticClass.ROAD_TEETH),
                                     MapElementClass.ROAD_BOUNDARY)):
        frac = fractions.get(class_id)
        raster = bev_semantic
        if frac is not None and counts is not None:
            raster = _boosted_class_mask(bev_semantic, frac, counts, class_id, cfg)
        elems = extract_polylines(raster, class_id, cfg.simplify_eps,
                                  element_class=element_class,
                                  min_cells=cfg.min_cells,
                                  refine_window=cfg.refine_window,
                                  weights=frac,
                                  min_component_cells=cfg.min_component_cells,
                                  stitch=cfg.stitch)
        for e in elems:
            e.element_id = f"{element_class.value}_{len(elements):03d}"
            elements.append(e)
    return lift_to_3d(elements, elev, max_spacing=cfg.lift_spacing,
                      bounds_margin=cfg.bounds_margin)


def evaluate_stage(vmap: VectorMap, cameras: dict, masks: dict, eval_frames,
                   cfg: EvaluateStageConfig | None = None) -> SreReport:
    """Score the map against instance masks using the given camera poses.

    Frames whose image has no camera pose (dropped during reconstruction)
    are skipped.
    """
    cfg = cfg or EvaluateStageConfig()
    frames = []
    for iid in eval_frames:
        if iid in cameras and iid in masks:
            cam = cameras[iid]
            frames.append(EvalFrame(iid, cam.pose, cam.intrinsics, masks[iid]))
    return compute_sre(vmap, frames, cfg.crop, cfg.gate_px)
