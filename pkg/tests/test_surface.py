import numpy as np
import pytest

from drivemap.elevation import ElevationConfig, fit_elevation
from drivemap.errors import (DegenerateExtentError, EmptySurfaceError, NoCameraError)
from drivemap.fusion import FusedTrajectory, StateNode
from drivemap.geometry import CameraIntrinsics, Pose
from drivemap.sfm import Camera, ReconstructionModel
from drivemap.surface import (BevRaster, SemanticClass, SemanticPoint,
                              build_and_paint_mesh, export_bev, init_surface_points)

INTR = CameraIntrinsics(fx=320, fy=320, cx=256, cy=160, width=512, height=320)
FWD = np.array([[0, 0, 1], [-1, 0, 0], [0, -1, 0]], dtype=float)


# ------------------------------------------------------------- init points

def landmarks_model(n, area_xy=(10, 10), seed=0):
    rng = np.random.default_rng(seed)
    model = ReconstructionModel()
    for i in range(n):
        model.landmarks[i] = np.array([rng.uniform(0, area_xy[0]),
                                       rng.uniform(0, area_xy[1]), 0.0])
    return model


def test_init_points_dense_passthrough():
    model = landmarks_model(100)
    semantics = {i: SemanticClass.ROAD_SURFACE for i in range(100)}
    nodes = [StateNode(float(i), Pose(t=[i * 2.0, 0, 0])) for i in range(6)]
    # corridor area = 10 m x 4 m = 40 m^2 -> density 2.5 >= 1: no augmentation
    pts = init_surface_points(model, semantics, nodes, corridor_half_width=2.0)
    assert len(pts) == 100


def test_init_points_fallback_corridor():
    nodes = [StateNode(float(i), Pose(t=[i * 10.0, 0, 0.5])) for i in range(6)]
    pts = init_surface_points(None, {}, nodes, corridor_half_width=2.0)
    assert len(pts) > 100
    arr = np.stack([p.position for p in pts])
    assert np.all(np.abs(arr[:, 1]) <= 2.0 + 1e-9)
    assert np.allclose(arr[:, 2], 0.5)  # vehicle ground height from the nodes
    assert all(p.class_id == SemanticClass.ROAD_SURFACE for p in pts)


def test_init_points_filters_non_road():
    model = landmarks_model(10, area_xy=(3, 3))
    semantics = {i: (SemanticClass.OTHER if i % 2 else SemanticClass.LANE_MARKING)
                 for i in range(10)}
    pts = init_surface_points(model, semantics, None)
    assert len(pts) == 5
    assert all(p.class_id == SemanticClass.LANE_MARKING for p in pts)


def test_init_points_empty_sources():
    with pytest.raises(EmptySurfaceError):
        init_surface_points(ReconstructionModel(), {}, None)


# ---------------------------------------------------------------- elevation

def grid_points(fn, nx=40, ny=12, x_max=100.0, y_max=20.0, seed=0):
    rng = np.random.default_rng(seed)
    xs = rng.uniform(0, x_max, nx * ny)
    ys = rng.uniform(0, y_max, nx * ny)
    return np.stack([xs, ys, fn(xs, ys)], axis=1)


def test_elevation_flat():
    pts = grid_points(lambda x, y: np.zeros_like(x), nx=20, ny=6, x_max=30, y_max=10)
    field = fit_elevation(pts, ElevationConfig(iterations=600, seed=0))
    q = np.stack([np.linspace(1, 29, 40), np.linspace(1, 9, 40)], axis=1)
    rmse = float(np.sqrt(np.mean(field.predict(q) ** 2)))
    assert rmse < 1e-3


def test_elevation_sinusoid_heldout():
    fn = lambda x, y: 0.5 * np.sin(x / 10.0)
    pts = grid_points(fn, nx=25, ny=20, x_max=100, y_max=20, seed=1)  # 500 samples
    field = fit_elevation(pts, ElevationConfig(seed=0))
    held = grid_points(fn, nx=20, ny=10, x_max=100, y_max=20, seed=99)
    inside = field.contains(held[:, :2])
    pred = field.predict(held[inside, :2])
    rmse = float(np.sqrt(np.mean((pred - held[inside, 2]) ** 2)))
    assert rmse < 0.05


def test_elevation_loss_halves():
    fn = lambda x, y: 0.5 * np.sin(x / 10.0)
    pts = grid_points(fn, seed=2)
    field = fit_elevation(pts, ElevationConfig(iterations=800, seed=0))
    assert field.loss_history[-1] <= 0.5 * field.loss_history[0]


def test_elevation_collinear_points():
    xs = np.linspace(0, 10, 30)
    pts = np.stack([xs, np.full_like(xs, 2.0), np.zeros_like(xs)], axis=1)
    with pytest.raises(DegenerateExtentError):
        fit_elevation(pts)


def test_elevation_too_few_points():
    pts = np.random.default_rng(0).uniform(0, 1, (5, 3))
    with pytest.raises(ValueError):
        fit_elevation(pts)


def test_elevation_training_rmse_matches_reported_loss():
    fn = lambda x, y: 0.1 * np.sin(x / 5.0)
    pts = grid_points(fn, seed=3)
    field = fit_elevation(pts, ElevationConfig(seed=0))
    pred = field.predict(pts[:, :2])
    rmse = float(np.sqrt(np.mean((pred - pts[:, 2]) ** 2)))
    reported = float(np.sqrt(field.final_loss)) * field.z_std
    assert rmse <= 2.0 * reported + 1e-9


def test_encoding_frequencies_help_high_frequency_target():
    fn = lambda x, y: 0.05 * np.sin(2.0 * x)
    pts = grid_points(fn, nx=40, ny=8, x_max=20, y_max=4, seed=4)
    lo = fit_elevation(pts, ElevationConfig(num_frequencies=0, iterations=1200, seed=0))
    hi = fit_elevation(pts, ElevationConfig(num_frequencies=8, iterations=1200, seed=0))
    assert hi.final_loss < lo.final_loss


# ------------------------------------------------------------ mesh painting

def flat_field(x_min=0.0, x_max=8.0, y_min=0.0, y_max=4.0):
    pts = grid_points(lambda x, y: np.zeros_like(x), nx=10, ny=5,
                      x_max=x_max, y_max=y_max)
    pts[:, 0] = np.clip(pts[:, 0], x_min, x_max)
    return fit_elevation(pts, ElevationConfig(iterations=300, seed=0))


def down_camera(x, y, h=6.0):
    R = np.array([[1, 0, 0], [0, -1, 0], [0, 0, -1]], dtype=float)
    return Camera(Pose.from_rt(R, [x, y, h]), INTR)


def uniform_mask(value):
    return np.full((INTR.height, INTR.width), value, dtype=np.uint8)


def uniform_photo(rgb):
    img = np.zeros((INTR.height, INTR.width, 3), dtype=np.uint8)
    img[:] = rgb
    return img


def brute_force_counts(mesh, cameras):
    """Per-vertex observation counts by looping every (vertex, camera) pair."""
    counts = np.zeros(len(mesh.vertices), dtype=int)
    for vi, vert in enumerate(mesh.vertices):
        for cam in cameras:
            p = cam.pose.rotation().T @ (vert - cam.pose.t)
            if p[2] <= 1e-9:
                continue
            u = cam.intrinsics.fx * p[0] / p[2] + cam.intrinsics.cx
            v = cam.intrinsics.fy * p[1] / p[2] + cam.intrinsics.cy
            if 0 <= u < cam.intrinsics.width and 0 <= v < cam.intrinsics.height:
                counts[vi] += 1
    return counts


def test_paint_requires_camera():
    with pytest.raises(NoCameraError):
        build_and_paint_mesh(flat_field(), [], [], [])


def test_paint_counts_match_brute_force_oracle():
    field = flat_field()
    cams = [down_camera(2.0, 1.0), down_camera(5.0, 2.0), down_camera(7.5, 3.5, h=3.0)]
    masks = [uniform_mask(1)] * 3
    photos = [uniform_photo((100, 110, 120))] * 3
    mesh = build_and_paint_mesh(field, cams, masks, photos, grid_resolution=0.25)
    assert np.array_equal(mesh.counts, brute_force_counts(mesh, cams))
    assert np.array_equal(mesh.votes.sum(axis=1), mesh.counts)


def test_paint_vertex_behind_all_cameras():
    field = flat_field()
    # camera looks straight down from above a point outside the grid: most
    # vertices project outside; vertices behind get zero count
    up_R = np.eye(3)  # optical axis +z (skyward): every ground vertex is behind
    cams = [Camera(Pose.from_rt(up_R, [4.0, 2.0, 5.0]), INTR)]
    mesh = build_and_paint_mesh(field, cams, [uniform_mask(1)],
                                [uniform_photo((1, 2, 3))], grid_resolution=0.5)
    assert np.all(mesh.counts == 0)
    assert np.all(mesh.vertex_classes() == 0)


def test_paint_unanimous_vote():
    field = flat_field()
    cams = [down_camera(4.0, 2.0), down_camera(4.5, 2.0)]
    masks = [uniform_mask(int(SemanticClass.LANE_MARKING))] * 2
    mesh = build_and_paint_mesh(field, cams, masks, [uniform_photo((9, 9, 9))] * 2,
                                grid_resolution=0.5)
    seen = mesh.counts > 0
    assert seen.any()
    assert np.all(mesh.vertex_classes()[seen] == SemanticClass.LANE_MARKING)


def test_paint_tie_goes_to_road_surface():
    field = flat_field()
    cams = [down_camera(4.0, 2.0), down_camera(4.0, 2.0)]
    masks = [uniform_mask(int(SemanticClass.ROAD_SURFACE)),
             uniform_mask(int(SemanticClass.LANE_MARKING))]
    mesh = build_and_paint_mesh(field, cams, masks, [uniform_photo((9, 9, 9))] * 2,
                                grid_resolution=0.5)
    seen = mesh.counts == 2
    assert seen.any()
    assert np.all(mesh.vertex_classes()[seen] == SemanticClass.ROAD_SURFACE)


# ---------------------------------------------------------------- BEV export

def painted_mesh(grid_resolution=0.25):
    field = flat_field()
    cams = [down_camera(3.0, 2.0, h=8.0), down_camera(6.0, 2.0, h=8.0)]
    return build_and_paint_mesh(field, cams, [uniform_mask(1)] * 2,
                                [uniform_photo((50, 60, 70))] * 2,
                                grid_resolution=grid_resolution)


def test_export_bev_uniform():
    mesh = painted_mesh()
    sem, photo, elev = export_bev(mesh, 0.25)
    seen = sem.values > 0
    assert np.all(sem.values[seen] == 1)
    assert np.allclose(photo.values[seen], [50, 60, 70])
    assert np.max(np.abs(elev.values)) < 0.01  # flat field


def test_export_bev_sloped_plane():
    fn = lambda x, y: 0.1 * x
    pts = grid_points(fn, nx=20, ny=8, x_max=10, y_max=4, seed=5)
    field = fit_elevation(pts, ElevationConfig(iterations=1500, seed=0))
    cams = [down_camera(3.0, 2.0, h=9.0), down_camera(7.0, 2.0, h=9.0)]
    mesh = build_and_paint_mesh(field, cams, [uniform_mask(1)] * 2,
                                [uniform_photo((1, 1, 1))] * 2, grid_resolution=0.5)
    sem, photo, elev = export_bev(mesh, 0.5)
    xs, ys = elev.cell_centers()
    for row in range(elev.values.shape[0]):
        inside = (xs > 1.0) & (xs < 9.0)
        got = elev.values[row][inside]
        want = 0.1 * xs[inside]
        assert np.max(np.abs(got - want)) < 0.5 * 0.1 + 0.05  # one quantization step
    assert np.all(elev.values[:, 0] != np.nan)


def test_export_bev_idempotent():
    mesh = painted_mesh()
    a = export_bev(mesh, 0.25)
    b = export_bev(mesh, 0.25)
    for ra, rb in zip(a, b):
        assert np.array_equal(ra.values, rb.values)
        assert np.array_equal(ra.origin, rb.origin)


def test_export_bev_empty_cells_background():
    mesh = painted_mesh(grid_resolution=1.0)
    sem, photo, elev = export_bev(mesh, 0.25)  # finer raster than mesh: gaps
    assert np.any(sem.values == 0)


def test_bev_raster_validation():
    with pytest.raises(ValueError):
        BevRaster(origin=[0, 0], resolution=0.0, values=np.zeros((2, 2)))
