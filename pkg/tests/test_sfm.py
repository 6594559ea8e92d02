import math
import warnings

import numpy as np
import pytest

from drivemap import ba
from drivemap.errors import (CheiralityError, DisjointModelsError, EmptyModelError,
                             LowParallaxError, OutOfRangeError, StationaryClipWarning)
from drivemap.fusion import FusedTrajectory, StateNode
from drivemap.geometry import CameraIntrinsics, Pose, RigCalibration, rotvec_to_quat
from drivemap.sfm import (Camera, ImageMeta, Observation, ReconstructionModel, RigFrame,
                          SfmConfig, MergeConfig, Track, bundle_adjust,
                          init_cameras_from_odometry, iterative_ba, merge_models,
                          reconstruct_clip, rigid_bundle_adjust, triangulate,
                          update_residuals)

INTR = CameraIntrinsics(fx=500, fy=500, cx=320, cy=240, width=640, height=480)
FWD = np.array([[0, 0, 1], [-1, 0, 0], [0, -1, 0]], dtype=float)  # camera z -> world +x


def cam_at(x, y=0.0, z=0.0, jitter_R=None):
    R = FWD if jitter_R is None else FWD @ jitter_R
    return Camera(Pose.from_rt(R, [x, y, z]), INTR)


def exact_pixel(camera, X):
    p = camera.pose.rotation().T @ (np.asarray(X, float) - camera.pose.t)
    assert p[2] > 0
    return np.array([camera.intrinsics.fx * p[0] / p[2] + camera.intrinsics.cx,
                     camera.intrinsics.fy * p[1] / p[2] + camera.intrinsics.cy])


def make_model(n_cams=4, n_pts=12, seed=0, pixel_noise=0.0):
    """Noiseless (or noisy) synthetic model at ground truth, plus gt copies."""
    rng = np.random.default_rng(seed)
    cameras = {}
    for k in range(n_cams):
        jr = ba.so3_exp_batch(rng.normal(scale=0.02, size=(1, 3)))[0]
        cameras[f"im{k:02d}"] = cam_at(k * 1.0, rng.normal(scale=0.1), 0.0, jr)
    # lateral offsets bounded away from the motion axis: forward-motion
    # parallax stays above the triangulation gate for every point
    lat = rng.uniform(1.0, 4.0, n_pts) * rng.choice([-1.0, 1.0], n_pts)
    pts = np.stack([rng.uniform(8, 16, n_pts) + 0.5 * n_cams,
                    lat,
                    rng.uniform(-2, 2, n_pts)], axis=1)
    tracks, landmarks = {}, {}
    for j in range(n_pts):
        obs = []
        for iid, cam in cameras.items():
            px = exact_pixel(cam, pts[j]) + rng.normal(scale=pixel_noise, size=2)
            obs.append(Observation(iid, j, px))
        tracks[j] = Track(j, obs)
        landmarks[j] = pts[j].copy()
    model = ReconstructionModel(cameras=cameras, tracks=tracks, landmarks=landmarks)
    update_residuals(model)
    return model, pts


# ---------------------------------------------------------------- triangulate

def two_view_midpoint_oracle(c0, c1, d0, d1):
    """Closed-form midpoint of the common perpendicular of two rays."""
    w0 = d0 / np.linalg.norm(d0)
    w1 = d1 / np.linalg.norm(d1)
    b = c1 - c0
    a11, a12, a22 = w0 @ w0, -(w0 @ w1), w1 @ w1
    b1, b2 = w0 @ b, -(w1 @ b)
    s, t = np.linalg.solve([[a11, a12], [a12, a22]], [b1, b2])
    return 0.5 * (c0 + s * w0 + c1 + t * w1)


def test_triangulate_two_view_exact():
    ca, cb = cam_at(0.0), cam_at(0.0, y=1.0)
    X = np.array([5.0, 0.0, 0.0])  # 5 m ahead of both (world +x)
    trk = Track(0, [Observation("a", 0, exact_pixel(ca, X)),
                    Observation("b", 0, exact_pixel(cb, X))])
    lm = triangulate(trk, {"a": ca, "b": cb})
    assert np.linalg.norm(lm.position - X) < 1e-6
    d0 = X - ca.pose.t
    d1 = X - cb.pose.t
    oracle = two_view_midpoint_oracle(ca.pose.t, cb.pose.t, d0, d1)
    assert np.linalg.norm(lm.position - oracle) < 1e-6


def test_triangulate_zero_baseline():
    ca, cb = cam_at(0.0), cam_at(0.0)
    X = np.array([5.0, 0.3, 0.1])
    trk = Track(0, [Observation("a", 0, exact_pixel(ca, X)),
                    Observation("b", 0, exact_pixel(cb, X))])
    with pytest.raises(LowParallaxError):
        triangulate(trk, {"a": ca, "b": cb})


def test_triangulate_behind_camera():
    ca, cb = cam_at(0.0), cam_at(10.0)  # X is behind cb
    X = np.array([5.0, 0.0, 0.0])
    pa = exact_pixel(ca, X)
    pb_cam = cb.pose.rotation().T @ (X - cb.pose.t)
    pb = np.array([cb.intrinsics.fx * pb_cam[0] / pb_cam[2] + cb.intrinsics.cx,
                   cb.intrinsics.fy * pb_cam[1] / pb_cam[2] + cb.intrinsics.cy])
    trk = Track(0, [Observation("a", 0, pa), Observation("b", 0, pb)])
    with pytest.raises((CheiralityError, LowParallaxError)):
        triangulate(trk, {"a": ca, "b": cb})


# -------------------------------------------------------------- jacobians

def numeric_jacobians(ent_R, ent_t, X, rel_R, rel_t, obs_ent, obs_pt, uv, K, h=1e-6):
    def res(eR, et, Xp):
        r, _, _, _ = ba.evaluate_residuals(eR, et, Xp, rel_R, rel_t, obs_ent, obs_pt, uv, K)
        return r

    O = uv.shape[0]
    Je = np.zeros((O, 2, 6))
    Jp = np.zeros((O, 2, 3))
    for e in range(ent_R.shape[0]):
        for a in range(6):
            d = np.zeros(6)
            d[a] = h
            Rp, tp = ent_R.copy(), ent_t.copy()
            tp[e] = ent_t[e] + d[:3]
            Rp[e] = ent_R[e] @ ba.so3_exp_batch(d[None, 3:])[0]
            rp = res(Rp, tp, X)
            Rm, tm = ent_R.copy(), ent_t.copy()
            tm[e] = ent_t[e] - d[:3]
            Rm[e] = ent_R[e] @ ba.so3_exp_batch(-d[None, 3:])[0]
            rm = res(Rm, tm, X)
            mask = obs_ent == e
            Je[mask, :, a] = ((rp - rm) / (2 * h))[mask]
    for p in range(X.shape[0]):
        for a in range(3):
            d = np.zeros(3)
            d[a] = h
            Xp = X.copy()
            Xp[p] = X[p] + d
            rp = res(ent_R, ent_t, Xp)
            Xm = X.copy()
            Xm[p] = X[p] - d
            rm = res(ent_R, ent_t, Xm)
            mask = obs_pt == p
            Jp[mask, :, a] = ((rp - rm) / (2 * h))[mask]
    return Je, Jp


def random_instance(rng, rigid):
    n_ent, n_pts = 3, 10
    ent_R = np.stack([FWD @ ba.so3_exp_batch(rng.normal(scale=0.1, size=(1, 3)))[0]
                      for _ in range(n_ent)])
    ent_t = np.stack([[k * 1.0, rng.normal(scale=0.3), rng.normal(scale=0.2)]
                      for k in range(n_ent)])
    X = np.stack([rng.uniform(10, 20, n_pts), rng.uniform(-4, 4, n_pts),
                  rng.uniform(-3, 3, n_pts)], axis=1)
    obs_ent = np.repeat(np.arange(n_ent), n_pts)
    obs_pt = np.tile(np.arange(n_pts), n_ent)
    O = obs_ent.size
    if rigid:
        rel_R = np.stack([ba.so3_exp_batch(rng.normal(scale=0.2, size=(1, 3)))[0]
                          for _ in range(O)])
        rel_t = rng.normal(scale=0.3, size=(O, 3))
    else:
        rel_R = np.broadcast_to(np.eye(3), (O, 3, 3)).copy()
        rel_t = np.zeros((O, 3))
    r, _, _, _ = ba.evaluate_residuals(ent_R, ent_t, X, rel_R, rel_t,
                                       obs_ent, obs_pt, np.zeros((O, 2)),
                                       np.tile([500.0, 500.0, 320.0, 240.0], (O, 1)))
    uv = r + rng.normal(scale=2.0, size=(O, 2))  # residuals near but not at zero
    K = np.tile([500.0, 500.0, 320.0, 240.0], (O, 1))
    return ent_R, ent_t, X, rel_R, rel_t, obs_ent, obs_pt, uv, K


@pytest.mark.parametrize("rigid", [False, True])
def test_analytic_jacobians_match_finite_differences(rigid):
    rng = np.random.default_rng(42 if rigid else 24)
    for _ in range(5):
        inst = random_instance(rng, rigid)
        r, Je, Jp = ba.linearize_reprojection(*inst)
        nJe, nJp = numeric_jacobians(*inst)
        assert np.max(np.abs(Je - nJe)) < 1e-4
        assert np.max(np.abs(Jp - nJp)) < 1e-4


# -------------------------------------------------------------- bundle adjust

def test_ba_zero_residual_fixed_point():
    model, pts = make_model()
    out = bundle_adjust(model)
    assert out.cost_history[-1] < 1e-16
    for iid in model.cameras:
        assert np.allclose(out.cameras[iid].pose.t, model.cameras[iid].pose.t, atol=1e-9)
        assert min(np.linalg.norm(out.cameras[iid].pose.q - model.cameras[iid].pose.q),
                   np.linalg.norm(out.cameras[iid].pose.q + model.cameras[iid].pose.q)) < 1e-9
    for j in model.landmarks:
        assert np.allclose(out.landmarks[j], model.landmarks[j], atol=1e-9)


def test_ba_restores_perturbed_landmark():
    # cameras held fixed: single-point least squares with a unique minimum
    model, pts = make_model()
    model.landmarks[3] = pts[3] + np.array([0.1, -0.05, 0.02])
    out = bundle_adjust(model, fixed_images="all")
    assert np.linalg.norm(out.landmarks[3] - pts[3]) < 1e-6
    # oracle: iterate the closed-form normal equations for the single point
    X = model.landmarks[3].copy()
    cams = [model.cameras[i] for i in sorted(model.cameras)]
    pixels = [o.pixel for o in sorted(model.tracks[3].observations, key=lambda o: o.image_id)]
    for _ in range(20):
        J = np.zeros((2 * len(cams), 3))
        r = np.zeros(2 * len(cams))
        for k, (cam, px) in enumerate(zip(cams, pixels)):
            R = cam.pose.rotation()
            p = R.T @ (X - cam.pose.t)
            fx, fy = cam.intrinsics.fx, cam.intrinsics.fy
            du = np.array([[fx / p[2], 0, -fx * p[0] / p[2] ** 2],
                           [0, fy / p[2], -fy * p[1] / p[2] ** 2]])
            J[2 * k:2 * k + 2] = du @ R.T
            r[2 * k] = fx * p[0] / p[2] + cam.intrinsics.cx - px[0]
            r[2 * k + 1] = fy * p[1] / p[2] + cam.intrinsics.cy - px[1]
        X = X + np.linalg.solve(J.T @ J, -(J.T @ r))
    assert np.linalg.norm(out.landmarks[3] - X) < 1e-6


def test_ba_cost_non_increasing():
    model, _ = make_model(pixel_noise=1.0, seed=3)
    out = bundle_adjust(model)
    hist = out.cost_history
    assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))
    assert hist[-1] < hist[0]


def similarity_align(src, dst):
    """Umeyama closed form: s, R, t minimizing ||dst - (s R src + t)||^2."""
    mu_s, mu_d = src.mean(0), dst.mean(0)
    cs, cd = src - mu_s, dst - mu_d
    cov = cd.T @ cs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U @ Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = np.trace(np.diag(D) @ S) / (cs ** 2).sum() * len(src)
    t = mu_d - s * (R @ mu_s)
    return s, R, t


def scene_points(model):
    ids = sorted(model.cameras)
    tids = sorted(model.landmarks)
    return np.vstack([np.stack([model.cameras[i].pose.t for i in ids]),
                      np.stack([model.landmarks[t] for t in tids])])


def test_ba_gauge_invariance():
    # transforming all inputs by a rigid motion transforms the output the same
    # way; a similarity alignment absorbs the scale gauge left by holding only
    # the first camera fixed
    cfg = SfmConfig(solver=ba.SolverConfig(max_iterations=300, relative_tol=1e-16))
    model, _ = make_model(pixel_noise=0.5, seed=5)
    out1 = bundle_adjust(model, cfg)
    G = Pose(t=[3.0, -2.0, 1.0], q=rotvec_to_quat([0.1, 0.2, -0.3]))
    moved = model.copy()
    for iid, cam in moved.cameras.items():
        moved.cameras[iid] = Camera(G.compose(cam.pose), cam.intrinsics)
    for j in moved.landmarks:
        moved.landmarks[j] = G.apply(moved.landmarks[j])
    out2 = bundle_adjust(moved, cfg)
    want = G.apply(scene_points(out1))
    got = scene_points(out2)
    s, R, t = similarity_align(got, want)
    aligned = got @ (s * R).T + t
    assert np.max(np.linalg.norm(aligned - want, axis=1)) < 1e-6


# ---------------------------------------------------------------- rigid BA

def stereo_rig_setup(n_frames=5, n_pts=15, seed=1, pixel_noise=0.0):
    rng = np.random.default_rng(seed)
    rel = {"L": Pose(), "R": Pose(t=[0.6, 0.0, 0.0])}  # in reference-camera frame
    frames, cameras = [], {}
    for k in range(n_frames):
        body = Pose.from_rt(FWD, [k * 1.0, rng.normal(scale=0.05), 0.0])
        members = {f"f{k}_{n}": rel[n] for n in rel}
        frames.append(RigFrame(float(k), body, members))
        for n, rp in rel.items():
            cameras[f"f{k}_{n}"] = Camera(body.compose(rp), INTR)
    pts = np.stack([rng.uniform(10, 18, n_pts) + n_frames * 0.5,
                    rng.uniform(-4, 4, n_pts), rng.uniform(-2, 2, n_pts)], axis=1)
    tracks, landmarks = {}, {}
    for j in range(n_pts):
        obs = [Observation(iid, j, exact_pixel(cam, pts[j])
                           + rng.normal(scale=pixel_noise, size=2))
               for iid, cam in cameras.items()]
        tracks[j] = Track(j, obs)
        landmarks[j] = pts[j].copy()
    model = ReconstructionModel(cameras=cameras, tracks=tracks, landmarks=landmarks)
    return frames, model, pts


def test_rigid_ba_noiseless_recovers_exactly():
    frames, model, pts = stereo_rig_setup()
    truth = [f.pose.copy() for f in frames]
    out = rigid_bundle_adjust(frames, model)
    for f, want in zip(frames, truth):
        assert np.allclose(f.pose.t, want.t, atol=1e-9)
    assert out.flagged_images == set()


def test_rigid_ba_removes_frame_perturbation():
    frames, model, pts = stereo_rig_setup()
    truth_t = frames[2].pose.t.copy()
    truth_q = frames[2].pose.q.copy()
    bad = Pose(t=frames[2].pose.t + [0.05, 0.0, 0.0],
               q=rotvec_to_quat([0, 0, math.radians(1.0)]))
    frames[2].pose = Pose(t=bad.t, q=(Pose(q=frames[2].pose.q).compose(Pose(q=bad.q))).q)
    for iid, rel in frames[2].members.items():
        model.cameras[iid] = Camera(frames[2].pose.compose(rel), INTR)
    out = rigid_bundle_adjust(frames, model)
    assert np.linalg.norm(frames[2].pose.t - truth_t) < 1e-4
    dq = min(np.linalg.norm(frames[2].pose.q - truth_q),
             np.linalg.norm(frames[2].pose.q + truth_q))
    assert dq < math.radians(0.01)


def test_rigid_parameter_count():
    frames, model, pts = stereo_rig_setup(n_frames=6, n_pts=20)
    # rigid: 6 per frame + 3 per landmark; ordinary would use 6 per camera
    assert 6 * len(frames) + 3 * len(model.landmarks) == 36 + 60
    assert 6 * len(model.cameras) == 72  # twice the rigid pose budget


def test_rigid_single_camera_per_frame_equals_ordinary():
    model, pts = make_model(n_cams=3, n_pts=10, pixel_noise=0.7, seed=9)
    frames = [RigFrame(float(k), model.cameras[iid].pose.copy(), {iid: Pose()})
              for k, iid in enumerate(sorted(model.cameras))]
    out_o = bundle_adjust(model)
    out_r = rigid_bundle_adjust(frames, model.copy())
    assert abs(out_o.cost_history[-1] - out_r.cost_history[-1]) < 1e-8
    for iid in out_o.cameras:
        assert np.allclose(out_o.cameras[iid].pose.t, out_r.cameras[iid].pose.t, atol=1e-8)
    for j in out_o.landmarks:
        assert np.allclose(out_o.landmarks[j], out_r.landmarks[j], atol=1e-8)


def test_rigid_missing_assignment():
    frames, model, _ = stereo_rig_setup()
    del frames[0].members["f0_L"]
    from drivemap.errors import MissingRigError
    with pytest.raises(MissingRigError):
        rigid_bundle_adjust(frames, model)


# ------------------------------------------------------------- iterative BA

def test_iterative_ba_all_inliers_stops_first_iteration():
    model, _ = make_model(n_cams=4, n_pts=15)
    out, stats = iterative_ba(model)
    assert len(stats.iterations) == 1
    assert stats.iterations[0].filtered == 0
    assert stats.iterations[0].ratio == 0.0


def test_iterative_ba_threshold_one_runs_single_iteration():
    model, _ = make_model(pixel_noise=1.0, seed=2)
    cfg = SfmConfig(max_refinement_change=1.0)
    _, stats = iterative_ba(model, cfg)
    assert len(stats.iterations) == 1


def test_iterative_ba_removes_injected_outliers():
    rng = np.random.default_rng(8)
    model, pts = make_model(n_cams=6, n_pts=40, pixel_noise=0.5, seed=8)
    all_obs = [(tid, k) for tid, trk in model.tracks.items()
               for k in range(len(trk.observations))]
    n_out = int(0.1 * len(all_obs))
    chosen = rng.choice(len(all_obs), size=n_out, replace=False)
    outliers = set()
    for c in chosen:
        tid, k = all_obs[c]
        o = model.tracks[tid].observations[k]
        o.pixel = np.array([rng.uniform(0, 640), rng.uniform(0, 480)])
        outliers.add((o.image_id, tid))
    out, stats = iterative_ba(model)
    assert len(stats.iterations) <= 5
    remaining = {(o.image_id, tid) for tid, trk in out.tracks.items()
                 for o in trk.observations}
    assert not (outliers & remaining), "all injected outliers must be removed"
    assert out.mean_reprojection_error() < 1.0
    assert all(0.0 <= s.ratio <= 1.0 for s in stats.iterations)
    # non-increasing mean error, up to solver-precision wobble at the plateau
    errs = stats.mean_errors
    assert all(b <= a + 1e-6 for a, b in zip(errs, errs[1:]))


def test_iterative_ba_empty_model():
    model, _ = make_model(n_cams=2, n_pts=3)
    for trk in model.tracks.values():  # identical cameras: no parallax anywhere
        for o in trk.observations:
            o.pixel = o.pixel + np.array([300.0, 300.0])
    cfg = SfmConfig(triangulation_gate_px=0.5, filter_gate_px=0.01)
    with pytest.raises(EmptyModelError):
        iterative_ba(model, cfg)


# --------------------------------------------------- odometry initialization

def body_traj(n=5, step=1.0):
    nodes = [StateNode(float(i), Pose.from_rt(FWD, [i * step, 0, 0])) for i in range(n)]
    return FusedTrajectory(nodes=nodes, final_cost=0.0, iterations=0)


def test_init_cameras_identity_extrinsic():
    rig = RigCalibration({"c0": Pose()}, reference="c0")
    traj = body_traj()
    cams = init_cameras_from_odometry(traj, rig, [ImageMeta("i0", 1.5, "c0")],
                                      {"c0": INTR})
    assert np.allclose(cams["i0"].pose.t, [1.5, 0, 0])


def test_init_cameras_forward_offset():
    # 1 m forward offset in the body(=reference camera) frame: body z is world +x
    rig = RigCalibration({"c0": Pose(), "c1": Pose(t=[0, 0, 1.0])}, reference="c0")
    traj = body_traj()
    cams = init_cameras_from_odometry(traj, rig, [ImageMeta("i1", 0.0, "c1")],
                                      {"c0": INTR, "c1": INTR})
    assert np.allclose(cams["i1"].pose.t, [1.0, 0, 0], atol=1e-12)


def test_init_cameras_timestamp_tolerance():
    rig = RigCalibration({"c0": Pose()}, reference="c0")
    traj = body_traj()
    cams = init_cameras_from_odometry(traj, rig, [ImageMeta("ok", 4.03, "c0")],
                                      {"c0": INTR})
    assert np.allclose(cams["ok"].pose.t, [4.0, 0, 0])
    with pytest.raises(OutOfRangeError):
        init_cameras_from_odometry(traj, rig, [ImageMeta("bad", 4.05, "c0")],
                                   {"c0": INTR})


# ---------------------------------------------------------- clip + merging

def clip_inputs(seed=0, pixel_noise=0.0, stationary=False, n_body=6):
    rng = np.random.default_rng(seed)
    step = 0.0 if stationary else 2.0
    nodes = [StateNode(float(i), Pose.from_rt(FWD, [i * step, 0, 0])) for i in range(n_body)]
    traj = FusedTrajectory(nodes=nodes, final_cost=0.0, iterations=0)
    rig = RigCalibration({"c0": Pose()}, reference="c0")
    images = [ImageMeta(f"s{seed}_i{i}", float(i), "c0") for i in range(n_body)]
    cams = {m.image_id: Camera(rig.camera_pose(nodes[i].pose, "c0"), INTR)
            for i, m in enumerate(images)}
    # lateral offsets bounded away from the motion axis so forward motion
    # yields usable parallax for every point
    lat = rng.uniform(1.5, 5.0, 30) * rng.choice([-1.0, 1.0], 30)
    pts = np.stack([rng.uniform(4, 14, 30) + (n_body - 1) * step,
                    lat, rng.uniform(-2, 2, 30)], axis=1)
    tracks = []
    for j, X in enumerate(pts):
        obs = []
        for m in images:
            cam = cams[m.image_id]
            p = cam.pose.rotation().T @ (X - cam.pose.t)
            if p[2] <= 1.0:
                continue
            u = INTR.fx * p[0] / p[2] + INTR.cx
            v = INTR.fy * p[1] / p[2] + INTR.cy
            if 0 <= u < INTR.width and 0 <= v < INTR.height:
                obs.append(Observation(m.image_id, j,
                                       np.array([u, v]) + rng.normal(scale=pixel_noise, size=2)))
        if len(obs) >= 2:
            tracks.append(Track(j, obs))
    return traj, rig, images, tracks, pts


def test_reconstruct_clip_noiseless():
    traj, rig, images, tracks, pts = clip_inputs()
    model = reconstruct_clip(traj, rig, {"c0": INTR}, images, tracks)
    assert len(model.landmarks) == len(tracks)
    for tid, X in model.landmarks.items():
        assert np.linalg.norm(X - pts[tid]) < 1e-4


def test_reconstruct_clip_noise_floor():
    traj, rig, images, tracks, _ = clip_inputs(seed=4, pixel_noise=0.5)
    model = reconstruct_clip(traj, rig, {"c0": INTR}, images, tracks)
    assert model.mean_reprojection_error() <= 1.0


def test_reconstruct_stationary_clip_warns():
    traj, rig, images, tracks, _ = clip_inputs(stationary=True)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        model = reconstruct_clip(traj, rig, {"c0": INTR}, images, tracks)
    assert any(issubclass(w.category, StationaryClipWarning) for w in caught)
    assert len(model.landmarks) == 0


def test_merge_duplicate_clip_matches_single():
    traj, rig, images, tracks, pts = clip_inputs()
    m1 = reconstruct_clip(traj, rig, {"c0": INTR}, images, tracks)
    # a second copy of the same clip with renamed images and offset track ids
    images2 = [ImageMeta(m.image_id.replace("s0", "s9"), m.timestamp, m.camera_name)
               for m in images]
    tracks2 = [Track(t.track_id + 1000,
                     [Observation(o.image_id.replace("s0", "s9"), t.track_id + 1000,
                                  o.pixel.copy()) for o in t.observations])
               for t in tracks]
    m2 = reconstruct_clip(traj, rig, {"c0": INTR}, images2, tracks2)
    cross = [[t.track_id, t.track_id + 1000] for t in tracks]
    merged = merge_models([m1, m2], cross_pairs=set(), cross_tracks=cross)
    assert len(merged.landmarks) >= len(m1.landmarks)
    for tid, X in m1.landmarks.items():
        assert np.linalg.norm(merged.landmarks[tid] - X) < 1e-4


def test_merge_requires_links():
    traj, rig, images, tracks, _ = clip_inputs()
    m1 = reconstruct_clip(traj, rig, {"c0": INTR}, images, tracks)
    with pytest.raises(DisjointModelsError):
        merge_models([m1], set(), [], MergeConfig(require_links=True))
