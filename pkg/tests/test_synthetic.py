import numpy as np
import pytest

from drivemap.errors import InvalidSpecError
from drivemap.evaluation import EvalFrame, compute_sre
from drivemap.io import sha256_file
from drivemap.synthetic import (SceneSpec, default_scene_spec, generate_scene,
                                load_bundle, noisy_scene_spec, save_bundle)


@pytest.fixture(scope="module")
def clean_bundle():
    return generate_scene(default_scene_spec(n_ground_points=600))


def manifest_of(dir_path):
    return {str(p.relative_to(dir_path)): sha256_file(p)
            for p in sorted(dir_path.rglob("*")) if p.is_file()}


def test_determinism_byte_identical(tmp_path):
    spec = default_scene_spec(n_ground_points=300, render_images=False)
    a = generate_scene(spec)
    b = generate_scene(default_scene_spec(n_ground_points=300, render_images=False))
    save_bundle(a, tmp_path / "a")
    save_bundle(b, tmp_path / "b")
    ma = manifest_of(tmp_path / "a")
    mb = manifest_of(tmp_path / "b")
    assert ma == mb


def test_zero_noise_observations_reproject_exactly(clean_bundle):
    b = clean_bundle
    checked = 0
    for cb in b.clips:
        for trk in cb.tracks[::7]:
            X = b.gt_point_of_track(trk.track_id)
            for o in trk.observations:
                cam = b.gt_cameras[o.image_id]
                p = cam.pose.rotation().T @ (X - cam.pose.t)
                u = cam.intrinsics.fx * p[0] / p[2] + cam.intrinsics.cx
                v = cam.intrinsics.fy * p[1] / p[2] + cam.intrinsics.cy
                assert np.hypot(u - o.pixel[0], v - o.pixel[1]) < 1e-9
                checked += 1
    assert checked > 100


def test_outlier_labels_binomial_bound():
    spec = noisy_scene_spec(seed=3, render_masks=False, render_images=False)
    spec.outlier_fraction = 0.1
    b = generate_scene(spec)
    n_obs = sum(len(t.observations) for cb in b.clips for t in cb.tracks)
    assert n_obs >= 10_000
    frac = len(b.outlier_labels) / n_obs
    assert 0.09 <= frac <= 0.11  # 3-sigma binomial band around 0.1


def test_invalid_spec():
    spec = default_scene_spec()
    spec.outlier_fraction = 1.5
    with pytest.raises(InvalidSpecError):
        generate_scene(spec)
    spec = default_scene_spec()
    spec.clips[0].end_s = spec.clips[0].start_s
    with pytest.raises(InvalidSpecError):
        generate_scene(spec)


def test_bundle_roundtrip_lossless(tmp_path):
    spec = default_scene_spec(n_ground_points=300)
    bundle = generate_scene(spec)
    save_bundle(bundle, tmp_path / "one")
    again = load_bundle(tmp_path / "one")
    save_bundle(again, tmp_path / "two")
    assert manifest_of(tmp_path / "one") == manifest_of(tmp_path / "two")
    assert again.spec == spec
    assert len(again.clips[0].tracks) == len(bundle.clips[0].tracks)
    assert again.outlier_labels == bundle.outlier_labels


def test_gt_map_against_gt_masks_closes(clean_bundle):
    # the whole-toolkit self-consistency anchor: ground-truth map projected
    # into ground-truth cameras matches the rendered mask skeletons
    b = clean_bundle
    frames = [EvalFrame(iid, b.gt_cameras[iid].pose, b.gt_cameras[iid].intrinsics,
                        b.masks[iid]) for iid in b.eval_frames]
    report = compute_sre(b.vector_map, frames, b.eval_crop(), b.spec.match_gate_px)
    assert report.sre_px <= 0.5
    assert report.precision == 1.0
    assert report.recall == 1.0


def test_scene_spec_roundtrip():
    spec = noisy_scene_spec(seed=9)
    again = SceneSpec.from_dict(spec.to_dict())
    assert again == spec
