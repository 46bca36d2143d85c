import numpy as np
import pytest

from dynslam.dataio import load_tum_sequence
from dynslam.errors import SceneSpecError
from dynslam.geometry import Intrinsics, PoseSE3
from dynslam.imageproc import bilinear_sample
from dynslam.synthetic import (
    SyntheticSceneSpec,
    generate_synthetic_sequence,
    make_sweep_spec,
    scene_spec_from_dict,
    trace_frame,
    write_synthetic_dataset,
)


def small_static_spec(**kw):
    kw.setdefault("n_frames", 3)
    kw.setdefault("width", 64)
    kw.setdefault("height", 48)
    kw.setdefault("focal", 60.0)
    return make_sweep_spec(**kw)


def small_dynamic_spec(**kw):
    kw.setdefault("sphere_radius", 0.3)
    return small_static_spec(**kw)


class TestTracing:
    def test_wall_depth_exact(self):
        # identity camera at the origin, back wall at z = 2.5: every pixel that
        # hits the back wall reads exactly 2.5 m of z-depth
        spec = small_static_spec(camera_start=(0, 0, 0), camera_end=(0, 0, 0), n_frames=1)
        tf = trace_frame(spec, PoseSE3.identity(), 0.0)
        h, w = tf.depth.shape
        center = tf.depth[h // 2, w // 2]
        assert center == pytest.approx(2.5, abs=1e-12)
        back_wall = tf.hit_axis == 2
        np.testing.assert_allclose(tf.depth[back_wall], 2.5, atol=1e-12)

    def test_offset_camera_depth(self):
        spec = small_static_spec(
            camera_start=(0, 0, 0.5), camera_end=(0, 0, 0.5), n_frames=1
        )
        tf = trace_frame(spec, spec.camera_poses[0], 0.0)
        h, w = tf.depth.shape
        assert tf.depth[h // 2, w // 2] == pytest.approx(2.0, abs=1e-12)

    def test_sphere_mask_is_hit_set(self):
        spec = small_dynamic_spec(
            n_frames=1,
            camera_start=(0, 0, -0.5), camera_end=(0, 0, -0.5),
            sphere_start=(0, 0, 1.2), sphere_end=(0, 0, 1.2),
        )
        tf = trace_frame(spec, spec.camera_poses[0], 0.0)
        assert tf.sphere_mask.any()
        # sphere pixels are strictly closer than the wall behind them
        assert (tf.depth[tf.sphere_mask] < 2.5).all()
        np.testing.assert_array_equal(tf.sphere_mask, tf.hit_axis == -1)
        # footprint is centered: center pixel hits the sphere
        h, w = tf.depth.shape
        assert tf.sphere_mask[h // 2, w // 2]

    def test_depth_positive_everywhere(self):
        spec = small_dynamic_spec(n_frames=2)
        for pose, t in zip(spec.camera_poses, spec.timestamps):
            tf = trace_frame(spec, pose, t)
            assert (tf.depth > 0).all()
            assert np.isfinite(tf.depth).all()


class TestFlow:
    def test_static_identical_poses_zero_flow(self):
        spec = small_static_spec(camera_start=(0, 0, 0), camera_end=(0, 0, 0))
        _, _, flows = generate_synthetic_sequence(spec)
        f = flows.get(0, 1)
        np.testing.assert_allclose(f.u, 0.0, atol=1e-9)
        np.testing.assert_allclose(f.v, 0.0, atol=1e-9)

    def test_warped_depth_matches_next_frame(self):
        # fronto-parallel back wall under pure x-translation: depth is constant
        # there, so gt-flow warping must reproduce it to well below 1e-6 m
        spec = small_static_spec(n_frames=2)
        seq, _, flows = generate_synthetic_sequence(spec)
        tf0 = trace_frame(spec, spec.camera_poses[0], 0.0)
        tf1 = trace_frame(spec, spec.camera_poses[1], spec.timestamps[1])
        f = flows.get(0, 1)
        h, w = tf0.depth.shape
        uu, vv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
        tgt = np.stack([uu + f.u, vv + f.v], axis=-1)
        sel = (tf0.hit_axis == 2) & (tf0.depth == 2.5 + 1.0)  # back wall at z-depth 3.5
        pts = tgt[sel].reshape(-1, 2)
        vals, _, inb = bilinear_sample(tf1.depth, pts)
        assert inb.sum() > 100
        np.testing.assert_allclose(vals[inb], tf0.depth[sel][inb], atol=1e-6)

    def test_sphere_pixels_follow_object(self):
        # static camera, moving sphere: flow inside the mask is nonzero,
        # flow on the walls is exactly zero
        spec = small_dynamic_spec(
            camera_start=(0, 0, -0.5), camera_end=(0, 0, -0.5), n_frames=3
        )
        _, masks, flows = generate_synthetic_sequence(spec)
        f = flows.get(0, 1)
        mag = np.hypot(f.u, f.v)
        assert mag[~masks[0]].max() < 1e-9
        assert np.median(mag[masks[0]]) > 0.5

    def test_keyframe_window_pairs_present(self):
        spec = small_static_spec(n_frames=11, kf_interval=5, mask_window=4)
        _, _, flows = generate_synthetic_sequence(spec)
        assert (5, 0) in flows.pairs
        assert (10, 5) in flows.pairs
        assert (10, 0) in flows.pairs
        assert (3, 4) in flows.pairs  # consecutive pairs still there


class TestSpecValidation:
    def test_camera_outside_room_rejected(self):
        with pytest.raises(SceneSpecError):
            make_sweep_spec(camera_start=(5.0, 0, 0), camera_end=(5.0, 0, 0))

    def test_negative_radius_rejected(self):
        K = Intrinsics(fx=60.0, fy=60.0, cx=31.5, cy=23.5, width=64, height=48)
        with pytest.raises(SceneSpecError):
            SyntheticSceneSpec(
                camera_poses=(PoseSE3.identity(),),
                timestamps=(0.0,),
                intrinsics=K,
                sphere_radius=-1.0,
            )

    def test_from_dict_defaults(self):
        spec = scene_spec_from_dict({})
        assert len(spec.camera_poses) == 50
        assert not spec.has_sphere

    def test_from_dict_sphere(self):
        spec = scene_spec_from_dict({"n_frames": 4, "sphere": {"radius": 0.25}})
        assert spec.has_sphere
        assert spec.sphere_radius == 0.25

    def test_from_dict_bad_value(self):
        with pytest.raises(SceneSpecError):
            scene_spec_from_dict({"n_frames": "many"})


class TestDatasetWriter:
    def test_reload_roundtrip(self, tmp_path):
        spec = small_dynamic_spec(n_frames=4)
        write_synthetic_dataset(spec, tmp_path)
        seq = load_tum_sequence(tmp_path, spec.intrinsics)
        assert len(seq) == 4
        assert len(seq.gt_trajectory) == 4
        assert (0, 1) in seq.flow_paths
        # 16-bit quantization bounds the depth error
        orig = generate_synthetic_sequence(spec)[0]
        err = np.abs(seq.frames[0].depth - orig.frames[0].depth).max()
        assert err <= 0.5 / spec.intrinsics.depth_scale + 1e-12

    def test_mask_count_matches_frames(self, tmp_path):
        spec = small_dynamic_spec(n_frames=3)
        write_synthetic_dataset(spec, tmp_path)
        assert len(list((tmp_path / "gt_masks").iterdir())) == 3

    def test_regeneration_bit_identical(self, tmp_path):
        spec = small_dynamic_spec(n_frames=3, depth_noise_std=0.002, color_noise_std=0.01)
        d1, d2 = tmp_path / "a", tmp_path / "b"
        write_synthetic_dataset(spec, d1)
        write_synthetic_dataset(spec, d2)
        for rel in sorted(p.relative_to(d1) for p in d1.rglob("*") if p.is_file()):
            assert (d1 / rel).read_bytes() == (d2 / rel).read_bytes(), rel

    def test_noise_is_per_frame_seeded(self):
        spec = small_static_spec(n_frames=2, depth_noise_std=0.01)
        seq1, _, _ = generate_synthetic_sequence(spec)
        seq2, _, _ = generate_synthetic_sequence(spec)
        np.testing.assert_array_equal(seq1.frames[0].depth, seq2.frames[0].depth)
        assert not np.array_equal(seq1.frames[0].depth, seq1.frames[1].depth)
