import numpy as np
import pytest

from mion import body, camera, pncc, synth
from mion.errors import InvalidDims


class TestRenderRgb:
    def test_behind_camera_pure_background(self, toy_model, desk_intrinsics):
        mesh = body.forward(toy_model, body.PoseParams.zero(16), body.ShapeParams.zero(8))
        img = synth.render_rgb(mesh, desk_intrinsics, np.array([0.0, 0.0, -99.0]),
                               texture_seed=1, bg_seed=2, h=64, w=64)
        bg = synth._background(64, 64, 2)
        assert np.array_equal(img, bg)

    def test_deterministic(self, toy_model, desk_intrinsics):
        mesh = body.forward(toy_model, body.PoseParams.zero(16), body.ShapeParams.zero(8))
        t = np.array([0.0, 0.0, 45.0])
        a = synth.render_rgb(mesh, desk_intrinsics, t, 7, 8, 64, 64)
        b = synth.render_rgb(mesh, desk_intrinsics, t, 7, 8, 64, 64)
        assert np.array_equal(a, b)

    def test_mask_matches_pncc_nonzero(self, toy_model, desk_intrinsics, rng):
        pose = body.PoseParams(global_orient=np.array([0.0, 0.7, 0.1]),
                               joints=rng.normal(size=(15, 3)) * 0.3)
        mesh = body.forward(toy_model, pose, body.ShapeParams.zero(8))
        t = np.array([0.05, -0.1, 44.0])
        _, mask = synth.render_rgb(mesh, desk_intrinsics, t, 3, 4, 112, 112,
                                   return_mask=True)
        colors = pncc.ncc(toy_model.template)
        pmap = pncc.render_pncc(mesh, desk_intrinsics, t, colors, 112, 112)
        assert np.array_equal(mask, pmap.data.any(axis=2))

    def test_values_in_unit_range(self, labeled_sample):
        img = labeled_sample.image
        assert img.min() >= 0.0 and img.max() <= 1.0


class TestGenDataset:
    def test_noiseless_keypoints_exact(self, toy_model, sampler, desk_intrinsics):
        cfg = synth.SynthConfig(image_hw=112, intrinsics=desk_intrinsics)
        s = synth.gen_sample(toy_model, sampler, cfg, seed=3, index=5, with_image=False)
        clean = camera.project(s.gt.j3d, desk_intrinsics, s.gt.translation)
        assert np.array_equal(s.j2d, clean)
        assert np.array_equal(s.conf, np.ones(14))

    def test_gt_consistency_invariant(self, toy_model, sampler, desk_intrinsics):
        cfg = synth.SynthConfig(image_hw=112, intrinsics=desk_intrinsics)
        for i in range(10):
            s = synth.gen_sample(toy_model, sampler, cfg, seed=8, index=i, with_image=False)
            j = body.regress_joints(toy_model, body.forward(toy_model, s.gt.pose, s.gt.shape))
            proj = camera.project(j, desk_intrinsics, s.gt.translation)
            assert np.abs(proj - s.j2d).max() < 0.5

    def test_full_dropout(self, toy_model, sampler, desk_intrinsics):
        cfg = synth.SynthConfig(image_hw=112, intrinsics=desk_intrinsics,
                                noise=synth.NoiseConfig(dropout_prob=1.0))
        s = synth.gen_sample(toy_model, sampler, cfg, seed=3, index=0, with_image=False)
        assert np.array_equal(s.conf, np.zeros(14))

    def test_noise_rms(self, toy_model, sampler, desk_intrinsics):
        cfg = synth.SynthConfig(image_hw=112, intrinsics=desk_intrinsics,
                                noise=synth.NoiseConfig(j2d_sigma=2.0))
        devs = []
        for i in range(400):
            s = synth.gen_sample(toy_model, sampler, cfg, seed=21, index=i, with_image=False)
            clean = camera.project(s.gt.j3d, desk_intrinsics, s.gt.translation)
            devs.append(s.j2d - clean)
        rms = float(np.sqrt(np.mean(np.concatenate(devs) ** 2)))
        assert abs(rms - 2.0) < 0.2

    def test_pure_function_of_seed(self, toy_model, sampler, synth_cfg):
        a = synth.gen_dataset(toy_model, sampler, 3, seed=9, cfg=synth_cfg)
        b = synth.gen_dataset(toy_model, sampler, 3, seed=9, cfg=synth_cfg)
        for x, y in zip(a, b):
            assert np.array_equal(x.image, y.image)
            assert np.array_equal(x.j2d, y.j2d)

    def test_count_validation(self, toy_model, sampler):
        with pytest.raises(InvalidDims):
            synth.gen_dataset(toy_model, sampler, 0, seed=1)

    def test_bodies_fit_in_frame(self, toy_model, sampler, synth_cfg):
        samples = synth.gen_dataset(toy_model, sampler, 12, seed=31, cfg=synth_cfg,
                                    with_images=False)
        for s in samples:
            clean = camera.project(s.gt.j3d, synth_cfg.intrinsics, s.gt.translation)
            assert clean.min() > -15 and clean.max() < 112 + 15


class TestDatasetIO:
    def test_roundtrip(self, tmp_path, toy_model, sampler, synth_cfg):
        samples = synth.gen_dataset(toy_model, sampler, 3, seed=13, cfg=synth_cfg)
        out = tmp_path / "ds"
        synth.save_dataset(samples, out, manifest={"seed": 13, "count": 3})
        back = synth.load_dataset(out, toy_model)
        assert len(back) == 3
        for orig, rec in zip(samples, back):
            assert np.array_equal(rec.j2d, orig.j2d)
            assert np.array_equal(rec.conf, orig.conf)
            assert np.allclose(rec.gt.j3d, orig.gt.j3d)
            # images survive 8-bit quantization
            assert np.abs(rec.image - orig.image).max() <= 0.5 / 255 + 1e-12
            mesh = body.forward(toy_model, rec.gt.pose, rec.gt.shape)
            assert np.allclose(mesh.vertices, orig.gt.mesh.vertices, atol=1e-9)

    def test_byte_identical_save(self, tmp_path, toy_model, sampler, synth_cfg):
        samples = synth.gen_dataset(toy_model, sampler, 2, seed=13, cfg=synth_cfg)
        d1, d2 = tmp_path / "a", tmp_path / "b"
        synth.save_dataset(samples, d1, manifest={"seed": 13})
        synth.save_dataset(samples, d2, manifest={"seed": 13})
        assert (d1 / "labels.jsonl").read_bytes() == (d2 / "labels.jsonl").read_bytes()
        assert (d1 / "sample_00000.ppm").read_bytes() == (d2 / "sample_00000.ppm").read_bytes()
