import numpy as np
import pytest

from mion import body, cen, geometry, mrt, nn, pipeline, pool, synth
from mion.errors import DegenerateCloud, ShapeMismatch


@pytest.fixture(scope="module")
def tiny_pipeline(toy_model, small_pool, desk_intrinsics):
    mrt_cfg = mrt.MrtConfig.desk()
    cen_cfg = cen.CenConfig(num_vertices=toy_model.num_vertices,
                            intrinsics=desk_intrinsics.scaled(0.5))
    mrt_params = {n: nn.Tensor(t.data, requires_grad=False)
                  for n, t in mrt.init_mrt_params(mrt_cfg, seed=0).items()}
    cen_params = {n: nn.Tensor(t.data, requires_grad=False)
                  for n, t in cen.init_cen_params(cen_cfg, seed=0).items()}
    return pipeline.Pipeline(
        model=toy_model, pool=small_pool, mrt_params=mrt_params, mrt_cfg=mrt_cfg,
        cen_params=cen_params, cen_cfg=cen_cfg, intr=desk_intrinsics,
        threshold=800.0, n_branches=3)


class TestMetrics:
    def test_mpjpe_identical(self, rng):
        j = rng.normal(size=(14, 3))
        assert pipeline.mpjpe(j, j) == 0.0

    def test_mpjpe_translation_invariant(self, rng):
        j = rng.normal(size=(14, 3))
        assert pipeline.mpjpe(j + np.array([1.0, -2.0, 3.0]), j) < 1e-12

    def test_mpjpe_single_displaced_joint(self, rng):
        gt = rng.normal(size=(14, 3))
        pred = gt.copy()
        pred[7, 0] += 0.05  # not a root joint
        got = pipeline.mpjpe(pred, gt, root=(2, 3))
        assert abs(got - 0.05 / 14) < 1e-12

    def test_pa_removes_similarity(self, rng):
        gt = rng.normal(size=(14, 3))
        r = geometry.rodrigues(rng.normal(size=3))
        pred = 1.7 * gt @ r.T + np.array([0.3, 0.1, -0.5])
        assert pipeline.pa_mpjpe(pred, gt) < 1e-9

    def test_pa_never_above_mpjpe(self, rng):
        for _ in range(200):
            gt = rng.normal(size=(14, 3))
            pred = gt + rng.normal(size=(14, 3)) * 0.1
            root = (2, 3)
            assert pipeline.pa_mpjpe(pred, gt) <= pipeline.mpjpe(pred, gt, root=root) + 1e-12

    def test_pa_matches_independent_reimplementation(self, rng):
        for _ in range(20):
            gt = rng.normal(size=(14, 3))
            pred = gt + rng.normal(size=(14, 3)) * 0.2
            # reference: classic Umeyama via full SVD, then mean distance
            mx, my = pred.mean(0), gt.mean(0)
            xc, yc = pred - mx, gt - my
            cov = yc.T @ xc / len(pred)
            u, d, vt = np.linalg.svd(cov)
            sgn = np.sign(np.linalg.det(u) * np.linalg.det(vt))
            s3 = np.diag([1.0, 1.0, sgn])
            rot = u @ s3 @ vt
            scale = (d @ np.diag(s3)) .sum() / (xc ** 2).sum() * len(pred)
            aligned = scale * pred @ rot.T + (my - scale * rot @ mx)
            want = np.linalg.norm(aligned - gt, axis=1).mean()
            assert abs(pipeline.pa_mpjpe(pred, gt) - want) < 1e-9

    def test_joint_permutation_invariance(self, rng):
        gt = rng.normal(size=(14, 3))
        pred = gt + rng.normal(size=(14, 3)) * 0.1
        perm = rng.permutation(14)
        # permute root indices consistently
        inv = np.argsort(perm)
        assert abs(pipeline.mpjpe(pred, gt, root=(2, 3))
                   - pipeline.mpjpe(pred[perm], gt[perm],
                                    root=(int(inv[2]), int(inv[3])))) < 1e-12
        assert abs(pipeline.pa_mpjpe(pred, gt) - pipeline.pa_mpjpe(pred[perm], gt[perm])) < 1e-12

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeMismatch):
            pipeline.mpjpe(rng.normal(size=(14, 3)), rng.normal(size=(12, 3)))
        with pytest.raises(DegenerateCloud):
            pipeline.pa_mpjpe(np.ones((2, 3)), np.ones((2, 3)))


class TestInfer:
    def test_runs_and_reports(self, tiny_pipeline, labeled_sample):
        rec = tiny_pipeline.infer(labeled_sample)
        assert rec.mesh.vertices.shape == (432, 3)
        assert len(rec.diagnostics) == 3
        assert 0 <= rec.branch_index < 3
        assert all(d["cen_score"] is not None for d in rec.diagnostics)

    def test_deterministic_across_threads(self, tiny_pipeline, labeled_sample):
        rec1 = tiny_pipeline.infer(labeled_sample, threads=1)
        rec2 = tiny_pipeline.infer(labeled_sample, threads=3)
        assert rec1.branch_index == rec2.branch_index
        assert np.array_equal(rec1.pose.as_vector(), rec2.pose.as_vector())
        assert np.array_equal(rec1.mesh.vertices, rec2.mesh.vertices)

    def test_single_branch_equals_pure_refiner(self, tiny_pipeline, labeled_sample):
        solo = pipeline.Pipeline(
            model=tiny_pipeline.model, pool=tiny_pipeline.pool,
            mrt_params=tiny_pipeline.mrt_params, mrt_cfg=tiny_pipeline.mrt_cfg,
            cen_params=tiny_pipeline.cen_params, cen_cfg=tiny_pipeline.cen_cfg,
            intr=tiny_pipeline.intr, threshold=tiny_pipeline.threshold, n_branches=1)
        rec = solo.infer(labeled_sample)
        cands = solo.candidates(labeled_sample)
        direct = mrt.mrt_forward(labeled_sample.image, cands[0], solo.model,
                                 solo.mrt_params, solo.mrt_cfg, solo.colors)
        assert rec.branch_index == 0
        assert np.array_equal(rec.pose.as_vector(), direct.pose.as_vector())
        assert np.array_equal(rec.translation, direct.translation)

    def test_planted_candidate_low_loss(self, toy_model, small_pool, tiny_pipeline,
                                        desk_intrinsics):
        from mion import camera
        idx = 77
        t_true = np.array([0.0, 0.0, 46.0])
        j2d = camera.project(small_pool.joints_cache[idx].astype(np.float64),
                             desk_intrinsics, t_true)
        sample = synth.Sample(image=None, j2d=j2d, conf=np.ones(14))
        cands = tiny_pipeline.candidates(sample)
        assert cands[0].pool_index == idx
        assert cands[0].fit_loss < 1e-3


class TestAblation:
    def test_report_structure_and_oracle_bound(self, tiny_pipeline, toy_model, sampler,
                                               synth_cfg):
        samples = [synth.gen_sample(toy_model, sampler, synth_cfg, seed=60, index=i)
                   for i in range(3)]
        report = pipeline.run_ablation(tiny_pipeline, samples, branch_counts=(1, 2, 3),
                                       random_seeds=(1, 2))
        for n in (1, 2, 3):
            assert report["oracle"][n]["mpjpe"] <= report["cen"][n]["mpjpe"] + 1e-12
            assert report["oracle"][n]["mpjpe"] <= report["random"][n]["mpjpe"] + 1e-12
        assert report["cen"][1]["mpjpe"] == report["oracle"][1]["mpjpe"]
        text = pipeline.format_ablation(report)
        assert "oracle" in text

    def test_deterministic(self, tiny_pipeline, toy_model, sampler, synth_cfg):
        samples = [synth.gen_sample(toy_model, sampler, synth_cfg, seed=61, index=i)
                   for i in range(2)]
        r1 = pipeline.run_ablation(tiny_pipeline, samples, branch_counts=(1, 2),
                                   random_seeds=(7,))
        r2 = pipeline.run_ablation(tiny_pipeline, samples, branch_counts=(1, 2),
                                   random_seeds=(7,))
        assert r1 == r2


class TestConfig:
    def test_roundtrip(self, tmp_path):
        cfg = pipeline.PipelineConfig()
        cfg.threshold = 123.0
        path = tmp_path / "config.json"
        cfg.save(path)
        back = pipeline.PipelineConfig.load(path)
        assert back.threshold == 123.0
        assert back.mrt == cfg.mrt
        assert back.cen.to_dict() == cfg.cen.to_dict()

    def test_bad_config(self, tmp_path):
        from mion.errors import ArtifactFormatError
        path = tmp_path / "bad.json"
        path.write_text("not json{")
        with pytest.raises(ArtifactFormatError):
            pipeline.PipelineConfig.load(path)
