import numpy as np
import pytest

import oracles
from mion import body, camera, pool
from mion.errors import ArtifactFormatError, EmptyPool, InvalidK


class TestKmeans:
    def test_saturation_returns_data(self, rng):
        data = rng.normal(size=(12, 4))
        cents = pool.kmeans(data, 12, seed=0)
        assert sorted(map(tuple, cents)) == sorted(map(tuple, data))

    def test_two_blobs(self, rng):
        sigma = 0.3
        a = rng.normal(size=(200, 3)) * sigma + np.array([5.0, 0, 0])
        b = rng.normal(size=(200, 3)) * sigma - np.array([5.0, 0, 0])
        data = np.concatenate([a, b])
        cents = pool.kmeans(data, 2, seed=1)
        cents = cents[np.argsort(cents[:, 0])]
        assert np.abs(cents[1] - a.mean(axis=0)).max() < 0.1 * sigma
        assert np.abs(cents[0] - b.mean(axis=0)).max() < 0.1 * sigma

    def test_deterministic(self, rng):
        data = rng.normal(size=(100, 5))
        c1 = pool.kmeans(data, 7, seed=42)
        c2 = pool.kmeans(data, 7, seed=42)
        assert np.array_equal(c1, c2)

    def test_invalid_k(self, rng):
        with pytest.raises(InvalidK):
            pool.kmeans(rng.normal(size=(5, 2)), 6, seed=0)
        with pytest.raises(InvalidK):
            pool.kmeans(rng.normal(size=(5, 2)), 0, seed=0)

    def test_objective_nonincreasing(self, rng):
        # every Lloyd iteration asserts monotonicity internally; just run one
        data = np.concatenate([rng.normal(size=(80, 3)) + c for c in ([0, 0, 0], [4, 4, 0])])
        pool.kmeans(data, 5, seed=3, max_iter=100)

    def test_degenerate_single_point(self):
        data = np.tile(np.array([1.0, 2.0]), (20, 1))
        cents = pool.kmeans(data, 3, seed=0)
        assert np.allclose(cents, [1.0, 2.0])


class TestBuildPool:
    def test_size_arithmetic(self, small_pool):
        assert small_pool.size == 32 * 8
        assert small_pool.joints_cache.shape == (256, 14, 3)

    def test_cache_recomputable(self, toy_model, small_pool):
        from mion.geometry import rodrigues
        for idx in (0, 37, 255):
            p = small_pool.member_pose(idx)
            mesh = body.forward(toy_model, p, body.ShapeParams.zero(8))
            j = body.regress_joints(toy_model, mesh)
            assert np.abs(j - small_pool.joints_cache[idx]).max() < 1e-6

    def test_degenerate_motions(self, toy_model, sampler):
        one = sampler.motions(1, seed=5)
        motions = pool.MotionSet(poses=np.tile(one.poses, (40, 1)),
                                 orients=np.tile(one.orients, (40, 1)))
        cp = pool.build_pool(motions, p=4, o=2, seed=0, model=toy_model)
        assert np.allclose(cp.pose_centroids, one.poses[0])

    def test_file_roundtrip(self, tmp_path, small_pool):
        path = tmp_path / "pool.bin"
        small_pool.save(path)
        back = pool.CandidatePool.load(path)
        back.save(tmp_path / "pool2.bin")
        assert path.read_bytes() == (tmp_path / "pool2.bin").read_bytes()
        assert np.array_equal(back.joints_cache, small_pool.joints_cache)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOTAPOOL" + b"\0" * 40)
        with pytest.raises(ArtifactFormatError):
            pool.CandidatePool.load(path)


class TestFitAll:
    def test_planted_member_wins(self, small_pool, desk_intrinsics):
        idx = 101
        t_true = np.array([0.1, -0.2, 45.0])
        j2d = camera.project(small_pool.joints_cache[idx].astype(np.float64),
                             desk_intrinsics, t_true)
        fits = pool.fit_all(small_pool, j2d, desk_intrinsics)
        assert int(np.argmin(fits.losses)) == idx
        assert fits.losses[idx] < 1e-6

    def test_thread_invariance(self, small_pool, desk_intrinsics, rng):
        j2d = rng.uniform(10, 100, size=(14, 2))
        conf = rng.uniform(0.5, 1.0, size=14)
        base = pool.fit_all(small_pool, j2d, desk_intrinsics, conf, threads=1)
        for w in (2, 3, 5):
            other = pool.fit_all(small_pool, j2d, desk_intrinsics, conf, threads=w)
            assert np.array_equal(base.translations, other.translations)
            assert np.array_equal(base.losses, other.losses)

    def test_zero_conf_vector(self, small_pool, desk_intrinsics):
        with pytest.warns(UserWarning):
            fits = pool.fit_all(small_pool, np.zeros((14, 2)), desk_intrinsics,
                                conf=np.zeros(14))
        assert np.array_equal(fits.losses, np.zeros(small_pool.size))

    def test_speed(self, small_pool, desk_intrinsics, rng):
        import time
        j2d = rng.uniform(10, 100, size=(14, 2))
        t0 = time.time()
        pool.fit_all(small_pool, j2d, desk_intrinsics)
        assert time.time() - t0 < 1.0


def plausible_j2d(cp, intr, rng, member=None, sigma=4.0):
    """Keypoints near a real pool member's projection, plus noise."""
    member = int(rng.integers(cp.size)) if member is None else member
    t = np.array([rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(42, 50)])
    clean = camera.project(cp.joints_cache[member].astype(np.float64), intr, t)
    return clean + rng.normal(size=clean.shape) * sigma


class TestSelectCandidates:
    def _vecs(self, cp):
        return np.stack([cp.member_pose_vector(i) for i in range(cp.size)])

    def test_single_branch_is_argmin(self, small_pool, desk_intrinsics, rng):
        j2d = plausible_j2d(small_pool, desk_intrinsics, rng)
        fits = pool.fit_all(small_pool, j2d, desk_intrinsics)
        sel = pool.select_candidates(fits, small_pool, threshold=np.inf, n_branches=1)
        assert len(sel) == 1
        assert sel[0].pool_index == int(np.argmin(fits.losses))

    def test_matches_bruteforce_oracle(self, small_pool, desk_intrinsics, rng):
        vecs = self._vecs(small_pool)
        for trial in range(5):
            j2d = plausible_j2d(small_pool, desk_intrinsics, rng)
            fits = pool.fit_all(small_pool, j2d, desk_intrinsics)
            thr = np.quantile(fits.losses[np.isfinite(fits.losses)], 0.2)
            sel = pool.select_candidates(fits, small_pool, threshold=thr, n_branches=6)
            oracle = oracles.brute_force_fps(vecs, fits.losses, thr, 6)
            assert [c.pool_index for c in sel] == oracle

    def test_all_under_threshold_when_enough(self, small_pool, desk_intrinsics, rng):
        j2d = plausible_j2d(small_pool, desk_intrinsics, rng)
        fits = pool.fit_all(small_pool, j2d, desk_intrinsics)
        thr = np.quantile(fits.losses[np.isfinite(fits.losses)], 0.5)
        sel = pool.select_candidates(fits, small_pool, threshold=thr, n_branches=5)
        assert len(sel) == 5
        assert all(c.fit_loss < thr for c in sel)

    def test_fallback_when_none_admissible(self, small_pool, desk_intrinsics, rng):
        j2d = plausible_j2d(small_pool, desk_intrinsics, rng)
        fits = pool.fit_all(small_pool, j2d, desk_intrinsics)
        sel = pool.select_candidates(fits, small_pool, threshold=0.0, n_branches=4)
        order = np.argsort(fits.losses, kind="stable")[:4]
        assert sorted(c.pool_index for c in sel) == sorted(int(i) for i in order)

    def test_identical_poses_stable_by_index(self, toy_model, sampler, desk_intrinsics):
        one = sampler.motions(1, seed=9)
        motions = pool.MotionSet(poses=np.tile(one.poses, (30, 1)),
                                 orients=np.tile(one.orients, (30, 1)))
        cp = pool.build_pool(motions, p=3, o=1, seed=0, model=toy_model)
        j2d = camera.project(cp.joints_cache[0].astype(np.float64), desk_intrinsics,
                             np.array([0.0, 0.0, 45.0]))
        fits = pool.fit_all(cp, j2d, desk_intrinsics)
        sel = pool.select_candidates(fits, cp, threshold=np.inf, n_branches=3)
        assert [c.pool_index for c in sel] == [0, 1, 2]

    def test_empty_pool(self, desk_intrinsics):
        cp = pool.CandidatePool(
            pose_centroids=np.zeros((0, 45)), orient_centroids=np.zeros((0, 3)),
            joints_cache=np.zeros((0, 14, 3), dtype=np.float32))
        fits = pool.FitBatch(np.zeros((0, 3)), np.zeros(0))
        with pytest.raises(EmptyPool):
            pool.select_candidates(fits, cp, threshold=10.0, n_branches=2)

    def test_candidate_json_roundtrip(self, tmp_path, small_pool, desk_intrinsics, rng):
        j2d = plausible_j2d(small_pool, desk_intrinsics, rng)
        fits = pool.fit_all(small_pool, j2d, desk_intrinsics)
        sel = pool.select_candidates(fits, small_pool, threshold=np.inf, n_branches=3)
        path = tmp_path / "cands.json"
        pool.save_candidates(sel, path)
        back = pool.load_candidates(path)
        assert len(back) == 3
        assert np.allclose(back[0].pose.as_vector(), sel[0].pose.as_vector())
        assert np.allclose(back[0].translation, sel[0].translation)


class TestMotions:
    def test_sampler_deterministic(self, sampler):
        a = sampler.motions(10, seed=4)
        b = sampler.motions(10, seed=4)
        assert np.array_equal(a.poses, b.poses)
        assert np.array_equal(a.orients, b.orients)

    def test_motion_file_roundtrip(self, tmp_path, sampler):
        import json
        ms = sampler.motions(5, seed=2)
        path = tmp_path / "motions.jsonl"
        lines = [json.dumps({"pose": p.tolist(), "orient": o.tolist()})
                 for p, o in zip(ms.poses, ms.orients)]
        path.write_text("\n".join(lines) + "\n")
        back = pool.load_motions(path)
        assert np.allclose(back.poses, ms.poses)
