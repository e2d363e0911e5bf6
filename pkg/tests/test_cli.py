import json

import numpy as np
import pytest

from mion import body, camera, cen, mrt, nn, pipeline, pool, synth
from mion.cli import main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A small but complete artifact directory for CLI runs."""
    root = tmp_path_factory.mktemp("cliws")
    cfg = pipeline.PipelineConfig()
    cfg.n_branches = 2
    cfg.pool = {"p": 16, "o": 4, "seed": 3, "motions": 300}
    cfg.body_model_path = str(root / "body_model.json")
    cfg.pool_path = str(root / "pool.bin")
    cfg.mrt_checkpoint = str(root / "mrt.ckpt")
    cfg.cen_checkpoint = str(root / "cen.ckpt")

    model = body.make_toy_model(7)
    model.save(cfg.body_model_path)
    sampler = cfg.make_sampler(model)
    cp = pool.build_pool(sampler.motions(300, seed=3), 16, 4, 3, model)
    cp.save(cfg.pool_path)
    nn.save_checkpoint(mrt.init_mrt_params(cfg.mrt, seed=0), cfg.mrt_checkpoint)
    cfg.cen.num_vertices = model.num_vertices
    cfg.cen.intrinsics = cfg.intrinsics.scaled(cfg.cen.input_hw / cfg.image_hw)
    nn.save_checkpoint(cen.init_cen_params(cfg.cen, seed=0), cfg.cen_checkpoint)
    cfg.save(root / "config.json")

    samples = synth.gen_dataset(model, sampler, 2, seed=5, cfg=cfg.make_synth_config())
    synth.save_dataset(samples, root / "data", manifest={"seed": 5})
    return root


def run(workdir, *argv):
    return main(["--config", str(workdir / "config.json"), *argv])


class TestCli:
    def test_pool_build(self, workdir, tmp_path):
        out = tmp_path / "pool.bin"
        assert run(workdir, "pool", "build", "--count", "120", "--p", "8",
                   "--o", "2", "--out", str(out)) == 0
        assert pool.CandidatePool.load(out).size == 16

    def test_pool_fit_select_pncc(self, workdir, tmp_path):
        cp = pool.CandidatePool.load(workdir / "pool.bin")
        intr = camera.Intrinsics(2500.0, 56.0, 56.0)
        j2d = camera.project(cp.joints_cache[5].astype(np.float64), intr,
                             np.array([0.0, 0.0, 45.0]))
        kp = tmp_path / "kp.json"
        kp.write_text(json.dumps({"j2d": j2d.tolist()}))
        fits = tmp_path / "fits.json"
        assert run(workdir, "pool", "fit", "--pool", str(workdir / "pool.bin"),
                   "--keypoints", str(kp), "--out", str(fits)) == 0
        cands = tmp_path / "cands.json"
        assert run(workdir, "select", "--pool", str(workdir / "pool.bin"),
                   "--fits", str(fits), "--branches", "2", "--out", str(cands)) == 0
        sel = pool.load_candidates(cands)
        assert len(sel) == 2
        raster = tmp_path / "c.pncc"
        ppm = tmp_path / "c.ppm"
        assert run(workdir, "pncc", "render", "--candidates", str(cands),
                   "--out", str(raster), "--ppm", str(ppm), "--hw", "28") == 0
        from mion.pncc import PnccMap
        assert PnccMap.load(raster).data.shape == (28, 28, 3)
        assert ppm.exists()

    def test_synth_gen_and_infer_eval(self, workdir, tmp_path):
        out = tmp_path / "ds"
        assert run(workdir, "synth", "gen", "--count", "2", "--out", str(out)) == 0
        rec = tmp_path / "rec.json"
        assert run(workdir, "infer", "--data", str(out), "--index", "0",
                   "--out", str(rec)) == 0
        doc = json.loads(rec.read_text())
        assert set(doc) >= {"pose", "orient", "shape", "translation", "branch_index"}
        rep = tmp_path / "eval.json"
        assert run(workdir, "eval", "--data", str(out), "--out", str(rep)) == 0
        assert "mpjpe" in json.loads(rep.read_text())

    def test_train_commands(self, workdir, tmp_path):
        ck = tmp_path / "mrt2.ckpt"
        assert run(workdir, "train", "mrt", "--data", str(workdir / "data"),
                   "--epochs", "1", "--out", str(ck)) == 0
        assert nn.load_checkpoint(ck)
        ck2 = tmp_path / "cen2.ckpt"
        assert run(workdir, "train", "cen", "--data", str(workdir / "data"),
                   "--epochs", "1", "--pairs-per-sample", "2", "--out", str(ck2)) == 0
        assert nn.load_checkpoint(ck2)

    def test_ablate(self, workdir, tmp_path):
        rep = tmp_path / "ablate.json"
        assert run(workdir, "ablate", "--data", str(workdir / "data"),
                   "--out", str(rep)) == 0
        doc = json.loads(rep.read_text())
        assert "oracle" in doc and "cen" in doc and "random" in doc

    def test_exit_code_invalid_input(self, workdir, tmp_path):
        missing = tmp_path / "nope.json"
        assert run(workdir, "infer", "--data", str(tmp_path / "absent"),
                   "--out", str(missing)) == 2

    def test_exit_code_artifact_error(self, workdir, tmp_path):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"JUNKJUNKJUNK")
        kp = tmp_path / "kp.json"
        kp.write_text(json.dumps({"j2d": [[0, 0]] * 14}))
        assert run(workdir, "pool", "fit", "--pool", str(bad),
                   "--keypoints", str(kp), "--out", str(tmp_path / "x.json")) == 3

    def test_bad_args_exit_2(self):
        assert main(["definitely-not-a-command"]) == 2
