"""Desk-scale end-to-end experiment: build artifacts, train, evaluate.

Everything lands in one working directory with a config JSON tying the
artifacts together, so the CLI (and the acceptance suite) can re-run any
stage from the same state.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cen as cen_mod
from . import mrt as mrt_mod
from .body import BodyModel, make_toy_model
from .nn import params_from_arrays, save_checkpoint
from .pipeline import Pipeline, PipelineConfig
from .pncc import ncc
from .pool import CandidatePool, build_pool, fit_all, select_candidates
from .synth import Sample, gen_dataset, save_dataset


@dataclass
class ExperimentSizes:
    train_samples: int = 240
    test_samples: int = 100
    mrt_epochs: int = 30
    mrt_candidates_per_sample: int = 3
    mrt_batch: int = 12
    cen_pairs_per_sample: int = 8
    cen_epochs: int = 16
    cen_batch: int = 16


def stage1_branches(pipeline_cfg: PipelineConfig, pool: CandidatePool,
                    samples: list[Sample], n_branches: int | None = None) -> list:
    out = []
    for s in samples:
        fits = fit_all(pool, s.j2d, pipeline_cfg.intrinsics, s.conf)
        out.append(select_candidates(fits, pool, pipeline_cfg.threshold,
                                     n_branches or pipeline_cfg.n_branches))
    return out


def build_artifacts(workdir: str | Path, cfg: PipelineConfig | None = None,
                    sizes: ExperimentSizes | None = None, verbose: bool = False):
    """Model + pool + datasets + both trained networks, all deterministic.

    Returns (config, context dict) where the context holds the in-memory
    objects the caller may want to reuse (datasets, branches, pipeline).
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    cfg = cfg or PipelineConfig()
    sizes = sizes or ExperimentSizes()
    say = print if verbose else (lambda *_: None)
    t0 = time.time()

    cfg.body_model_path = str(workdir / "body_model.json")
    cfg.pool_path = str(workdir / "pool.bin")
    cfg.mrt_checkpoint = str(workdir / "mrt.ckpt")
    cfg.cen_checkpoint = str(workdir / "cen.ckpt")

    model = make_toy_model(cfg.body["seed"], cfg.body["v"], cfg.body["k"],
                           cfg.body["s"], cfg.body["n"])
    model.save(cfg.body_model_path)
    say(f"[{time.time()-t0:5.0f}s] body model")

    sampler = cfg.make_sampler(model)
    motions = sampler.motions(cfg.pool["motions"], seed=cfg.pool["seed"])
    pool = build_pool(motions, cfg.pool["p"], cfg.pool["o"], cfg.pool["seed"], model)
    pool.save(cfg.pool_path)
    say(f"[{time.time()-t0:5.0f}s] pool ({pool.size} members)")

    synth_cfg = cfg.make_synth_config()
    train = gen_dataset(model, sampler, sizes.train_samples, seed=cfg.seed + 100,
                        cfg=synth_cfg)
    test = gen_dataset(model, sampler, sizes.test_samples, seed=cfg.seed + 200,
                       cfg=synth_cfg)
    save_dataset(train, workdir / "train",
                 manifest={"seed": cfg.seed + 100, "count": sizes.train_samples,
                           "role": "train"})
    save_dataset(test, workdir / "test",
                 manifest={"seed": cfg.seed + 200, "count": sizes.test_samples,
                           "role": "test"})
    say(f"[{time.time()-t0:5.0f}s] datasets ({sizes.train_samples}+{sizes.test_samples})")

    branches = stage1_branches(cfg, pool, train)
    say(f"[{time.time()-t0:5.0f}s] stage-1 branches")

    mrt_tcfg = mrt_mod.MrtTrainConfig(
        epochs=sizes.mrt_epochs, batch_size=sizes.mrt_batch,
        candidates_per_sample=sizes.mrt_candidates_per_sample, seed=cfg.seed)
    mrt_arrays, _ = mrt_mod.train_mrt(train, branches, model, cfg.mrt, mrt_tcfg,
                                      log_path=workdir / "mrt_train.jsonl")
    save_checkpoint(mrt_arrays, cfg.mrt_checkpoint)
    say(f"[{time.time()-t0:5.0f}s] refiner trained")

    cfg.cen.num_vertices = model.num_vertices
    cfg.cen.intrinsics = cfg.intrinsics.scaled(cfg.cen.input_hw / cfg.image_hw)
    pair_cfg = cen_mod.PairConfig(image_hw=cfg.image_hw)
    colors = ncc(model.template)
    inputs, targets = [], []
    for i, brs in enumerate(branches):
        if len(brs) < 2:
            continue
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xCE11, i]))
        for _ in range(sizes.cen_pairs_per_sample):
            x, t = cen_mod.make_training_pair(brs, model, cfg.cen, rng, pair_cfg, colors)
            inputs.append(x.astype(np.float32))
            targets.append(t.astype(np.float32))
    cen_tcfg = cen_mod.CenTrainConfig(epochs=sizes.cen_epochs, batch_size=sizes.cen_batch,
                                      seed=cfg.seed)
    cen_arrays, _ = cen_mod.train_cen(np.stack(inputs), np.stack(targets), cfg.cen,
                                      cen_tcfg, log_path=workdir / "cen_train.jsonl")
    save_checkpoint(cen_arrays, cfg.cen_checkpoint)
    say(f"[{time.time()-t0:5.0f}s] scorer trained ({len(inputs)} pairs)")

    cfg.save(workdir / "config.json")
    pipeline = Pipeline.from_config(cfg)
    return cfg, {
        "model": model, "pool": pool, "train": train, "test": test,
        "branches": branches, "pipeline": pipeline, "workdir": workdir,
    }


def load_context(workdir: str | Path):
    """Re-open a built experiment directory."""
    from .synth import load_dataset
    workdir = Path(workdir)
    cfg = PipelineConfig.load(workdir / "config.json")
    pipeline = Pipeline.from_config(cfg)
    ctx = {"pipeline": pipeline, "workdir": workdir, "model": pipeline.model,
           "pool": pipeline.pool}
    for role in ("train", "test"):
        d = workdir / role
        if d.exists():
            ctx[role] = load_dataset(d, pipeline.model)
    return cfg, ctx
