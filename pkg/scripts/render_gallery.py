"""Render a few synthetic samples and their candidate PNCCs to PPM files."""

import argparse
from pathlib import Path

import numpy as np

from mion.body import ShapeParams, forward, make_toy_model
from mion.pipeline import PipelineConfig
from mion.pncc import ncc, render_pncc
from mion.pool import build_pool, fit_all, select_candidates
from mion.ppm import write_ppm
from mion.synth import gen_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/gallery")
    ap.add_argument("--count", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = PipelineConfig()
    model = make_toy_model(cfg.body["seed"], cfg.body["v"], cfg.body["k"],
                           cfg.body["s"], cfg.body["n"])
    sampler = cfg.make_sampler(model)
    pool = build_pool(sampler.motions(cfg.pool["motions"], seed=cfg.pool["seed"]),
                      cfg.pool["p"], cfg.pool["o"], cfg.pool["seed"], model)
    colors = ncc(model.template)
    samples = gen_dataset(model, sampler, args.count, seed=args.seed,
                          cfg=cfg.make_synth_config())
    for i, s in enumerate(samples):
        write_ppm(out / f"sample_{i}.ppm", s.image)
        fits = fit_all(pool, s.j2d, cfg.intrinsics, s.conf)
        cands = select_candidates(fits, pool, cfg.threshold, cfg.n_branches)
        for b, c in enumerate(cands):
            mesh = forward(model, c.pose, ShapeParams.zero(model.num_shapes))
            pmap = render_pncc(mesh, cfg.intrinsics, c.translation, colors, 112, 112)
            pmap.save_ppm(out / f"sample_{i}_branch_{b}.ppm")
        gt_mesh = forward(model, s.gt.pose, s.gt.shape)
        gt_map = render_pncc(gt_mesh, cfg.intrinsics, s.gt.translation, colors, 112, 112)
        gt_map.save_ppm(out / f"sample_{i}_gt.ppm")
        losses = ", ".join(f"{c.fit_loss:.0f}" for c in cands)
        print(f"sample {i}: {len(cands)} branches, fit losses [{losses}]")
    print(f"wrote renders to {out}")


if __name__ == "__main__":
    main()
