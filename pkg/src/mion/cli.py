"""Command-line interface.

Subcommands: pool build | pool fit | select | pncc render | synth gen |
train mrt | train cen | infer | eval | ablate. Exit codes: 0 success,
2 invalid input, 3 artifact-format error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import cen as cen_mod
from . import mrt as mrt_mod
from .body import BodyModel, ShapeParams, forward, make_toy_model
from .errors import ArtifactFormatError, MionError
from .experiment import stage1_branches
from .nn import params_from_arrays, load_checkpoint, save_checkpoint
from .pipeline import (Pipeline, PipelineConfig, evaluate, format_ablation,
                       run_ablation)
from .pncc import ncc, render_pncc
from .pool import (CandidatePool, FitBatch, build_pool, fit_all, load_candidates,
                   load_motions, save_candidates, select_candidates)
from .synth import gen_dataset, load_dataset, save_dataset


def _load_config(args) -> PipelineConfig:
    if args.config:
        cfg = PipelineConfig.load(args.config).resolve(Path(args.config).parent)
    else:
        cfg = PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _load_body(cfg: PipelineConfig) -> BodyModel:
    path = Path(cfg.body_model_path)
    if path.exists():
        return BodyModel.load(path)
    model = make_toy_model(cfg.body["seed"], cfg.body["v"], cfg.body["k"],
                           cfg.body["s"], cfg.body["n"])
    path.parent.mkdir(parents=True, exist_ok=True)
    model.save(path)
    return model


def _read_keypoints(path: str):
    doc = json.loads(Path(path).read_text())
    j2d = np.asarray(doc["j2d"], dtype=np.float64)
    conf = np.asarray(doc.get("conf", np.ones(len(j2d))), dtype=np.float64)
    return j2d, conf


def cmd_pool_build(args) -> int:
    cfg = _load_config(args)
    model = _load_body(cfg)
    if args.motions:
        motions = load_motions(args.motions)
    else:
        sampler = cfg.make_sampler(model)
        motions = sampler.motions(args.count or cfg.pool["motions"],
                                  seed=cfg.pool["seed"])
    pool = build_pool(motions, args.p or cfg.pool["p"], args.o or cfg.pool["o"],
                      cfg.pool["seed"], model)
    pool.save(args.out)
    print(f"pool: {pool.size} members -> {args.out}")
    return 0


def cmd_pool_fit(args) -> int:
    cfg = _load_config(args)
    pool = CandidatePool.load(args.pool)
    j2d, conf = _read_keypoints(args.keypoints)
    fits = fit_all(pool, j2d, cfg.intrinsics, conf, threads=args.threads)
    doc = {"translations": fits.translations.tolist(),
           "losses": [None if not np.isfinite(v) else float(v) for v in fits.losses]}
    Path(args.out).write_text(json.dumps(doc))
    finite = fits.losses[np.isfinite(fits.losses)]
    print(f"fitted {len(fits)} members; min loss "
          f"{finite.min() if finite.size else float('inf'):.3f} -> {args.out}")
    return 0


def cmd_select(args) -> int:
    cfg = _load_config(args)
    pool = CandidatePool.load(args.pool)
    doc = json.loads(Path(args.fits).read_text())
    losses = np.array([np.inf if v is None else v for v in doc["losses"]])
    fits = FitBatch(np.asarray(doc["translations"], dtype=np.float64), losses)
    sel = select_candidates(fits, pool, args.threshold or cfg.threshold,
                            args.branches or cfg.n_branches)
    save_candidates(sel, args.out)
    print(f"selected {len(sel)} candidates -> {args.out}")
    return 0


def cmd_pncc_render(args) -> int:
    cfg = _load_config(args)
    model = _load_body(cfg)
    cands = load_candidates(args.candidates)
    if not (0 <= args.index < len(cands)):
        raise MionError(f"candidate index {args.index} out of range")
    c = cands[args.index]
    mesh = forward(model, c.pose, ShapeParams.zero(model.num_shapes))
    hw = args.hw
    intr = cfg.intrinsics.scaled(hw / cfg.image_hw)
    pmap = render_pncc(mesh, intr, c.translation, ncc(model.template), hw, hw)
    pmap.save(args.out)
    if args.ppm:
        pmap.save_ppm(args.ppm)
    print(f"pncc {hw}x{hw} -> {args.out}")
    return 0


def cmd_synth_gen(args) -> int:
    cfg = _load_config(args)
    model = _load_body(cfg)
    sampler = cfg.make_sampler(model)
    samples = gen_dataset(model, sampler, args.count, seed=cfg.seed,
                          cfg=cfg.make_synth_config())
    save_dataset(samples, args.out, manifest={
        "seed": cfg.seed, "count": args.count, "config": cfg.to_dict()})
    print(f"{args.count} samples -> {args.out}")
    return 0


def cmd_train_mrt(args) -> int:
    cfg = _load_config(args)
    model = _load_body(cfg)
    pool = CandidatePool.load(args.pool or cfg.pool_path)
    samples = load_dataset(args.data, model)
    branches = stage1_branches(cfg, pool, samples)
    tcfg = mrt_mod.MrtTrainConfig(epochs=args.epochs, seed=cfg.seed)
    arrays, log = mrt_mod.train_mrt(samples, branches, model, cfg.mrt, tcfg,
                                    log_path=args.log)
    save_checkpoint(arrays, args.out)
    print(f"refiner: {len(log)} epochs, final loss {log[-1]['loss']:.4f} -> {args.out}")
    return 0


def cmd_train_cen(args) -> int:
    cfg = _load_config(args)
    model = _load_body(cfg)
    pool = CandidatePool.load(args.pool or cfg.pool_path)
    samples = load_dataset(args.data, model)
    branches = stage1_branches(cfg, pool, samples)
    cfg.cen.num_vertices = model.num_vertices
    cfg.cen.intrinsics = cfg.intrinsics.scaled(cfg.cen.input_hw / cfg.image_hw)
    pair_cfg = cen_mod.PairConfig(image_hw=cfg.image_hw)
    colors = ncc(model.template)
    inputs, targets = [], []
    for i, brs in enumerate(branches):
        if len(brs) < 2:
            continue
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xCE11, i]))
        for _ in range(args.pairs_per_sample):
            x, t = cen_mod.make_training_pair(brs, model, cfg.cen, rng, pair_cfg, colors)
            inputs.append(x.astype(np.float32))
            targets.append(t.astype(np.float32))
    tcfg = cen_mod.CenTrainConfig(epochs=args.epochs, seed=cfg.seed)
    arrays, log = cen_mod.train_cen(np.stack(inputs), np.stack(targets), cfg.cen, tcfg,
                                    log_path=args.log)
    save_checkpoint(arrays, args.out)
    print(f"scorer: {len(log)} epochs, final loss {log[-1]['loss']:.4f} -> {args.out}")
    return 0


def cmd_infer(args) -> int:
    cfg = _load_config(args)
    pipeline = Pipeline.from_config(cfg)
    samples = load_dataset(args.data, pipeline.model)
    if not (0 <= args.index < len(samples)):
        raise MionError(f"sample index {args.index} out of range")
    rec = pipeline.infer(samples[args.index], threads=args.threads)
    Path(args.out).write_text(json.dumps(rec.to_dict()))
    print(f"branch {rec.branch_index} of {len(rec.diagnostics)} -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    pipeline = Pipeline.from_config(cfg)
    samples = load_dataset(args.data, pipeline.model)
    report = evaluate(pipeline, samples, threads=args.threads)
    Path(args.out).write_text(json.dumps(report, indent=1))
    print(f"mpjpe {report['mpjpe']:.4f}  pa-mpjpe {report['pa_mpjpe']:.4f} "
          f"({len(samples)} samples) -> {args.out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    pipeline = Pipeline.from_config(cfg)
    samples = load_dataset(args.data, pipeline.model)
    report = run_ablation(pipeline, samples, threads=args.threads)
    Path(args.out).write_text(json.dumps(report, indent=1))
    text = format_ablation(report)
    if args.table:
        Path(args.table).write_text(text + "\n")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mion",
                                     description="multi-initialization 3D body recovery")
    parser.add_argument("--config", help="pipeline config JSON")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=1)
    sub = parser.add_subparsers(dest="command", required=True)

    pool_p = sub.add_parser("pool").add_subparsers(dest="pool_cmd", required=True)
    b = pool_p.add_parser("build")
    b.add_argument("--motions", help="JSONL pose file; procedural sampler when omitted")
    b.add_argument("--count", type=int, default=None)
    b.add_argument("--p", type=int, default=None)
    b.add_argument("--o", type=int, default=None)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_pool_build)
    f = pool_p.add_parser("fit")
    f.add_argument("--pool", required=True)
    f.add_argument("--keypoints", required=True, help='JSON {"j2d": [[u,v]...], "conf": [...]}')
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_pool_fit)

    s = sub.add_parser("select")
    s.add_argument("--pool", required=True)
    s.add_argument("--fits", required=True)
    s.add_argument("--threshold", type=float, default=None)
    s.add_argument("--branches", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_select)

    pn = sub.add_parser("pncc").add_subparsers(dest="pncc_cmd", required=True)
    r = pn.add_parser("render")
    r.add_argument("--candidates", required=True)
    r.add_argument("--index", type=int, default=0)
    r.add_argument("--hw", type=int, default=56)
    r.add_argument("--out", required=True)
    r.add_argument("--ppm", default=None)
    r.set_defaults(func=cmd_pncc_render)

    sy = sub.add_parser("synth").add_subparsers(dest="synth_cmd", required=True)
    g = sy.add_parser("gen")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_synth_gen)

    tr = sub.add_parser("train").add_subparsers(dest="train_cmd", required=True)
    tm = tr.add_parser("mrt")
    tm.add_argument("--data", required=True)
    tm.add_argument("--pool", default=None)
    tm.add_argument("--epochs", type=int, default=30)
    tm.add_argument("--out", required=True)
    tm.add_argument("--log", default=None)
    tm.set_defaults(func=cmd_train_mrt)
    tc = tr.add_parser("cen")
    tc.add_argument("--data", required=True)
    tc.add_argument("--pool", default=None)
    tc.add_argument("--epochs", type=int, default=16)
    tc.add_argument("--pairs-per-sample", type=int, default=8)
    tc.add_argument("--out", required=True)
    tc.add_argument("--log", default=None)
    tc.set_defaults(func=cmd_train_cen)

    inf = sub.add_parser("infer")
    inf.add_argument("--data", required=True)
    inf.add_argument("--index", type=int, default=0)
    inf.add_argument("--out", required=True)
    inf.set_defaults(func=cmd_infer)

    ev = sub.add_parser("eval")
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_eval)

    ab = sub.add_parser("ablate")
    ab.add_argument("--data", required=True)
    ab.add_argument("--out", required=True)
    ab.add_argument("--table", default=None)
    ab.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        return args.func(args)
    except ArtifactFormatError as e:
        print(f"artifact error: {e}", file=sys.stderr)
        return 3
    except (MionError, OSError, KeyError, ValueError, json.JSONDecodeError) as e:
        print(f"invalid input: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
