"""Three-stage inference, evaluation metrics, configuration and reports.

Stage 1 fits and selects diverse candidates, stage 2 refines each branch,
stage 3 scores refined branches against the image and keeps the most
consistent one. All randomness is seed-threaded; per-branch work may run
on several workers without changing results.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cen as cen_mod
from . import mrt as mrt_mod
from .body import BodyModel, Mesh, PoseParams, ShapeParams, forward, make_toy_model, regress_joints
from .camera import Intrinsics
from .errors import (ArtifactFormatError, DegenerateCloud, EmptyPool, MionError,
                     NoAdmissibleCandidate, ShapeMismatch)
from .geometry import procrustes
from .nn import load_checkpoint, params_from_arrays
from .pncc import ncc
from .pool import Candidate, CandidatePool, PoseSampler, PoseSamplerConfig, fit_all, select_candidates
from .synth import NoiseConfig, Sample, SynthConfig


# --------------------------------------------------------------------------
# Metrics


def mpjpe(pred_j3d: np.ndarray, gt_j3d: np.ndarray, root: tuple = (0,)) -> float:
    """Mean per-joint error after translating both clouds so the root
    (mean of the given joint indices) sits at the origin."""
    pred = np.asarray(pred_j3d, dtype=np.float64)
    gt = np.asarray(gt_j3d, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"joint clouds differ: {pred.shape} vs {gt.shape}")
    r = list(root)
    pred = pred - pred[r].mean(axis=0)
    gt = gt - gt[r].mean(axis=0)
    return float(np.linalg.norm(pred - gt, axis=1).mean())


def pa_mpjpe(pred_j3d: np.ndarray, gt_j3d: np.ndarray) -> float:
    """MPJPE after Procrustes similarity alignment of the prediction."""
    pred = np.asarray(pred_j3d, dtype=np.float64)
    gt = np.asarray(gt_j3d, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"joint clouds differ: {pred.shape} vs {gt.shape}")
    if pred.shape[0] < 3:
        raise DegenerateCloud("need at least 3 joints")
    aligned = procrustes(pred, gt).apply(pred)
    return float(np.linalg.norm(aligned - gt, axis=1).mean())


# --------------------------------------------------------------------------
# Configuration


@dataclass
class PipelineConfig:
    body_model_path: str = "body_model.json"
    pool_path: str = "pool.bin"
    mrt_checkpoint: str = "mrt.ckpt"
    cen_checkpoint: str = "cen.ckpt"
    intrinsics: Intrinsics = field(default_factory=lambda: Intrinsics(2500.0, 56.0, 56.0))
    image_hw: int = 112
    threshold: float = 800.0
    n_branches: int = 5
    seed: int = 0
    mrt: mrt_mod.MrtConfig = field(default_factory=mrt_mod.MrtConfig.desk)
    cen: cen_mod.CenConfig = field(default_factory=cen_mod.CenConfig)
    body: dict = field(default_factory=lambda: {"seed": 7, "v": 432, "k": 16, "s": 8, "n": 14})
    pool: dict = field(default_factory=lambda: {"p": 64, "o": 8, "seed": 3, "motions": 2000})
    sampler: dict = field(default_factory=lambda: {"seed": 11})
    synth: dict = field(default_factory=lambda: {
        "tz_range": [40.0, 52.0], "j2d_sigma": 2.0, "dropout_prob": 0.02})

    def to_dict(self) -> dict:
        return {
            "body_model_path": self.body_model_path,
            "pool_path": self.pool_path,
            "mrt_checkpoint": self.mrt_checkpoint,
            "cen_checkpoint": self.cen_checkpoint,
            "intrinsics": [self.intrinsics.f, self.intrinsics.c1, self.intrinsics.c2],
            "image_hw": self.image_hw,
            "threshold": self.threshold,
            "n_branches": self.n_branches,
            "seed": self.seed,
            "mrt": self.mrt.to_dict(),
            "cen": self.cen.to_dict(),
            "body": self.body,
            "pool": self.pool,
            "sampler": self.sampler,
            "synth": self.synth,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        cfg = cls()
        for key in ("body_model_path", "pool_path", "mrt_checkpoint", "cen_checkpoint",
                    "image_hw", "threshold", "n_branches", "seed", "body", "pool",
                    "sampler", "synth"):
            if key in doc:
                setattr(cfg, key, doc[key])
        if "intrinsics" in doc:
            cfg.intrinsics = Intrinsics(*doc["intrinsics"])
        if "mrt" in doc:
            cfg.mrt = mrt_mod.MrtConfig.from_dict(doc["mrt"])
        if "cen" in doc:
            cfg.cen = cen_mod.CenConfig.from_dict(doc["cen"])
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ArtifactFormatError(f"cannot parse config: {e}") from e
        if not isinstance(doc, dict):
            raise ArtifactFormatError("config must be a JSON object")
        return cls.from_dict(doc)

    def resolve(self, base: str | Path) -> "PipelineConfig":
        """Interpret artifact paths relative to the config file location."""
        base = Path(base)
        for attr in ("body_model_path", "pool_path", "mrt_checkpoint", "cen_checkpoint"):
            p = Path(getattr(self, attr))
            if not p.is_absolute():
                setattr(self, attr, str(base / p))
        return self

    def make_sampler(self, model: BodyModel) -> PoseSampler:
        kw = dict(self.sampler)
        seed = kw.pop("seed", 11)
        return PoseSampler(model, PoseSamplerConfig(**kw), seed=seed)

    def make_synth_config(self) -> SynthConfig:
        s = self.synth
        return SynthConfig(
            image_hw=self.image_hw,
            intrinsics=self.intrinsics,
            tz_range=tuple(s.get("tz_range", (40.0, 52.0))),
            noise=NoiseConfig(j2d_sigma=s.get("j2d_sigma", 0.0),
                              dropout_prob=s.get("dropout_prob", 0.0)),
        )


# --------------------------------------------------------------------------
# Runtime


@dataclass
class Reconstruction:
    pose: PoseParams
    shape: ShapeParams
    translation: np.ndarray
    mesh: Mesh
    branch_index: int
    diagnostics: list  # per branch: {"fit_loss", "cen_score", "pool_index"}

    def to_dict(self) -> dict:
        return {
            "pose": self.pose.joints.ravel().tolist(),
            "orient": self.pose.global_orient.tolist(),
            "shape": self.shape.beta.tolist(),
            "translation": self.translation.tolist(),
            "branch_index": self.branch_index,
            "diagnostics": self.diagnostics,
        }


class Pipeline:
    """Loaded artifacts plus the wiring between the three stages."""

    def __init__(self, model: BodyModel, pool: CandidatePool, mrt_params: dict,
                 mrt_cfg: mrt_mod.MrtConfig, cen_params: dict | None,
                 cen_cfg: cen_mod.CenConfig, intr: Intrinsics, threshold: float,
                 n_branches: int):
        self.model = model
        self.pool = pool
        self.mrt_params = mrt_params
        self.mrt_cfg = mrt_cfg
        self.cen_params = cen_params
        self.cen_cfg = cen_cfg
        self.intr = intr
        self.threshold = threshold
        self.n_branches = n_branches
        self.colors = ncc(model.template)

    @classmethod
    def from_config(cls, cfg: PipelineConfig, need_cen: bool = True) -> "Pipeline":
        model = BodyModel.load(cfg.body_model_path)
        pool = CandidatePool.load(cfg.pool_path)
        mrt_params = params_from_arrays(load_checkpoint(cfg.mrt_checkpoint), requires_grad=False)
        cen_params = None
        if need_cen and Path(cfg.cen_checkpoint).exists():
            cen_params = params_from_arrays(load_checkpoint(cfg.cen_checkpoint),
                                            requires_grad=False)
        return cls(model, pool, mrt_params, cfg.mrt, cen_params, cfg.cen,
                   cfg.intrinsics, cfg.threshold, cfg.n_branches)

    # stage 1
    def candidates(self, sample: Sample, n_branches: int | None = None,
                   threads: int = 1) -> list[Candidate]:
        fits = fit_all(self.pool, sample.j2d, self.intr, sample.conf, threads=threads)
        try:
            return select_candidates(fits, self.pool, self.threshold,
                                     n_branches or self.n_branches)
        except EmptyPool as e:
            raise NoAdmissibleCandidate(str(e)) from e

    # stage 2
    def refine(self, sample: Sample, cands: list[Candidate],
               threads: int = 1) -> list[mrt_mod.MrtOutput]:
        if sample.image is None:
            raise MionError("refinement requires an image")

        def one(c: Candidate) -> mrt_mod.MrtOutput:
            return mrt_mod.mrt_forward(sample.image, c, self.model, self.mrt_params,
                                       self.mrt_cfg, self.colors)
        if threads <= 1 or len(cands) == 1:
            return [one(c) for c in cands]
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(one, cands))

    # stage 3
    def score_branch(self, sample: Sample, out: mrt_mod.MrtOutput) -> np.ndarray:
        from .pncc import render_pncc
        mesh = forward(self.model, out.pose, out.shape)
        pmap = render_pncc(mesh, self.cen_cfg.intrinsics, out.translation, self.colors,
                           self.cen_cfg.input_hw, self.cen_cfg.input_hw)
        image = cen_mod.downsample(sample.image, self.cen_cfg.input_hw)
        return cen_mod.cen_forward(cen_mod.stack_input(image, pmap.data),
                                   self.cen_params, self.cen_cfg)

    def infer(self, sample: Sample, threads: int = 1) -> Reconstruction:
        cands = self.candidates(sample, threads=threads)
        outs = self.refine(sample, cands, threads=threads)
        diagnostics = [{"fit_loss": c.fit_loss, "pool_index": c.pool_index, "cen_score": None}
                       for c in cands]
        if len(outs) == 1 or self.cen_params is None:
            best = 0
        else:
            scores = [self.score_branch(sample, o) for o in outs]
            for d, s in zip(diagnostics, scores):
                d["cen_score"] = float(np.mean(s))
            best = cen_mod.select_branch(scores)
        out = outs[best]
        return Reconstruction(
            pose=out.pose, shape=out.shape, translation=out.translation,
            mesh=forward(self.model, out.pose, out.shape),
            branch_index=best, diagnostics=diagnostics,
        )


def evaluate(pipeline: Pipeline, samples: list[Sample], threads: int = 1) -> dict:
    """Mean MPJPE / PA-MPJPE of full inference over labeled samples."""
    root = mrt_mod.root_keypoint_indices(pipeline.model)
    per = []
    for s in samples:
        rec = pipeline.infer(s, threads=threads)
        pred = regress_joints(pipeline.model, rec.mesh)
        per.append({
            "mpjpe": mpjpe(pred, s.gt.j3d, root=root),
            "pa_mpjpe": pa_mpjpe(pred, s.gt.j3d),
            "branch_index": rec.branch_index,
        })
    return {
        "mpjpe": float(np.mean([p["mpjpe"] for p in per])),
        "pa_mpjpe": float(np.mean([p["pa_mpjpe"] for p in per])),
        "samples": per,
    }


# --------------------------------------------------------------------------
# Ablation


def run_ablation(pipeline: Pipeline, samples: list[Sample],
                 branch_counts: tuple = (1, 2, 3, 4, 5, 6),
                 random_seeds: tuple = (101, 202, 303),
                 threads: int = 1) -> dict:
    """Branch-count sweep and selection-strategy comparison.

    Per sample: select max(branch_counts) diverse candidates once, refine
    each, and record per-branch metrics and scores. Selection prefixes are
    consistent (farthest-point order does not depend on the budget), so the
    n-branch variant uses the first n branches.
    """
    max_n = max(branch_counts)
    root = mrt_mod.root_keypoint_indices(pipeline.model)
    rows = []
    for s in samples:
        cands = pipeline.candidates(s, n_branches=max_n, threads=threads)
        outs = pipeline.refine(s, cands, threads=threads)
        branch_mpjpe, branch_pa, branch_cen = [], [], []
        for out in outs:
            pred = regress_joints(pipeline.model, forward(pipeline.model, out.pose, out.shape))
            branch_mpjpe.append(mpjpe(pred, s.gt.j3d, root=root))
            branch_pa.append(pa_mpjpe(pred, s.gt.j3d))
            branch_cen.append(float(np.mean(pipeline.score_branch(s, out)))
                              if pipeline.cen_params is not None else 0.0)
        rows.append({
            "mpjpe": branch_mpjpe,
            "pa_mpjpe": branch_pa,
            "cen": branch_cen,
            "fit_loss": [c.fit_loss for c in cands],
        })

    def agg(pick_fn) -> dict:
        out = {}
        for n in branch_counts:
            ms, pas = [], []
            for ri, r in enumerate(rows):
                avail = min(n, len(r["mpjpe"]))
                i = pick_fn(ri, r, avail)
                ms.append(r["mpjpe"][i])
                pas.append(r["pa_mpjpe"][i])
            out[n] = {"mpjpe": float(np.mean(ms)), "pa_mpjpe": float(np.mean(pas))}
        return out

    report = {
        "n_samples": len(samples),
        "cen": agg(lambda ri, r, n: int(np.argmin(r["cen"][:n]))),
        "oracle": agg(lambda ri, r, n: int(np.argmin(r["mpjpe"][:n]))),
    }
    rand_runs = []
    for seed in random_seeds:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xAB1A]))
        draws = rng.integers(0, 10**9, size=len(rows))
        rand_runs.append(agg(lambda ri, r, n, d=draws: int(d[ri] % n)))
    report["random_runs"] = rand_runs
    report["random"] = {
        n: {
            "mpjpe": float(np.mean([run[n]["mpjpe"] for run in rand_runs])),
            "pa_mpjpe": float(np.mean([run[n]["pa_mpjpe"] for run in rand_runs])),
            "mpjpe_std": float(np.std([run[n]["mpjpe"] for run in rand_runs])),
        }
        for n in branch_counts
    }
    return report


def format_ablation(report: dict) -> str:
    lines = [f"samples: {report['n_samples']}",
             f"{'n':>2} {'cen':>10} {'oracle':>10} {'random':>10}   (mean MPJPE, body units)"]
    for n in sorted(report["cen"]):
        lines.append(
            f"{n:>2} {report['cen'][n]['mpjpe']:>10.4f} {report['oracle'][n]['mpjpe']:>10.4f} "
            f"{report['random'][n]['mpjpe']:>10.4f}")
    return "\n".join(lines)
