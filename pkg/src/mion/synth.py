"""Synthetic labeled data: textured body renders over procedural backgrounds.

Shares the rasterizer core with the PNCC renderer, so the RGB foreground
mask is pixel-identical to the nonzero mask of the matching PNCC render.
Every sample carries exact 3D ground truth; keypoint noise and dropout are
applied on top of geometrically consistent projections.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .body import BodyModel, Mesh, PoseParams, ShapeParams, forward, regress_joints
from .camera import Intrinsics, project
from .errors import ArtifactFormatError, InvalidDims
from .pncc import rasterize, shade
from .pool import PoseSampler
from .ppm import read_ppm, write_ppm


@dataclass
class GroundTruth:
    pose: PoseParams
    shape: ShapeParams
    translation: np.ndarray  # (3,)
    j3d: np.ndarray          # (N, 3), oriented body frame (translation not applied)
    mesh: Mesh


@dataclass
class Sample:
    image: np.ndarray | None  # (H, W, 3) in [0, 1]
    j2d: np.ndarray           # (N, 2) observed keypoints (may be noisy)
    conf: np.ndarray          # (N,) in [0, 1]
    gt: GroundTruth | None = None


def _vertex_texture(vertices: np.ndarray, seed: int) -> np.ndarray:
    """Smooth per-vertex color field, deterministic in the seed.

    Kept bright so bodies separate from the dimmer procedural backgrounds;
    the scorer and refiner only ever see this synthetic domain.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x7E57]))
    base = rng.uniform(0.55, 0.9, size=3)
    colors = np.tile(base, (vertices.shape[0], 1))
    for _ in range(3):
        amp = rng.uniform(0.05, 0.2, size=3)
        freq = rng.uniform(2.0, 7.0, size=3)
        phase = rng.uniform(0.0, 2 * np.pi, size=3)
        colors += amp * np.sin(vertices @ np.diag(freq) + phase)
    return np.clip(colors, 0.45, 1.0)


def _background(h: int, w: int, seed: int) -> np.ndarray:
    """Smooth dim noise gradient in [0.02, 0.4]."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xB6]))
    ys, xs = np.mgrid[0:h, 0:w] / max(h, w)
    img = np.empty((h, w, 3))
    for c in range(3):
        v = rng.uniform(0.1, 0.3) * np.ones((h, w))
        for _ in range(3):
            a = rng.uniform(0.03, 0.12)
            fx, fy = rng.uniform(0.5, 3.0, size=2)
            ph = rng.uniform(0, 2 * np.pi)
            v += a * np.sin(2 * np.pi * (fx * xs + fy * ys) + ph)
        img[..., c] = v
    return np.clip(img, 0.02, 0.4)


def render_rgb(mesh: Mesh, intr: Intrinsics, t: np.ndarray, texture_seed: int,
               bg_seed: int, h: int, w: int, return_mask: bool = False):
    """Flat-shaded Lambertian render composited over a procedural background."""
    buffers = rasterize(mesh.vertices, mesh.faces, intr, t, h, w)
    colors = _vertex_texture(mesh.vertices, texture_seed)
    fg = shade(buffers, mesh.faces, colors)
    rng = np.random.default_rng(np.random.SeedSequence([int(texture_seed), 0x115]))
    light = rng.normal(size=3)
    light /= np.linalg.norm(light)
    if len(mesh.faces):
        v0 = mesh.vertices[mesh.faces[:, 0]]
        n = np.cross(mesh.vertices[mesh.faces[:, 1]] - v0, mesh.vertices[mesh.faces[:, 2]] - v0)
        n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
        lambert = 0.5 + 0.5 * np.abs(n @ light)
        mask = buffers.covered
        fg[mask] *= lambert[buffers.tri_index[mask], None]
    image = _background(h, w, bg_seed)
    mask = buffers.covered
    image[mask] = np.clip(fg[mask], 0.0, 1.0)
    if return_mask:
        return image, mask
    return image


@dataclass
class NoiseConfig:
    j2d_sigma: float = 0.0
    dropout_prob: float = 0.0


@dataclass
class SynthConfig:
    image_hw: int = 112
    intrinsics: Intrinsics = field(default_factory=lambda: Intrinsics(2500.0, 56.0, 56.0))
    tz_range: tuple[float, float] = (40.0, 52.0)
    center_jitter: float = 6.0   # px
    shape_range: float = 1.5
    noise: NoiseConfig = field(default_factory=NoiseConfig)


def place_body(j3d: np.ndarray, intr: Intrinsics, cfg: SynthConfig,
               rng: np.random.Generator) -> np.ndarray:
    """Pick a translation that frames the body: random depth, centered root."""
    tz = rng.uniform(*cfg.tz_range)
    centroid = j3d.mean(axis=0)
    du, dv = rng.uniform(-cfg.center_jitter, cfg.center_jitter, size=2)
    tx = du * (centroid[2] + tz) / intr.f - centroid[0]
    ty = dv * (centroid[2] + tz) / intr.f - centroid[1]
    return np.array([tx, ty, tz])


def gen_sample(model: BodyModel, sampler: PoseSampler, cfg: SynthConfig, seed: int,
               index: int, with_image: bool = True) -> Sample:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))
    pose_vec, orient = sampler.sample(rng)
    pose = PoseParams(global_orient=orient, joints=pose_vec.reshape(-1, 3))
    beta = rng.uniform(-cfg.shape_range, cfg.shape_range, size=model.num_shapes)
    shape = ShapeParams(beta=beta)
    mesh = forward(model, pose, shape)
    j3d = regress_joints(model, mesh)
    t = place_body(j3d, cfg.intrinsics, cfg, rng)
    j2d_clean = project(j3d, cfg.intrinsics, t)
    # generation-time consistency: projections derive from the same mesh
    recheck = project(regress_joints(model, mesh), cfg.intrinsics, t)
    if np.abs(recheck - j2d_clean).max() > 0.5:
        raise InvalidDims("generated sample failed ground-truth consistency")
    image = None
    if with_image:
        tex_seed = int(rng.integers(2**31))
        bg_seed = int(rng.integers(2**31))
        image = render_rgb(mesh, cfg.intrinsics, t, tex_seed, bg_seed, cfg.image_hw, cfg.image_hw)
    j2d = j2d_clean.copy()
    conf = np.ones(j3d.shape[0])
    if cfg.noise.j2d_sigma > 0:
        j2d = j2d + rng.normal(0.0, cfg.noise.j2d_sigma, size=j2d.shape)
    if cfg.noise.dropout_prob > 0:
        conf = np.where(rng.uniform(size=conf.shape) < cfg.noise.dropout_prob, 0.0, 1.0)
    return Sample(image=image, j2d=j2d, conf=conf,
                  gt=GroundTruth(pose=pose, shape=shape, translation=t, j3d=j3d, mesh=mesh))


def gen_dataset(model: BodyModel, sampler: PoseSampler, count: int, seed: int,
                cfg: SynthConfig | None = None, with_images: bool = True) -> list[Sample]:
    """Deterministic dataset: sample i depends only on (model, sampler, cfg, seed, i)."""
    if count < 1:
        raise InvalidDims("count must be >= 1")
    cfg = cfg or SynthConfig()
    return [gen_sample(model, sampler, cfg, seed, i, with_images) for i in range(count)]


# --------------------------------------------------------------------------
# Dataset directory I/O


def save_dataset(samples: list[Sample], out_dir: str | Path, manifest: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        rec: dict = {
            "index": i,
            "j2d": s.j2d.tolist(),
            "conf": s.conf.tolist(),
        }
        if s.image is not None:
            name = f"sample_{i:05d}.ppm"
            write_ppm(out / name, s.image)
            rec["image"] = name
        if s.gt is not None:
            rec["gt"] = {
                "pose": s.gt.pose.joints.ravel().tolist(),
                "orient": s.gt.pose.global_orient.tolist(),
                "shape": s.gt.shape.beta.tolist(),
                "translation": s.gt.translation.tolist(),
                "j3d": s.gt.j3d.tolist(),
            }
        lines.append(json.dumps(rec, sort_keys=True))
    (out / "labels.jsonl").write_text("\n".join(lines) + "\n")
    (out / "manifest.json").write_text(json.dumps(manifest or {}, sort_keys=True, indent=1))


def load_dataset(dir_path: str | Path, model: BodyModel | None = None) -> list[Sample]:
    """Rebuild samples; gt meshes are re-posed from the model when provided."""
    root = Path(dir_path)
    lines = (root / "labels.jsonl").read_text().splitlines()
    samples = []
    for line in lines:
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise ArtifactFormatError(f"bad label line: {e}") from e
        image = read_ppm(root / rec["image"]) if "image" in rec else None
        gt = None
        if "gt" in rec:
            g = rec["gt"]
            pose = PoseParams(
                global_orient=np.asarray(g["orient"], dtype=np.float64),
                joints=np.asarray(g["pose"], dtype=np.float64).reshape(-1, 3),
            )
            shape = ShapeParams(beta=np.asarray(g["shape"], dtype=np.float64))
            mesh = forward(model, pose, shape) if model is not None else Mesh(
                vertices=np.zeros((0, 3)), faces=np.zeros((0, 3), dtype=np.int64))
            gt = GroundTruth(pose=pose, shape=shape,
                             translation=np.asarray(g["translation"], dtype=np.float64),
                             j3d=np.asarray(g["j3d"], dtype=np.float64), mesh=mesh)
        samples.append(Sample(
            image=image,
            j2d=np.asarray(rec["j2d"], dtype=np.float64),
            conf=np.asarray(rec["conf"], dtype=np.float64),
            gt=gt,
        ))
    return samples
