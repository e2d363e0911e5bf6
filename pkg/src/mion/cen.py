"""Consistency estimation: per-vertex distance regression from image + PNCC.

The scorer sees only pixels: an RGB view of the scene stacked with the
PNCC render of a hypothesis. It is trained on synthesized pairs where one
candidate plays the ground truth (rendered to RGB) and another the
hypothesis (rendered to PNCC), with the exact per-vertex distance between
the two bodies as target. At inference the branch with the lowest mean
regressed distance wins.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .body import BodyModel, Mesh, PoseParams, ShapeParams, forward
from .camera import Intrinsics
from .errors import EmptyDataset, EmptyList, ShapeMismatch, TooFewCandidates
from .pncc import NccColors, ncc, render_pncc
from .pool import Candidate
from .synth import render_rgb


@dataclass
class CenConfig:
    input_hw: int = 56
    channels: tuple = (16, 32, 48)
    hidden: int = 96
    num_vertices: int = 432
    intrinsics: Intrinsics = field(default_factory=lambda: Intrinsics(1250.0, 28.0, 28.0))

    def to_dict(self) -> dict:
        return {"input_hw": self.input_hw, "channels": list(self.channels),
                "hidden": self.hidden, "num_vertices": self.num_vertices,
                "intrinsics": [self.intrinsics.f, self.intrinsics.c1, self.intrinsics.c2]}

    @classmethod
    def from_dict(cls, doc: dict) -> "CenConfig":
        doc = dict(doc)
        doc["channels"] = tuple(doc.get("channels", (16, 32, 48)))
        f, c1, c2 = doc.pop("intrinsics", [1250.0, 28.0, 28.0])
        return cls(intrinsics=Intrinsics(f, c1, c2), **doc)


def init_cen_params(cfg: CenConfig, seed: int) -> dict:
    params: dict = {}
    cin = 6
    for i, c in enumerate(cfg.channels):
        nn.init_param(params, f"cen.conv{i}.w", (c, cin, 3, 3), fan_in=cin * 9, seed=seed)
        nn.init_param(params, f"cen.conv{i}.b", (c, 1, 1), fan_in=cin * 9, seed=seed)
        cin = c
    nn.init_param(params, "cen.fc1.w", (cin, cfg.hidden), fan_in=cin, seed=seed)
    nn.init_param(params, "cen.fc1.b", (cfg.hidden,), fan_in=cin, seed=seed)
    nn.init_param(params, "cen.fc2.w", (cfg.hidden, cfg.num_vertices), fan_in=cfg.hidden, seed=seed)
    nn.init_param(params, "cen.fc2.b", (cfg.num_vertices,), fan_in=cfg.hidden, seed=seed)
    return params


def cen_apply(params: dict, cfg: CenConfig, inputs: np.ndarray) -> nn.Tensor:
    """Batched scorer: (B, H, W, 6) stacked rasters -> (B, V) non-negative scores."""
    if inputs.shape[1] != cfg.input_hw or inputs.shape[3] != 6:
        raise ShapeMismatch(f"expected (B, {cfg.input_hw}, {cfg.input_hw}, 6), got {inputs.shape}")
    x = nn.Tensor(inputs.transpose(0, 3, 1, 2))
    for i in range(len(cfg.channels)):
        x = nn.conv2d(x, params[f"cen.conv{i}.w"], stride=2, pad=1)
        x = nn.relu(nn.layer_norm(nn.add(x, params[f"cen.conv{i}.b"]), axis=1))
    pooled = nn.mean(nn.reshape(x, (x.shape[0], x.shape[1], -1)), axis=2)
    h = nn.gelu(nn.add(nn.matmul(pooled, params["cen.fc1.w"]), params["cen.fc1.b"]))
    return nn.relu(nn.add(nn.matmul(h, params["cen.fc2.w"]), params["cen.fc2.b"]))


def cen_forward(cen_input: np.ndarray, params: dict, cfg: CenConfig) -> np.ndarray:
    """Scores for one stacked (H, W, 6) input."""
    return cen_apply(params, cfg, cen_input[None]).data[0].astype(np.float64)


def rest_height(model: BodyModel) -> float:
    ext = model.template.max(axis=0) - model.template.min(axis=0)
    return float(ext[1])


def _root_position(model: BodyModel, mesh: Mesh) -> np.ndarray:
    """Posed root proxy: mean of the regressed hip keypoints (falls back to
    the regressed first keypoint). Rows sum to one, so this commutes with
    translations of the mesh."""
    from .mrt import root_keypoint_indices
    joints = model.joint_regressor @ mesh.vertices
    ridx = list(root_keypoint_indices(model))
    return joints[ridx].mean(axis=0)


def cen_target(gt_mesh: Mesh, cand_mesh: Mesh, model: BodyModel) -> np.ndarray:
    """Per-vertex distance in normalized space: root-centered, height-scaled."""
    if gt_mesh.vertices.shape != cand_mesh.vertices.shape:
        raise ShapeMismatch("meshes must share the vertex layout")
    h = rest_height(model)
    a = (gt_mesh.vertices - _root_position(model, gt_mesh)) / h
    b = (cand_mesh.vertices - _root_position(model, cand_mesh)) / h
    return np.linalg.norm(a - b, axis=1)


def stack_input(image: np.ndarray, pmap_data: np.ndarray) -> np.ndarray:
    """RGB (H, W, 3) + PNCC (H, W, 3) -> (H, W, 6)."""
    if image.shape != pmap_data.shape:
        raise ShapeMismatch("image and pncc resolutions differ")
    return np.concatenate([image, pmap_data], axis=2)


def downsample(image: np.ndarray, out_hw: int) -> np.ndarray:
    """Box-average an (H, W, C) image down to (out_hw, out_hw, C)."""
    h = image.shape[0]
    if h == out_hw:
        return image
    if h % out_hw != 0:
        raise ShapeMismatch(f"cannot box-average {h} -> {out_hw}")
    f = h // out_hw
    return image.reshape(out_hw, f, out_hw, f, image.shape[2]).mean(axis=(1, 3))


@dataclass
class PairConfig:
    positive_rate: float = 0.25
    image_hw: int = 112  # resolution candidates were fitted in


def make_training_pair(branches: list[Candidate], model: BodyModel, cfg: CenConfig,
                       rng: np.random.Generator, pair_cfg: PairConfig | None = None,
                       colors: NccColors | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One synthetic supervision pair from a sample's candidate collection.

    Candidate A is rendered as the RGB scene (it plays ground truth),
    candidate B as the PNCC hypothesis; the target is their exact
    per-vertex normalized distance. With probability `positive_rate` the
    same candidate plays both roles, giving an all-zero target.
    """
    if len(branches) < 2:
        raise TooFewCandidates("need at least two candidates to synthesize pairs")
    pair_cfg = pair_cfg or PairConfig()
    colors = colors or ncc(model.template)
    a = int(rng.integers(len(branches)))
    if rng.uniform() < pair_cfg.positive_rate:
        b = a
    else:
        b = int(rng.integers(len(branches) - 1))
        if b >= a:
            b += 1
    zero = ShapeParams.zero(model.num_shapes)
    mesh_a = forward(model, branches[a].pose, zero)
    mesh_b = forward(model, branches[b].pose, zero)
    hw = cfg.input_hw
    # Render the RGB side at the resolution candidates were fitted in, then
    # box-average down: identical to what inference feeds the scorer.
    full = pair_cfg.image_hw
    image = render_rgb(mesh_a, cfg.intrinsics.scaled(full / hw), branches[a].translation,
                       texture_seed=int(rng.integers(2**31)),
                       bg_seed=int(rng.integers(2**31)), h=full, w=full)
    image = downsample(image, hw)
    pmap = render_pncc(mesh_b, cfg.intrinsics, branches[b].translation, colors, hw, hw)
    target = cen_target(mesh_a, mesh_b, model)
    return stack_input(image, pmap.data), target


def select_branch(branch_scores: list[np.ndarray]) -> int:
    """Index of the branch with the lowest mean score; ties to the lowest index."""
    if not branch_scores:
        raise EmptyList("no branches to select from")
    means = np.array([float(np.mean(s)) for s in branch_scores])
    return int(np.argmin(means))


@dataclass
class CenTrainConfig:
    epochs: int = 20
    batch_size: int = 16
    optimizer: str = "adamw"
    lr: float = 1e-3
    momentum: float = 0.9    # sgd only
    weight_decay: float = 1e-4
    lr_drop: float = 0.1   # after half the epochs
    clip_norm: float = 50.0
    seed: int = 0


def train_cen(pair_inputs: np.ndarray, pair_targets: np.ndarray, cfg: CenConfig,
              tcfg: CenTrainConfig | None = None,
              log_path: str | Path | None = None) -> tuple[dict, list[dict]]:
    """Fit the scorer to a fixed set of synthesized pairs (L1 regression)."""
    if len(pair_inputs) == 0:
        raise EmptyDataset("no training pairs")
    tcfg = tcfg or CenTrainConfig()
    params = init_cen_params(cfg, tcfg.seed)
    from .mrt import make_optimizer
    opt = make_optimizer(params, tcfg)
    m = len(pair_inputs)
    log: list[dict] = []
    for epoch in range(tcfg.epochs):
        opt.lr = tcfg.lr * (tcfg.lr_drop if epoch >= max(1, tcfg.epochs // 2) else 1.0)
        order = np.random.default_rng(
            np.random.SeedSequence([tcfg.seed, epoch, 0xCE])).permutation(m)
        losses = []
        for start in range(0, m, tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            scores = cen_apply(params, cfg, pair_inputs[idx])
            loss = nn.mean(nn.absolute(nn.sub(scores, nn.Tensor(pair_targets[idx]))))
            loss.backward()
            nn.clip_grad_norm(params, tcfg.clip_norm)
            opt.step()
            opt.zero_grad()
            losses.append(float(loss.data))
        log.append({"epoch": epoch, "loss": float(np.mean(losses)), "lr": opt.lr})
    if log_path is not None:
        Path(log_path).write_text("\n".join(json.dumps(r) for r in log) + "\n")
    return {name: t.data.copy() for name, t in params.items()}, log
