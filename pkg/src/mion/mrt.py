"""Mesh refinement transformer: per-branch residual refinement of a coarse
candidate, conditioned on the image through a conv backbone and on the
candidate itself through a PNCC positional encoding.

The backbone downsamples by 16, then three transposed convolutions bring
the grid to ``feat_hw``; the flattened tokens get the candidate's PNCC
positional encoding added (channel counts match by construction), run
through a pre-norm encoder, and a decoder with one learned query per joint
emits rotation offsets. Zero-initialized output heads make the whole stack
an exact identity on its input candidate at initialization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .body import (BodyModel, Mesh, PoseParams, ShapeParams, forward,
                   global_joint_transforms)
from .camera import Intrinsics, MIN_DEPTH
from .errors import EmptyDataset, ShapeMismatch
from .geometry import rodrigues, rotation_log
from .pncc import NccColors, PnccMap, ncc, pncc_pe, render_pncc
from .pool import Candidate
from .synth import GroundTruth, Sample


@dataclass
class MrtConfig:
    image_hw: int = 224
    feat_hw: int = 56
    d_model: int = 384
    d_pe: int = 128
    heads: int = 8
    encoder_layers: int = 2
    decoder_layers: int = 2
    num_queries: int = 16          # one per joint, query 0 = global orientation
    num_shapes: int = 8
    d_ff: int = 0                  # 0 -> 2 * d_model
    backbone_channels: tuple = ()  # () -> quarters of d_model
    deconv_channels: tuple = ()    # () -> (d/2, d/2, d)
    intrinsics: Intrinsics = field(default_factory=Intrinsics)
    pncc_scale: float = 1.0

    def __post_init__(self):
        if self.d_ff == 0:
            self.d_ff = 2 * self.d_model
        if not self.backbone_channels:
            d = self.d_model
            self.backbone_channels = (max(d // 8, 4), max(d // 4, 8), max(d // 2, 16), d)
        if not self.deconv_channels:
            d = self.d_model
            self.deconv_channels = (max(d // 2, 8), max(d // 2, 8), d)
        if self.deconv_channels[-1] != self.d_model:
            raise ShapeMismatch("last deconv must emit d_model channels")
        if 3 * self.d_pe != self.d_model:
            raise ShapeMismatch("3 * d_pe must equal d_model")
        if self.d_model % self.heads != 0:
            raise ShapeMismatch("d_model must divide by heads")
        if self.image_hw % 16 != 0:
            raise ShapeMismatch("image size must be divisible by 16")
        if self.feat_hw * 16 % self.image_hw != 0 or self.deconv_ratio not in (1, 2, 4, 8):
            raise ShapeMismatch(f"feat_hw {self.feat_hw} unreachable from image {self.image_hw}")

    @property
    def base_hw(self) -> int:
        return self.image_hw // 16

    @property
    def deconv_ratio(self) -> int:
        return self.feat_hw // self.base_hw

    @property
    def deconv_strides(self) -> tuple:
        return {8: (2, 2, 2), 4: (2, 2, 1), 2: (2, 1, 1), 1: (1, 1, 1)}[self.deconv_ratio]

    @classmethod
    def desk(cls, num_queries: int = 16, num_shapes: int = 8) -> "MrtConfig":
        # pncc_scale spreads the [0, 1] PNCC values across the sinusoid
        # frequency ladder; at the verbatim scale of 1 only a couple of
        # encoding channels vary between candidates.
        return cls(image_hw=112, feat_hw=14, d_model=96, d_pe=32, heads=4,
                   encoder_layers=2, decoder_layers=2, num_queries=num_queries,
                   num_shapes=num_shapes, backbone_channels=(16, 32, 64, 96),
                   intrinsics=Intrinsics(2500.0, 56.0, 56.0), pncc_scale=100.0)

    def to_dict(self) -> dict:
        return {
            "image_hw": self.image_hw, "feat_hw": self.feat_hw, "d_model": self.d_model,
            "d_pe": self.d_pe, "heads": self.heads, "encoder_layers": self.encoder_layers,
            "decoder_layers": self.decoder_layers, "num_queries": self.num_queries,
            "num_shapes": self.num_shapes, "d_ff": self.d_ff,
            "backbone_channels": list(self.backbone_channels),
            "deconv_channels": list(self.deconv_channels),
            "intrinsics": [self.intrinsics.f, self.intrinsics.c1, self.intrinsics.c2],
            "pncc_scale": self.pncc_scale,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MrtConfig":
        doc = dict(doc)
        doc["backbone_channels"] = tuple(doc.get("backbone_channels", ()))
        doc["deconv_channels"] = tuple(doc.get("deconv_channels", ()))
        f, c1, c2 = doc.pop("intrinsics", [5000.0, 112.0, 112.0])
        return cls(intrinsics=Intrinsics(f, c1, c2), **doc)


@dataclass
class MrtOutput:
    pose: PoseParams
    shape: ShapeParams
    translation: np.ndarray


@dataclass
class LossWeights:
    w1: float = 1.0
    w2: float = 5.0


# --------------------------------------------------------------------------
# Parameters


def _init_attn(params: dict, name: str, d: int, seed: int) -> None:
    for part in ("q", "k", "v", "o"):
        nn.init_param(params, f"{name}.w{part}", (d, d), fan_in=d, seed=seed)
        nn.init_param(params, f"{name}.b{part}", (d,), fan_in=d, seed=seed)


def _init_ffn(params: dict, name: str, d: int, d_ff: int, seed: int) -> None:
    nn.init_param(params, f"{name}.w1", (d, d_ff), fan_in=d, seed=seed)
    nn.init_param(params, f"{name}.b1", (d_ff,), fan_in=d, seed=seed)
    nn.init_param(params, f"{name}.w2", (d_ff, d), fan_in=d_ff, seed=seed)
    nn.init_param(params, f"{name}.b2", (d,), fan_in=d_ff, seed=seed)


def init_mrt_params(cfg: MrtConfig, seed: int) -> dict:
    params: dict = {}
    cin = 3
    for i, c in enumerate(cfg.backbone_channels):
        nn.init_param(params, f"backbone.conv{i}.w", (c, cin, 3, 3), fan_in=cin * 9, seed=seed)
        nn.init_param(params, f"backbone.conv{i}.b", (c, 1, 1), fan_in=cin * 9, seed=seed)
        cin = c
    for i, (s, c) in enumerate(zip(cfg.deconv_strides, cfg.deconv_channels)):
        k = 4 if s == 2 else 3
        nn.init_param(params, f"backbone.deconv{i}.w", (cin, c, k, k),
                      fan_in=cin * k * k, seed=seed)
        nn.init_param(params, f"backbone.deconv{i}.b", (c, 1, 1),
                      fan_in=cin * k * k, seed=seed)
        cin = c
    d = cfg.d_model
    for li in range(cfg.encoder_layers):
        _init_attn(params, f"enc{li}.attn", d, seed)
        _init_ffn(params, f"enc{li}.ffn", d, cfg.d_ff, seed)
    nn.init_param(params, "dec.queries", (cfg.num_queries, d), fan_in=d, seed=seed)
    for li in range(cfg.decoder_layers):
        _init_attn(params, f"dec{li}.self", d, seed)
        _init_attn(params, f"dec{li}.cross", d, seed)
        _init_ffn(params, f"dec{li}.ffn", d, cfg.d_ff, seed)
    # Residual heads start at zero so the untrained stack is the identity.
    nn.init_param(params, "head.pose.w", (d, 3), fan_in=d, seed=seed, zero=True)
    nn.init_param(params, "head.pose.b", (3,), fan_in=d, seed=seed, zero=True)
    nn.init_param(params, "head.shape.w1", (d, d), fan_in=d, seed=seed)
    nn.init_param(params, "head.shape.b1", (d,), fan_in=d, seed=seed)
    nn.init_param(params, "head.shape.w2", (d, cfg.num_shapes), fan_in=d, seed=seed, zero=True)
    nn.init_param(params, "head.shape.b2", (cfg.num_shapes,), fan_in=d, seed=seed, zero=True)
    nn.init_param(params, "head.cam.w1", (d, d), fan_in=d, seed=seed)
    nn.init_param(params, "head.cam.b1", (d,), fan_in=d, seed=seed)
    nn.init_param(params, "head.cam.w2", (d, 3), fan_in=d, seed=seed, zero=True)
    nn.init_param(params, "head.cam.b2", (3,), fan_in=d, seed=seed, zero=True)
    return params


def _attn(params: dict, name: str, q, kv, heads: int):
    p = params
    return nn.multi_head_attention(
        q, kv, kv, heads,
        p[f"{name}.wq"], p[f"{name}.bq"], p[f"{name}.wk"], p[f"{name}.bk"],
        p[f"{name}.wv"], p[f"{name}.bv"], p[f"{name}.wo"], p[f"{name}.bo"])


def _ffn(params: dict, name: str, x):
    h = nn.gelu(nn.add(nn.matmul(x, params[f"{name}.w1"]), params[f"{name}.b1"]))
    return nn.add(nn.matmul(h, params[f"{name}.w2"]), params[f"{name}.b2"])


# --------------------------------------------------------------------------
# Differentiable kinematics (mirrors body.forward on nn tensors)


def rodrigues_tensor(rotvec: nn.Tensor) -> nn.Tensor:
    """(B, J, 3) axis-angle to (B, J, 3, 3) rotations, smooth at zero."""
    b, j = rotvec.data.shape[:2]
    x = nn.narrow(rotvec, 2, 0, 1)
    y = nn.narrow(rotvec, 2, 1, 1)
    z = nn.narrow(rotvec, 2, 2, 1)
    zero = nn.mul(x, 0.0)
    k = nn.reshape(nn.concat([zero, -z, y, z, zero, -x, -y, x, zero], axis=2), (b, j, 3, 3))
    kk = nn.matmul(k, k)
    v2 = nn.tsum(nn.mul(rotvec, rotvec), axis=2, keepdims=True)
    theta = nn.sqrt(nn.add(v2, 1e-12))
    s = nn.reshape(nn.div(nn.sin(theta), theta), (b, j, 1, 1))
    c = nn.reshape(nn.div(nn.sub(1.0, nn.cos(theta)), nn.add(v2, 1e-12)), (b, j, 1, 1))
    eye = nn.Tensor(np.eye(3))
    return nn.add(eye, nn.add(nn.mul(s, k), nn.mul(c, kk)))


def skinned_vertices(model: BodyModel, pose: nn.Tensor, beta: nn.Tensor) -> nn.Tensor:
    """Differentiable LBS: pose (B, K, 3), beta (B, S) -> vertices (B, V, 3)."""
    b = pose.data.shape[0]
    k = model.num_joints
    rest = model.joint_rest
    rots = rodrigues_tensor(pose)
    glob: list = [None] * k
    pos: list = [None] * k
    glob[0] = nn.reshape(nn.narrow(rots, 1, 0, 1), (b, 3, 3))
    pos[0] = nn.Tensor(np.broadcast_to(rest[0], (b, 3)).copy())
    for j in range(1, k):
        p = int(model.parents[j])
        rj = nn.reshape(nn.narrow(rots, 1, j, 1), (b, 3, 3))
        glob[j] = nn.matmul(glob[p], rj)
        off = nn.Tensor((rest[j] - rest[p]).reshape(3, 1))
        pos[j] = nn.add(pos[p], nn.reshape(nn.matmul(glob[p], off), (b, 3)))
    v = model.num_vertices
    shaped = nn.Tensor(model.template.reshape(1, v, 3))
    if model.num_shapes:
        basis = nn.Tensor(model.shape_basis.reshape(v * 3, model.num_shapes).T)
        disp = nn.matmul(nn.reshape(beta, (b, 1, model.num_shapes)), basis)
        shaped = nn.add(shaped, nn.reshape(disp, (b, v, 3)))
    out = None
    for j in range(k):
        w_col = model.skin_weights[:, j]
        if not w_col.any():
            continue
        anchor = nn.Tensor(rest[j].reshape(3, 1))
        tj = nn.sub(pos[j], nn.reshape(nn.matmul(glob[j], anchor), (b, 3)))
        vj = nn.add(nn.matmul(shaped, nn.transpose(glob[j], (0, 2, 1))),
                    nn.reshape(tj, (b, 1, 3)))
        term = nn.mul(vj, nn.Tensor(w_col.reshape(1, v, 1)))
        out = term if out is None else nn.add(out, term)
    return out


def keypoints_tensor(model: BodyModel, vertices: nn.Tensor) -> nn.Tensor:
    return nn.matmul(nn.Tensor(model.joint_regressor), vertices)


def project_tensor(j3d: nn.Tensor, intr: Intrinsics, trans: nn.Tensor) -> nn.Tensor:
    """Differentiable perspective projection: (B, N, 3) + (B, 3) -> (B, N, 2)."""
    b = j3d.data.shape[0]
    tx = nn.reshape(nn.narrow(trans, 1, 0, 1), (b, 1, 1))
    ty = nn.reshape(nn.narrow(trans, 1, 1, 1), (b, 1, 1))
    tz = nn.reshape(nn.narrow(trans, 1, 2, 1), (b, 1, 1))
    x = nn.narrow(j3d, 2, 0, 1)
    y = nn.narrow(j3d, 2, 1, 1)
    z = nn.narrow(j3d, 2, 2, 1)
    depth = nn.add(z, tz)
    u = nn.add(nn.mul(nn.div(nn.add(x, tx), depth), intr.f), intr.c1)
    v = nn.add(nn.mul(nn.div(nn.add(y, ty), depth), intr.f), intr.c2)
    return nn.concat([u, v], axis=2)


def root_keypoint_indices(model: BodyModel) -> tuple:
    """Keypoints used as the root for alignment: the hip pair when tracked."""
    if model.keypoint_joints is not None and model.joint_names:
        names = [model.joint_names[j] for j in model.keypoint_joints]
        hips = [i for i, nm in enumerate(names) if nm.endswith("_hip")]
        if len(hips) >= 2:
            return tuple(hips[:2])
    return (0,)


# --------------------------------------------------------------------------
# Forward


@dataclass
class MrtTensors:
    """Graph outputs of a batched refinement pass."""

    pose: nn.Tensor         # (B, K, 3)
    shape: nn.Tensor        # (B, S)
    translation: nn.Tensor  # (B, 3)


def candidate_token_indices(candidate: Candidate, model: BodyModel, cfg: MrtConfig) -> np.ndarray:
    """Feature-grid token index of each skeleton joint under the candidate.

    Joints are posed with the candidate's parameters, projected at feature
    resolution and snapped to the nearest token; off-grid joints clamp to
    the border. Gives each decoder query the local image evidence plus the
    positional code at its own joint.
    """
    from .camera import MIN_DEPTH
    rots, pos = global_joint_transforms(model, candidate.pose)
    intr = cfg.intrinsics.scaled(cfg.feat_hw / cfg.image_hw)
    t = candidate.translation
    depth = np.maximum(pos[:, 2] + t[2], MIN_DEPTH)
    u = intr.f * (pos[:, 0] + t[0]) / depth + intr.c1
    v = intr.f * (pos[:, 1] + t[1]) / depth + intr.c2
    col = np.clip(np.floor(u), 0, cfg.feat_hw - 1).astype(np.int64)
    row = np.clip(np.floor(v), 0, cfg.feat_hw - 1).astype(np.int64)
    return row * cfg.feat_hw + col


def candidate_pncc(candidate: Candidate, model: BodyModel, colors: NccColors,
                   cfg: MrtConfig) -> PnccMap:
    """PNCC raster of one candidate at feature resolution."""
    mesh = forward(model, candidate.pose, ShapeParams.zero(model.num_shapes))
    intr = cfg.intrinsics.scaled(cfg.feat_hw / cfg.image_hw)
    return render_pncc(mesh, intr, candidate.translation, colors, cfg.feat_hw, cfg.feat_hw)


def pe_from_map(pmap: PnccMap, cfg: MrtConfig) -> np.ndarray:
    pe = pncc_pe(pmap, cfg.d_pe, cfg.pncc_scale)
    return pe.data.reshape(cfg.feat_hw * cfg.feat_hw, cfg.d_model)


def candidate_pncc_pe(candidate: Candidate, model: BodyModel, colors: NccColors,
                      cfg: MrtConfig) -> np.ndarray:
    """PNCC positional encoding of one candidate at feature resolution."""
    return pe_from_map(candidate_pncc(candidate, model, colors, cfg), cfg)


def flip_pncc_map(pmap: PnccMap) -> PnccMap:
    """PNCC raster of the mirrored candidate, by raster transform.

    Valid when the template is left/right symmetric and the principal point
    sits at the image center: mirroring flips columns and maps the
    x-coordinate code to 1 - x on covered pixels.
    """
    data = pmap.data[:, ::-1].copy()
    covered = data.any(axis=2)
    data[covered, 0] = 1.0 - data[covered, 0]
    return PnccMap(data=data)


def mrt_apply(params: dict, cfg: MrtConfig, model: BodyModel, images: np.ndarray,
              candidates: list[Candidate], colors: NccColors | None = None,
              pe_override: np.ndarray | None = None) -> MrtTensors:
    """Batched refinement forward pass building the autodiff graph.

    images: (B, H, W, 3) in [0, 1]; candidates: one per image row.
    `pe_override` (B, feat_hw^2, d_model) skips the per-candidate PNCC
    render (used by the trainer's raster cache).
    """
    b = images.shape[0]
    if images.shape[1] != cfg.image_hw or len(candidates) != b:
        raise ShapeMismatch("image batch does not match config/candidates")
    colors = colors or ncc(model.template)
    # Channel layer-norm after every (de)convolution keeps activations O(1);
    # the uniform fan-in init otherwise shrinks features several-fold per layer.
    x = nn.Tensor(images.transpose(0, 3, 1, 2))
    for i in range(len(cfg.backbone_channels)):
        x = nn.conv2d(x, params[f"backbone.conv{i}.w"], stride=2, pad=1)
        x = nn.relu(nn.layer_norm(nn.add(x, params[f"backbone.conv{i}.b"]), axis=1))
    for i, s in enumerate(cfg.deconv_strides):
        x = nn.deconv2d(x, params[f"backbone.deconv{i}.w"], stride=s, pad=1)
        x = nn.gelu(nn.layer_norm(nn.add(x, params[f"backbone.deconv{i}.b"]), axis=1))
    length = cfg.feat_hw * cfg.feat_hw
    tokens = nn.transpose(nn.reshape(x, (b, cfg.d_model, length)), (0, 2, 1))

    if pe_override is None:
        pe = np.stack([candidate_pncc_pe(c, model, colors, cfg) for c in candidates])
    else:
        pe = pe_override
    tokens = nn.add(tokens, nn.Tensor(pe))

    for li in range(cfg.encoder_layers):
        h = nn.layer_norm(tokens, axis=-1)
        tokens = nn.add(tokens, _attn(params, f"enc{li}.attn", h, h, cfg.heads))
        h = nn.layer_norm(tokens, axis=-1)
        tokens = nn.add(tokens, _ffn(params, f"enc{li}.ffn", h))
    memory = nn.layer_norm(tokens, axis=-1)

    jidx = np.stack([candidate_token_indices(c, model, cfg) for c in candidates])
    if jidx.shape[1] != cfg.num_queries:
        raise ShapeMismatch("query count must match the skeleton joint count")
    q = nn.add(nn.tile_batch(params["dec.queries"], b), nn.take_rows(tokens, jidx))
    for li in range(cfg.decoder_layers):
        h = nn.layer_norm(q, axis=-1)
        q = nn.add(q, _attn(params, f"dec{li}.self", h, h, cfg.heads))
        h = nn.layer_norm(q, axis=-1)
        q = nn.add(q, _attn(params, f"dec{li}.cross", h, memory, cfg.heads))
        h = nn.layer_norm(q, axis=-1)
        q = nn.add(q, _ffn(params, f"dec{li}.ffn", h))

    qn = nn.layer_norm(q, axis=-1)
    offsets = nn.add(nn.matmul(qn, params["head.pose.w"]), params["head.pose.b"])
    cand_pose = np.stack([c.pose.as_vector().reshape(-1, 3) for c in candidates])
    pose_out = nn.add(nn.Tensor(cand_pose), offsets)

    pooled = nn.mean(qn, axis=1)
    h = nn.gelu(nn.add(nn.matmul(pooled, params["head.shape.w1"]), params["head.shape.b1"]))
    shape_out = nn.add(nn.matmul(h, params["head.shape.w2"]), params["head.shape.b2"])

    h = nn.gelu(nn.add(nn.matmul(pooled, params["head.cam.w1"]), params["head.cam.b1"]))
    raw = nn.add(nn.matmul(h, params["head.cam.w2"]), params["head.cam.b2"])
    cand_t = np.stack([c.translation for c in candidates])
    half_tz = np.abs(cand_t[:, 2:3]) * 0.5
    delta = nn.mul(nn.tanh(raw), nn.Tensor(half_tz))
    trans_out = nn.add(nn.Tensor(cand_t), delta)
    return MrtTensors(pose=pose_out, shape=shape_out, translation=trans_out)


def mrt_forward(image: np.ndarray, candidate: Candidate, model: BodyModel,
                params: dict, cfg: MrtConfig, colors: NccColors | None = None) -> MrtOutput:
    """Refine one candidate against one image."""
    out = mrt_apply(params, cfg, model, image[None], [candidate], colors)
    pose = PoseParams.from_vector(out.pose.data[0].astype(np.float64))
    return MrtOutput(
        pose=pose,
        shape=ShapeParams(beta=out.shape.data[0].astype(np.float64)),
        translation=out.translation.data[0].astype(np.float64),
    )


# --------------------------------------------------------------------------
# Loss


def mrt_loss(out: MrtTensors, gt: dict, model: BodyModel, intr: Intrinsics,
             weights: LossWeights | None = None, px_scale: float = 1.0) -> tuple[nn.Tensor, dict]:
    """Weighted parameter + 3D keypoint + 2D projection loss over a batch.

    gt keys: j2d (B, N, 2) and conf (B, N) are required; pose (B, K, 3),
    shape (B, S) and j3d (B, N, 3) are optional and their terms vanish when
    absent. Joints that project behind the camera are masked out of the 2D
    term and counted in the returned aux dict. `px_scale` multiplies the 2D
    residual; training passes 1/image_size so all terms share one scale
    (plain momentum SGD cannot cope with a raw-pixel term).
    """
    weights = weights or LossWeights()
    b = out.pose.data.shape[0]
    aux = {"behind": 0}
    terms = []

    if gt.get("pose") is not None and gt.get("shape") is not None:
        dpose = nn.reshape(nn.sub(out.pose, nn.Tensor(gt["pose"])), (b, -1))
        dshape = nn.sub(out.shape, nn.Tensor(gt["shape"]))
        dvec = nn.concat([dpose, dshape], axis=1)
        terms.append(nn.mul(nn.mean(nn.l2norm(dvec, axis=1)), weights.w1))

    verts = skinned_vertices(model, out.pose, out.shape)
    joints = keypoints_tensor(model, verts)
    n = joints.data.shape[1]
    ridx = root_keypoint_indices(model)

    if gt.get("j3d") is not None:
        sel = nn.concat([nn.narrow(joints, 1, i, 1) for i in ridx], axis=1)
        center = nn.mean(sel, axis=1, keepdims=True)
        pred_c = nn.sub(joints, center)
        gt_j3d = np.asarray(gt["j3d"])
        gt_c = gt_j3d - gt_j3d[:, list(ridx)].mean(axis=1, keepdims=True)
        diff = nn.reshape(nn.sub(pred_c, nn.Tensor(gt_c)), (b, -1))
        terms.append(nn.mul(nn.mean(nn.l2norm(diff, axis=1)), weights.w2))

    uv = project_tensor(joints, intr, out.translation)
    depth = joints.data[..., 2] + out.translation.data[:, 2:3]
    visible = depth > MIN_DEPTH
    aux["behind"] = int((~visible).sum())
    wmask = (np.asarray(gt["conf"]) * visible).astype(out.pose.data.dtype) * px_scale
    resid = nn.mul(nn.sub(uv, nn.Tensor(gt["j2d"])), nn.Tensor(wmask[..., None]))
    terms.append(nn.mul(nn.mean(nn.l2norm(nn.reshape(resid, (b, n * 2)), axis=1)), weights.w2))

    total = terms[0]
    for t in terms[1:]:
        total = nn.add(total, t)
    return total, aux


# --------------------------------------------------------------------------
# Augmentation


def _flip_axis_angle(v: np.ndarray) -> np.ndarray:
    out = np.asarray(v, dtype=np.float64).copy()
    out[..., 1] *= -1.0
    out[..., 2] *= -1.0
    return out


def flip_pose(pose: PoseParams, model: BodyModel) -> PoseParams:
    """Mirror a pose across the body's sagittal plane (x -> -x)."""
    perm = model.joint_flip_perm
    joints = np.empty_like(pose.joints)
    for j in range(1, model.num_joints):
        joints[int(perm[j]) - 1] = _flip_axis_angle(pose.joints[j - 1])
    return PoseParams(global_orient=_flip_axis_angle(pose.global_orient), joints=joints)


def flip_candidate(cand: Candidate, model: BodyModel) -> Candidate:
    t = cand.translation.copy()
    t[0] *= -1.0
    return Candidate(pose=flip_pose(cand.pose, model), translation=t,
                     fit_loss=cand.fit_loss, pool_index=cand.pool_index)


def flip_sample(sample: Sample, model: BodyModel, width: float) -> Sample:
    """Horizontal mirror of image, keypoints and ground truth. Involutive."""
    perm = model.keypoint_flip_perm
    image = None if sample.image is None else sample.image[:, ::-1].copy()
    j2d = sample.j2d.copy()
    j2d[:, 0] = width - j2d[:, 0]
    j2d = j2d[perm]
    conf = sample.conf[perm].copy()
    gt = None
    if sample.gt is not None:
        g = sample.gt
        pose = flip_pose(g.pose, model)
        t = g.translation.copy()
        t[0] *= -1.0
        j3d = g.j3d.copy()
        j3d[:, 0] *= -1.0
        j3d = j3d[perm]
        gt = GroundTruth(pose=pose, shape=ShapeParams(beta=g.shape.beta.copy()),
                         translation=t, j3d=j3d, mesh=forward(model, pose, g.shape))
    return Sample(image=image, j2d=j2d, conf=conf, gt=gt)


def _rotate_image(image: np.ndarray, phi: float, c1: float, c2: float) -> np.ndarray:
    h, w = image.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    u = xs + 0.5 - c1
    v = ys + 0.5 - c2
    cp, sp = np.cos(-phi), np.sin(-phi)
    su = cp * u - sp * v + c1 - 0.5
    sv = sp * u + cp * v + c2 - 0.5
    x0 = np.floor(su).astype(int)
    y0 = np.floor(sv).astype(int)
    fx = (su - x0)[..., None]
    fy = (sv - y0)[..., None]

    def at(yy, xx):
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        out = np.zeros((*yy.shape, image.shape[2]))
        out[ok] = image[yy[ok], xx[ok]]
        return out

    top = at(y0, x0) * (1 - fx) + at(y0, x0 + 1) * fx
    bot = at(y0 + 1, x0) * (1 - fx) + at(y0 + 1, x0 + 1) * fx
    return top * (1 - fy) + bot * fy


def rotate_candidate(cand: Candidate, phi: float, root: np.ndarray) -> Candidate:
    rz = rodrigues(np.array([0.0, 0.0, phi]))
    orient = rotation_log(rz @ rodrigues(cand.pose.global_orient))
    t = rz @ cand.translation + (rz - np.eye(3)) @ root
    return Candidate(pose=PoseParams(global_orient=orient, joints=cand.pose.joints.copy()),
                     translation=t, fit_loss=cand.fit_loss, pool_index=cand.pool_index)


def rotate_sample(sample: Sample, model: BodyModel, phi: float, intr: Intrinsics) -> Sample:
    """In-plane rotation about the principal point, labels kept consistent."""
    rz = rodrigues(np.array([0.0, 0.0, phi]))
    root = model.joint_rest[0]
    image = None
    if sample.image is not None:
        image = _rotate_image(sample.image, phi, intr.c1, intr.c2)
    c = np.array([intr.c1, intr.c2])
    r2 = np.array([[np.cos(phi), -np.sin(phi)], [np.sin(phi), np.cos(phi)]])
    j2d = (sample.j2d - c) @ r2.T + c
    gt = None
    if sample.gt is not None:
        g = sample.gt
        orient = rotation_log(rz @ rodrigues(g.pose.global_orient))
        pose = PoseParams(global_orient=orient, joints=g.pose.joints.copy())
        t = rz @ g.translation + (rz - np.eye(3)) @ root
        j3d = (g.j3d - root) @ rz.T + root
        gt = GroundTruth(pose=pose, shape=ShapeParams(beta=g.shape.beta.copy()),
                         translation=t, j3d=j3d, mesh=forward(model, pose, g.shape))
    return Sample(image=image, j2d=j2d, conf=sample.conf.copy(), gt=gt)


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    rotate_prob: float = 0.5
    max_rotate: float = np.pi / 3
    channel_range: tuple = (0.6, 1.4)


def augment(sample: Sample, cand: Candidate, model: BodyModel, cfg: MrtConfig,
            rng: np.random.Generator, acfg: AugmentConfig | None = None
            ) -> tuple[Sample, Candidate]:
    acfg = acfg or AugmentConfig()
    intr = cfg.intrinsics
    flip_ok = abs(2 * intr.c1 - cfg.image_hw) < 1e-6
    if flip_ok and rng.uniform() < acfg.flip_prob:
        sample = flip_sample(sample, model, float(cfg.image_hw))
        cand = flip_candidate(cand, model)
    if rng.uniform() < acfg.rotate_prob:
        phi = rng.uniform(-acfg.max_rotate, acfg.max_rotate)
        sample = rotate_sample(sample, model, phi, intr)
        cand = rotate_candidate(cand, phi, model.joint_rest[0])
    if sample.image is not None:
        scale = rng.uniform(*acfg.channel_range, size=3)
        sample = replace(sample, image=np.clip(sample.image * scale, 0.0, 1.0))
    return sample, cand


# --------------------------------------------------------------------------
# Training


@dataclass
class MrtTrainConfig:
    epochs: int = 24
    batch_size: int = 12
    optimizer: str = "adamw"       # "adamw" or "sgd"
    lr: float = 1e-3
    momentum: float = 0.9          # sgd only
    weight_decay: float = 1e-4
    lr_drop: float = 0.1           # applied for the last quarter of the epochs
    clip_norm: float = 50.0
    px_scale: float | None = None  # None -> 1 / image size
    candidates_per_sample: int = 2
    augment: bool = True
    flip_prob: float = 0.5
    rotate_prob: float = 0.15
    max_rotate: float = np.pi / 3
    channel_range: tuple = (0.6, 1.4)
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)


def make_optimizer(params: dict, tcfg) -> "nn.SGD | nn.AdamW":
    if tcfg.optimizer == "sgd":
        return nn.SGD(params, lr=tcfg.lr, momentum=tcfg.momentum,
                      weight_decay=tcfg.weight_decay)
    return nn.AdamW(params, lr=tcfg.lr, weight_decay=tcfg.weight_decay)


def train_mrt(samples: list[Sample], branches: list[list[Candidate]], model: BodyModel,
              cfg: MrtConfig, tcfg: MrtTrainConfig | None = None,
              log_path: str | Path | None = None,
              hook=None) -> tuple[dict, list[dict]]:
    """Train the refiner on (sample, stage-1 candidate) pairs.

    Deterministic given the seed: initialization, pair choice, augmentation
    and batching all derive from it. Candidate PNCC rasters are cached
    across epochs; horizontal flips reuse the cache through a raster
    transform while rotations re-render. Returns (parameter arrays, log
    records); the log is also written as JSON lines when log_path is given.
    """
    if not samples:
        raise EmptyDataset("no training samples")
    tcfg = tcfg or MrtTrainConfig()
    params = init_mrt_params(cfg, tcfg.seed)
    opt = make_optimizer(params, tcfg)
    colors = ncc(model.template)
    drop_epoch = max(1, (3 * tcfg.epochs) // 4)
    flip_ok = abs(2 * cfg.intrinsics.c1 - cfg.image_hw) < 1e-6
    raster_cache: dict[tuple[int, int], PnccMap] = {}
    log: list[dict] = []
    for epoch in range(tcfg.epochs):
        opt.lr = tcfg.lr * (tcfg.lr_drop if epoch >= drop_epoch else 1.0)
        pairs: list[tuple[int, int]] = []
        for i, br in enumerate(branches):
            if not br:
                continue
            rng_i = np.random.default_rng(np.random.SeedSequence([tcfg.seed, epoch, i, 0x9A]))
            take = min(tcfg.candidates_per_sample, len(br))
            for bi in rng_i.choice(len(br), size=take, replace=False):
                pairs.append((i, int(bi)))
        order = np.random.default_rng(
            np.random.SeedSequence([tcfg.seed, epoch, 0x0D])).permutation(len(pairs))
        losses = []
        for start in range(0, len(order), tcfg.batch_size):
            chunk = [pairs[j] for j in order[start:start + tcfg.batch_size]]
            images, cands, pes = [], [], []
            gtp, gts, gtj3, gtj2, gtc = [], [], [], [], []
            for si, bi in chunk:
                s, c = samples[si], branches[si][bi]
                if (si, bi) not in raster_cache:
                    raster_cache[si, bi] = candidate_pncc(c, model, colors, cfg)
                raster = raster_cache[si, bi]
                if tcfg.augment:
                    rng_a = np.random.default_rng(
                        np.random.SeedSequence([tcfg.seed, epoch, si, bi, 0xA6]))
                    if flip_ok and rng_a.uniform() < tcfg.flip_prob:
                        s = flip_sample(s, model, float(cfg.image_hw))
                        c = flip_candidate(c, model)
                        raster = flip_pncc_map(raster)
                    if rng_a.uniform() < tcfg.rotate_prob:
                        phi = rng_a.uniform(-tcfg.max_rotate, tcfg.max_rotate)
                        s = rotate_sample(s, model, phi, cfg.intrinsics)
                        c = rotate_candidate(c, phi, model.joint_rest[0])
                        raster = candidate_pncc(c, model, colors, cfg)
                    scale = rng_a.uniform(*tcfg.channel_range, size=3)
                    s = replace(s, image=np.clip(s.image * scale, 0.0, 1.0))
                images.append(s.image)
                cands.append(c)
                pes.append(pe_from_map(raster, cfg))
                gtp.append(np.concatenate([s.gt.pose.global_orient[None], s.gt.pose.joints]))
                gts.append(s.gt.shape.beta)
                gtj3.append(s.gt.j3d)
                gtj2.append(s.j2d)
                gtc.append(s.conf)
            out = mrt_apply(params, cfg, model, np.stack(images), cands, colors,
                            pe_override=np.stack(pes))
            gt = {"pose": np.stack(gtp), "shape": np.stack(gts), "j3d": np.stack(gtj3),
                  "j2d": np.stack(gtj2), "conf": np.stack(gtc)}
            scale = tcfg.px_scale if tcfg.px_scale is not None else 1.0 / cfg.image_hw
            loss, _ = mrt_loss(out, gt, model, cfg.intrinsics, tcfg.weights, px_scale=scale)
            loss.backward()
            nn.clip_grad_norm(params, tcfg.clip_norm)
            opt.step()
            opt.zero_grad()
            losses.append(float(loss.data))
        log.append({"epoch": epoch, "loss": float(np.mean(losses)), "lr": opt.lr})
        if hook is not None:
            hook(epoch, params, log[-1])
    if log_path is not None:
        Path(log_path).write_text("\n".join(json.dumps(r) for r in log) + "\n")
    return {name: t.data.copy() for name, t in params.items()}, log
