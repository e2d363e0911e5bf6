"""Simplified articulated linear body model.

A deterministic, procedurally generated humanoid: capsule-chain template
mesh, smooth distance-based skinning, linear shape blendshapes applied
before skinning, and a linear keypoint regressor. Coordinates are
"body units" (roughly meters) with +y pointing down so rendered bodies
appear upright in image space.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArtifactFormatError, InvalidDims, ShapeMismatch
from .geometry import rodrigues

BODY_FORMAT = "mion-body/1"

_MIRROR = np.diag([-1.0, 1.0, 1.0])


@dataclass
class BodyModel:
    template: np.ndarray       # (V, 3)
    shape_basis: np.ndarray    # (V, 3, S)
    parents: np.ndarray        # (K,), parent joint index, root = -1
    joint_rest: np.ndarray     # (K, 3)
    skin_weights: np.ndarray   # (V, K), rows sum to 1, non-negative
    faces: np.ndarray          # (F, 3) vertex indices
    joint_regressor: np.ndarray  # (N, V), rows sum to 1
    joint_names: list[str] = field(default_factory=list)
    keypoint_joints: np.ndarray | None = None   # (N,) skeleton joint per tracked keypoint
    joint_flip_perm: np.ndarray | None = None   # (K,) left/right mirror permutation
    keypoint_flip_perm: np.ndarray | None = None  # (N,)

    @property
    def num_vertices(self) -> int:
        return self.template.shape[0]

    @property
    def num_joints(self) -> int:
        return self.parents.shape[0]

    @property
    def num_shapes(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def num_keypoints(self) -> int:
        return self.joint_regressor.shape[0]

    def validate(self, tol: float = 1e-6) -> None:
        v, k = self.num_vertices, self.num_joints
        if self.parents[0] != -1 or np.any(self.parents[1:] >= np.arange(1, k)):
            raise InvalidDims("parents must encode a single-rooted tree in topological order")
        if self.skin_weights.shape != (v, k):
            raise ShapeMismatch("skin_weights shape mismatch")
        if np.any(self.skin_weights < 0):
            raise InvalidDims("skin weights must be non-negative")
        if np.abs(self.skin_weights.sum(axis=1) - 1.0).max() > tol:
            raise InvalidDims("skin weight rows must sum to 1")
        if self.faces.size and self.faces.max() >= v:
            raise InvalidDims("face index out of range")
        if np.abs(self.joint_regressor.sum(axis=1) - 1.0).max() > tol:
            raise InvalidDims("joint regressor rows must sum to 1")

    def save(self, path: str | Path) -> None:
        doc = {
            "format": BODY_FORMAT,
            "template": self.template.tolist(),
            "shape_basis": self.shape_basis.tolist(),
            "parents": self.parents.tolist(),
            "joint_rest": self.joint_rest.tolist(),
            "skin_weights": self.skin_weights.tolist(),
            "faces": self.faces.tolist(),
            "joint_regressor": self.joint_regressor.tolist(),
            "joint_names": self.joint_names,
            "keypoint_joints": None if self.keypoint_joints is None else self.keypoint_joints.tolist(),
            "joint_flip_perm": None if self.joint_flip_perm is None else self.joint_flip_perm.tolist(),
            "keypoint_flip_perm": (
                None if self.keypoint_flip_perm is None else self.keypoint_flip_perm.tolist()
            ),
        }
        Path(path).write_text(json.dumps(doc, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "BodyModel":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ArtifactFormatError(f"cannot parse body model: {e}") from e
        if not isinstance(doc, dict) or doc.get("format") != BODY_FORMAT:
            raise ArtifactFormatError(f"not a {BODY_FORMAT} document")
        opt = lambda key, dt: (None if doc.get(key) is None else np.asarray(doc[key], dtype=dt))
        model = cls(
            template=np.asarray(doc["template"], dtype=np.float64),
            shape_basis=np.asarray(doc["shape_basis"], dtype=np.float64),
            parents=np.asarray(doc["parents"], dtype=np.int64),
            joint_rest=np.asarray(doc["joint_rest"], dtype=np.float64),
            skin_weights=np.asarray(doc["skin_weights"], dtype=np.float64),
            faces=np.asarray(doc["faces"], dtype=np.int64),
            joint_regressor=np.asarray(doc["joint_regressor"], dtype=np.float64),
            joint_names=list(doc.get("joint_names", [])),
            keypoint_joints=opt("keypoint_joints", np.int64),
            joint_flip_perm=opt("joint_flip_perm", np.int64),
            keypoint_flip_perm=opt("keypoint_flip_perm", np.int64),
        )
        model.validate()
        return model


@dataclass
class PoseParams:
    global_orient: np.ndarray  # (3,)
    joints: np.ndarray         # (K-1, 3)

    @classmethod
    def zero(cls, k: int) -> "PoseParams":
        return cls(np.zeros(3), np.zeros((k - 1, 3)))

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "PoseParams":
        vec = np.asarray(vec, dtype=np.float64).reshape(-1, 3)
        return cls(vec[0].copy(), vec[1:].copy())

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.global_orient.reshape(1, 3), self.joints], axis=0).ravel()

    def copy(self) -> "PoseParams":
        return PoseParams(self.global_orient.copy(), self.joints.copy())


@dataclass
class ShapeParams:
    beta: np.ndarray  # (S,)

    @classmethod
    def zero(cls, s: int) -> "ShapeParams":
        return cls(np.zeros(s))


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray     # (F, 3), shared with the model


# --------------------------------------------------------------------------
# Toy model construction


def _skeleton_layout(k: int) -> tuple[list[str], list[int], dict[str, int]]:
    """Joint names and parents for a humanoid with k joints (k >= 4).

    Below 7 joints the skeleton degenerates to a midline chain; from 7 up it
    grows spine segments and symmetric leg/arm chains.
    """
    if k < 7:
        names = ["pelvis"] + [f"spine{i}" for i in range(1, k)]
        parents = [-1] + list(range(k - 1))
        return names, parents, {}
    n_spine, n_leg, n_arm = 1, 1, 1
    remaining = k - 7
    while remaining > 0:
        if remaining >= 2 and n_leg <= n_arm and n_leg < 5:
            n_leg += 1
            remaining -= 2
        elif remaining >= 2 and n_arm < 5:
            n_arm += 1
            remaining -= 2
        else:
            n_spine += 1
            remaining -= 1
    names = ["pelvis"]
    parents = [-1]
    for i in range(n_spine):
        names.append("neck" if i == n_spine - 1 else f"spine{i + 1}")
        parents.append(len(names) - 2)
    names.append("head")
    parents.append(len(names) - 2)
    leg_names = ["hip", "knee", "ankle", "toe", "toe2"][:n_leg]
    arm_names = ["shoulder", "elbow", "wrist", "hand", "hand2"][:n_arm]
    chest = n_spine  # last spine joint index
    for side in ("l", "r"):
        for i, nm in enumerate(leg_names):
            names.append(f"{side}_{nm}")
            parents.append(0 if i == 0 else len(names) - 2)
        for i, nm in enumerate(arm_names):
            names.append(f"{side}_{nm}")
            parents.append(chest if i == 0 else len(names) - 2)
    idx = {nm: i for i, nm in enumerate(names)}
    return names, parents, idx


def _rest_positions(names: list[str], parents: list[int], rng: np.random.Generator) -> np.ndarray:
    """Rest joint locations (+y down), jittered symmetrically from the seed."""
    pos = np.zeros((len(names), 3))
    spine = [n for n in names if n.startswith("spine") or n == "neck"]
    n_spine = len(spine)
    for i, nm in enumerate(names):
        if nm == "pelvis":
            continue
        if nm.startswith("spine") or nm == "neck":
            rank = spine.index(nm) + 1
            pos[i] = (0.0, -0.52 * rank / n_spine, 0.0)
        elif nm == "head":
            pos[i] = (0.0, -0.70, 0.0)
        else:
            side, part = nm.split("_", 1)
            sx = 1.0 if side == "l" else -1.0
            legs = {"hip": (0.10, 0.02), "knee": (0.13, 0.46), "ankle": (0.15, 0.90),
                    "toe": (0.16, 1.00), "toe2": (0.17, 1.05)}
            arms = {"shoulder": (0.19, -0.46), "elbow": (0.34, -0.20), "wrist": (0.44, 0.04),
                    "hand": (0.50, 0.16), "hand2": (0.54, 0.24)}
            x, y = legs.get(part) or arms[part]
            pos[i] = (sx * x, y, 0.0)
    # Jitter: midline joints move in (y, z) only, left joints in all axes,
    # right joints mirror their left partner so the skeleton stays symmetric.
    jit = rng.uniform(-0.015, 0.015, size=(len(names), 3))
    for i, nm in enumerate(names):
        if nm == "pelvis":
            continue
        if nm.startswith("r_"):
            continue
        if nm.startswith("l_"):
            pos[i] += jit[i]
        else:
            pos[i] += (0.0, jit[i, 1], jit[i, 2])
    for i, nm in enumerate(names):
        if nm.startswith("r_"):
            pos[i] = _MIRROR @ pos[names.index("l_" + nm[2:])]
    return pos


def _zipper(idx_a: list[int], ang_a: np.ndarray, idx_b: list[int], ang_b: np.ndarray) -> list[tuple]:
    """Triangulate the band between two rings of possibly different sizes."""
    faces = []
    m, n = len(idx_a), len(idx_b)
    i = j = 0
    while i < m or j < n:
        na = ang_a[(i + 1) % m] + (2 * np.pi if i + 1 >= m else 0.0) if i < m else np.inf
        nb = ang_b[(j + 1) % n] + (2 * np.pi if j + 1 >= n else 0.0) if j < n else np.inf
        if na <= nb and i < m:
            faces.append((idx_a[i % m], idx_b[j % n], idx_a[(i + 1) % m]))
            i += 1
        else:
            faces.append((idx_a[i % m], idx_b[j % n], idx_b[(j + 1) % n]))
            j += 1
    return faces


def _tube(p0: np.ndarray, p1: np.ndarray, radius: float, quota: int, base: int):
    """Closed capsule-like tube from p0 to p1 with exactly `quota` vertices.

    Returns (vertices, faces) with face indices offset by `base`.
    quota >= 5 (two cap apexes plus at least one 3-vertex ring).
    """
    d = p1 - p0
    length = float(np.linalg.norm(d))
    dhat = d / max(length, 1e-9)
    up = np.array([0.0, 1.0, 0.0]) if abs(dhat[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(dhat, up)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(dhat, e1)
    n_rings = max(1, int(round((quota - 2) / 6)))
    counts = [(quota - 2) // n_rings] * n_rings
    for i in range((quota - 2) - sum(counts)):
        counts[i] += 1
    while min(counts) < 3:  # merge too-small rings into neighbours
        n_rings -= 1
        counts = [(quota - 2) // n_rings] * n_rings
        for i in range((quota - 2) - sum(counts)):
            counts[i] += 1
    verts = [p0 - 0.6 * radius * dhat]
    rings = []
    ts = np.linspace(0.04, 0.96, n_rings) if n_rings > 1 else np.array([0.5])
    for t, m in zip(ts, counts):
        ang = 2 * np.pi * np.arange(m) / m
        taper = 0.75 + 0.25 * np.sin(np.pi * t)
        start = base + len(verts)
        centre = p0 + t * d
        for a in ang:
            verts.append(centre + radius * taper * (np.cos(a) * e1 + np.sin(a) * e2))
        rings.append((list(range(start, start + m)), ang))
    verts.append(p1 + 0.6 * radius * dhat)
    apex0, apex1 = base, base + len(verts) - 1
    faces = []
    ia, aa = rings[0]
    for t in range(len(ia)):
        faces.append((apex0, ia[t], ia[(t + 1) % len(ia)]))
    for r in range(len(rings) - 1):
        faces.extend(_zipper(rings[r][0], rings[r][1], rings[r + 1][0], rings[r + 1][1]))
    ib, ab = rings[-1]
    for t in range(len(ib)):
        faces.append((apex1, ib[t], ib[(t + 1) % len(ib)]))
    return verts, faces


def _bone_radius(child_name: str, rng_val: float) -> float:
    table = {"spine": 0.105, "neck": 0.085, "head": 0.092, "hip": 0.068, "knee": 0.052,
             "ankle": 0.042, "toe": 0.035, "shoulder": 0.052, "elbow": 0.040,
             "wrist": 0.034, "hand": 0.030}
    part = child_name.split("_")[-1].rstrip("2")
    return table.get(part, 0.05) * (1.0 + 0.12 * rng_val)


def _segment_distances(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-18:
        return np.linalg.norm(points - a, axis=1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(points - proj, axis=1)


def _shape_field(points: np.ndarray, rng: np.random.Generator, s: int) -> np.ndarray:
    """Smooth mirror-equivariant displacement basis, (V, 3, S)."""
    v = points.shape[0]
    basis = np.zeros((v, 3, s))
    if s == 0:
        return basis
    # Component 0 is a radial size field so beta[0] visibly scales the body.
    basis[:, :, 0] = 0.035 * points
    for comp in range(1, s):
        g = np.zeros((v, 3))
        gm = np.zeros((v, 3))
        mirrored = points @ _MIRROR.T
        for _ in range(3):
            amp = rng.uniform(-0.015, 0.015, size=3)
            freq = rng.uniform(1.0, 4.0, size=3)
            phase = rng.uniform(0.0, 2 * np.pi, size=3)
            g += amp * np.sin(points @ np.diag(freq) + phase)
            gm += amp * np.sin(mirrored @ np.diag(freq) + phase)
        basis[:, :, comp] = 0.5 * (g + gm @ _MIRROR.T)
    return basis


_LSP_ORDER = ["r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle",
              "r_wrist", "r_elbow", "r_shoulder", "l_shoulder", "l_elbow", "l_wrist",
              "neck", "head"]


def make_toy_model(seed: int, v: int = 432, k: int = 16, s: int = 8, n: int = 14) -> BodyModel:
    """Deterministic desk-scale body model.

    Capsule-chain template with exactly `v` vertices, `k` joints, `s` shape
    components and `n` tracked keypoints. Same seed gives a byte-identical
    serialized model.
    """
    if v < 3 * k or k < 4 or n > k or s < 0 or n < 1:
        raise InvalidDims(f"invalid dims v={v} k={k} s={s} n={n}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x4D494F4E]))
    names, parents, _ = _skeleton_layout(k)
    rest = _rest_positions(names, parents, rng)

    bones = [(parents[c], c) for c in range(1, k)]
    radii_draw = rng.uniform(-1.0, 1.0, size=len(bones))
    radii = np.empty(len(bones))
    for b, (p, c) in enumerate(bones):
        nm = names[c]
        if nm.startswith("r_"):
            left = next(i for i, (_, cc) in enumerate(bones) if names[cc] == "l_" + nm[2:])
            radii[b] = radii[left]
        else:
            radii[b] = _bone_radius(nm, float(radii_draw[b]))

    # Vertex quotas: proportional to bone length, symmetric across sides,
    # remainder absorbed by midline bones. Falls back to covering only the
    # longest bones when the budget is very small.
    lengths = np.array([np.linalg.norm(rest[c] - rest[p]) + 0.12 for p, c in bones])
    central = [b for b, (p, c) in enumerate(bones) if not names[c].startswith(("l_", "r_"))]
    left = [b for b, (p, c) in enumerate(bones) if names[c].startswith("l_")]
    right_of = {b: next(i for i, (_, cc) in enumerate(bones) if names[cc] == "r_" + names[bones[b][1]][2:])
                for b in left}
    quotas = np.zeros(len(bones), dtype=np.int64)
    if v >= 5 * len(bones):
        w = lengths / lengths.sum()
        quotas = np.maximum(5, np.floor(v * w).astype(np.int64))
        for b in left:
            q = (quotas[b] + quotas[right_of[b]]) // 2
            quotas[b] = quotas[right_of[b]] = q
        diff = v - int(quotas.sum())
        order = central if central else list(range(len(bones)))
        i = 0
        while diff != 0:
            b = order[i % len(order)]
            if diff > 0:
                quotas[b] += 1
                diff -= 1
            elif quotas[b] > 5:
                quotas[b] -= 1
                diff += 1
            i += 1
    else:
        budget = v
        for b in np.argsort(-lengths):
            if budget >= 5:
                quotas[b] = 5
                budget -= 5

    # Right-side tubes are exact mirrors of their left twins so the template
    # is left/right symmetric to the last bit (flip augmentation relies on it).
    verts: list[np.ndarray] = []
    faces: list[tuple] = []
    left_tubes: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for b, (p, c) in enumerate(bones):
        if quotas[b] == 0:
            continue
        nm = names[c]
        if nm.startswith("r_") and nm[2:] in left_tubes:
            lv, lf = left_tubes[nm[2:]]
            tv = list(lv @ _MIRROR.T)
            tf = [tuple(f + len(verts)) for f in lf]
        else:
            tv, tf = _tube(rest[p], rest[c], radii[b], int(quotas[b]), len(verts))
            if nm.startswith("l_"):
                base = len(verts)
                left_tubes[nm[2:]] = (np.asarray(tv),
                                      np.asarray([[i - base for i in f] for f in tf]))
        verts.extend(tv)
        faces.extend(tf)
    while len(verts) < v:  # leftover budget parked on the root, unreferenced
        verts.append(rest[0] + np.array([0.0, 0.001 * (v - len(verts)), 0.0]))
    template = np.asarray(verts)
    faces_arr = np.asarray(faces, dtype=np.int64)

    # Smooth skinning: each joint owns the segments running to its children
    # (plus a stub past each leaf); weights fall off with distance.
    segs: dict[int, list[tuple[np.ndarray, np.ndarray]]] = {j: [] for j in range(k)}
    for p, c in bones:
        segs[p].append((rest[p], rest[c]))
    for j in range(k):
        if not segs[j]:
            par = parents[j]
            d = rest[j] - rest[par]
            d = d / max(np.linalg.norm(d), 1e-9)
            segs[j].append((rest[j], rest[j] + 0.16 * d))
    sigma = 0.055
    weights = np.zeros((v, k))
    for j in range(k):
        d = np.min([_segment_distances(template, a, b) for a, b in segs[j]], axis=0)
        weights[:, j] = np.exp(-((d / sigma) ** 2))
    weights[weights < 1e-10] = 0.0
    rowsum = weights.sum(axis=1, keepdims=True)
    flat = rowsum[:, 0] <= 0
    weights[flat, 0] = 1.0
    rowsum[flat] = 1.0
    weights /= rowsum

    # Keypoint regressor: gaussian ring of nearby vertices per tracked joint,
    # least-norm corrected so the rest mesh regresses to joint_rest exactly.
    priority = [nm for nm in _LSP_ORDER if nm in names]
    priority += [nm for nm in names if nm not in priority]
    tracked = priority[:n]
    kp_joints = np.array([names.index(nm) for nm in tracked], dtype=np.int64)
    regressor = np.zeros((n, v))
    n_near = min(24, v)
    for row, j in enumerate(kp_joints):
        p = rest[j]
        dist = np.linalg.norm(template - p, axis=1)
        order = np.argsort(dist, kind="stable")
        # tie-inclusive cut: ring vertices are exactly equidistant, and the
        # selected set must be a function of distance alone to stay mirror
        # symmetric
        cut = dist[order[min(n_near, v) - 1]]
        near = order[dist[order] <= cut + 1e-12]
        w0 = np.exp(-((dist[near] / 0.06) ** 2))
        w0 /= w0.sum()
        c_mat = np.vstack([np.ones(len(near)), template[near].T])  # (4, n)
        d_vec = np.concatenate([[1.0], p]) - c_mat @ w0
        delta = c_mat.T @ np.linalg.solve(c_mat @ c_mat.T + 1e-12 * np.eye(4), d_vec)
        regressor[row, near] = w0 + delta

    flip_j = np.arange(k, dtype=np.int64)
    for i, nm in enumerate(names):
        if nm.startswith("l_"):
            flip_j[i] = names.index("r_" + nm[2:])
        elif nm.startswith("r_"):
            flip_j[i] = names.index("l_" + nm[2:])
    flip_n = np.arange(n, dtype=np.int64)
    for row, nm in enumerate(tracked):
        if nm.startswith("l_") and "r_" + nm[2:] in tracked:
            flip_n[row] = tracked.index("r_" + nm[2:])
        elif nm.startswith("r_") and "l_" + nm[2:] in tracked:
            flip_n[row] = tracked.index("l_" + nm[2:])

    model = BodyModel(
        template=template,
        shape_basis=_shape_field(template, rng, s),
        parents=np.asarray(parents, dtype=np.int64),
        joint_rest=rest,
        skin_weights=weights,
        faces=faces_arr,
        joint_regressor=regressor,
        joint_names=names,
        keypoint_joints=kp_joints,
        joint_flip_perm=flip_j,
        keypoint_flip_perm=flip_n,
    )
    model.validate()
    return model


# --------------------------------------------------------------------------
# Kinematics


def global_joint_transforms(model: BodyModel, pose: PoseParams) -> tuple[np.ndarray, np.ndarray]:
    """Per-joint world rotations (K,3,3) and posed joint positions (K,3).

    The root rotation (global orientation) pivots about the root joint, so
    the root joint itself never moves.
    """
    k = model.num_joints
    rots = np.empty((k, 3, 3))
    pos = np.empty((k, 3))
    rots[0] = rodrigues(pose.global_orient)
    pos[0] = model.joint_rest[0]
    for j in range(1, k):
        p = model.parents[j]
        rots[j] = rots[p] @ rodrigues(pose.joints[j - 1])
        pos[j] = pos[p] + rots[p] @ (model.joint_rest[j] - model.joint_rest[p])
    return rots, pos


def forward(model: BodyModel, pose: PoseParams, shape: ShapeParams) -> Mesh:
    """Pose and shape the template: blendshapes first, then LBS."""
    if shape.beta.shape[0] != model.num_shapes:
        raise ShapeMismatch(f"expected {model.num_shapes} shape coefficients")
    if pose.joints.shape != (model.num_joints - 1, 3):
        raise ShapeMismatch("pose joint count mismatch")
    shaped = model.template + model.shape_basis @ shape.beta
    rots, pos = global_joint_transforms(model, pose)
    offset = pos - np.einsum("kab,kb->ka", rots, model.joint_rest)
    per_joint = np.einsum("kab,vb->kva", rots, shaped) + offset[:, None, :]
    vertices = np.einsum("vk,kva->va", model.skin_weights, per_joint)
    return Mesh(vertices=vertices, faces=model.faces)


def regress_joints(model: BodyModel, mesh: Mesh) -> np.ndarray:
    """Tracked keypoints (N, 3) as a linear map of mesh vertices."""
    if mesh.vertices.shape[0] != model.num_vertices:
        raise ShapeMismatch("mesh vertex count mismatch")
    return model.joint_regressor @ mesh.vertices
