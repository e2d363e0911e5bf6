"""Candidate pool: clustering, batch camera fitting, diverse selection.

The pool holds P pose centroids x O orientation centroids with a
precomputed cache of oriented 3D keypoints (pose-major order: member
``i`` pairs pose ``i // O`` with orientation ``i % O``). Fitting the whole
pool against one sample's keypoints is the hot loop and is fully
vectorized; chunked execution across workers gives bit-identical results
because every member is independent.
"""

from __future__ import annotations

import json
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .body import BodyModel, PoseParams, ShapeParams, forward, regress_joints
from .camera import FitResult, Intrinsics, fit_translation_batch
from .errors import ArtifactFormatError, EmptyPool, InvalidK
from .geometry import rodrigues, rotation_log

POOL_MAGIC = b"MIONPOOL"


# --------------------------------------------------------------------------
# Procedural motion source (stand-in for a mocap corpus)

_JOINT_AMPLITUDE = {
    "hip": (0.7, 0.25, 0.35),
    "knee": (0.9, 0.05, 0.05),
    "ankle": (0.3, 0.1, 0.1),
    "toe": (0.2, 0.05, 0.05),
    "shoulder": (0.8, 0.5, 0.8),
    "elbow": (0.9, 0.15, 0.4),
    "wrist": (0.3, 0.2, 0.2),
    "hand": (0.2, 0.1, 0.1),
    "spine": (0.12, 0.2, 0.1),
    "neck": (0.12, 0.2, 0.1),
    "head": (0.2, 0.3, 0.15),
}


@dataclass
class MotionSet:
    poses: np.ndarray    # (M, 3*(K-1))
    orients: np.ndarray  # (M, 3)

    def __len__(self) -> int:
        return self.poses.shape[0]


@dataclass
class PoseSamplerConfig:
    archetypes: int = 24
    jitter: float = 0.22
    headings: int = 8
    heading_range: float = 0.9   # radians each side of frontal
    heading_jitter: float = 0.15
    tilt: float = 0.10


class PoseSampler:
    """Archetype-plus-jitter sampler over the toy model's pose space.

    A fixed set of archetype poses (drawn once from the seed) gives the
    pose distribution cluster structure; individual samples jitter around
    an archetype. Orientations are yaw headings with a little tilt.
    """

    def __init__(self, model: BodyModel, cfg: PoseSamplerConfig | None = None, seed: int = 0):
        self.cfg = cfg or PoseSamplerConfig()
        self.seed = int(seed)
        amps = []
        for name in model.joint_names[1:]:
            part = name.split("_")[-1].rstrip("2")
            amps.append(_JOINT_AMPLITUDE.get(part, (0.2, 0.2, 0.2)))
        self.amplitude = np.asarray(amps)  # (K-1, 3)
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0xA2C4]))
        a = self.cfg.archetypes
        self.archetype_poses = rng.uniform(-1.0, 1.0, size=(a, *self.amplitude.shape)) * self.amplitude

    def sample(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """One (pose_vector, orient_vector) draw."""
        cfg = self.cfg
        arch = rng.integers(cfg.archetypes)
        pose = self.archetype_poses[arch] + cfg.jitter * rng.uniform(-1, 1, self.amplitude.shape) * self.amplitude
        heading = int(rng.integers(cfg.headings))
        yaw = -cfg.heading_range + 2 * cfg.heading_range * heading / max(cfg.headings - 1, 1)
        yaw += cfg.heading_jitter * rng.uniform(-1, 1)
        pitch, roll = cfg.tilt * rng.uniform(-1, 1, 2)
        r = rodrigues(np.array([0.0, yaw, 0.0])) @ rodrigues(np.array([pitch, 0.0, 0.0]))
        r = r @ rodrigues(np.array([0.0, 0.0, roll]))
        return pose.ravel(), rotation_log(r)

    def motions(self, count: int, seed: int) -> MotionSet:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, int(seed), 0x5A11]))
        poses = np.empty((count, self.amplitude.size))
        orients = np.empty((count, 3))
        for i in range(count):
            poses[i], orients[i] = self.sample(rng)
        return MotionSet(poses=poses, orients=orients)


def load_motions(path: str | Path) -> MotionSet:
    """Read user-provided motions: one JSON object {"pose": [...], "orient": [...]} per line."""
    poses, orients = [], []
    try:
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            doc = json.loads(line)
            poses.append(np.asarray(doc["pose"], dtype=np.float64))
            orients.append(np.asarray(doc["orient"], dtype=np.float64))
    except (json.JSONDecodeError, KeyError) as e:
        raise ArtifactFormatError(f"bad motion file: {e}") from e
    if not poses:
        raise ArtifactFormatError("motion file is empty")
    return MotionSet(poses=np.stack(poses), orients=np.stack(orients))


# --------------------------------------------------------------------------
# k-means

def kmeans(data: np.ndarray, k: int, seed: int, max_iter: int = 50) -> np.ndarray:
    """Deterministic k-means++ / Lloyd clustering; returns (k, D) centroids.

    Empty clusters are re-seeded to the point farthest from its assigned
    centroid. The ``k == len(data)`` saturation case returns the data
    directly (the optimum, objective zero).
    """
    data = np.asarray(data, dtype=np.float64)
    m = data.shape[0]
    if k < 1 or k > m:
        raise InvalidK(f"k={k} incompatible with {m} points")
    if k == m:
        return data.copy()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6B6D]))

    centroids = np.empty((k, data.shape[1]))
    centroids[0] = data[rng.integers(m)]
    d2 = ((data - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            idx = int(rng.integers(m))
        else:
            idx = int(rng.choice(m, p=d2 / total))
        centroids[i] = data[idx]
        d2 = np.minimum(d2, ((data - centroids[i]) ** 2).sum(axis=1))

    prev_assign = None
    prev_obj = np.inf
    for _ in range(max_iter):
        dist = ((data[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = dist.argmin(axis=1)
        obj = float(dist[np.arange(m), assign].sum())
        assert obj <= prev_obj * (1 + 1e-12) + 1e-12, "k-means objective increased"
        prev_obj = obj
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        prev_assign = assign
        for c in range(k):
            mask = assign == c
            if mask.any():
                centroids[c] = data[mask].mean(axis=0)
            else:
                worst = int(dist[np.arange(m), assign].argmax())
                centroids[c] = data[worst]
                assign[worst] = c
    return centroids


# --------------------------------------------------------------------------
# Pool


@dataclass
class CandidatePool:
    pose_centroids: np.ndarray    # (P, 3*(K-1)) float64
    orient_centroids: np.ndarray  # (O, 3) float64
    joints_cache: np.ndarray      # (P*O, N, 3) float32

    @property
    def size(self) -> int:
        return self.joints_cache.shape[0]

    @property
    def num_orients(self) -> int:
        return self.orient_centroids.shape[0]

    def member_pose(self, index: int) -> PoseParams:
        p, o = divmod(int(index), self.num_orients)
        return PoseParams(
            global_orient=self.orient_centroids[o].copy(),
            joints=self.pose_centroids[p].reshape(-1, 3).copy(),
        )

    def member_pose_vector(self, index: int) -> np.ndarray:
        return self.member_pose(index).as_vector()

    def save(self, path: str | Path) -> None:
        p, o = self.pose_centroids.shape[0], self.orient_centroids.shape[0]
        n = self.joints_cache.shape[1]
        k = self.pose_centroids.shape[1] // 3 + 1
        with open(path, "wb") as fh:
            fh.write(POOL_MAGIC)
            fh.write(struct.pack("<5I", 1, p, o, n, k))
            fh.write(self.pose_centroids.astype("<f4").tobytes())
            fh.write(self.orient_centroids.astype("<f4").tobytes())
            fh.write(self.joints_cache.astype("<f4").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "CandidatePool":
        blob = Path(path).read_bytes()
        if blob[:8] != POOL_MAGIC:
            raise ArtifactFormatError("not a pool file (bad magic)")
        version, p, o, n, k = struct.unpack_from("<5I", blob, 8)
        if version != 1:
            raise ArtifactFormatError(f"unsupported pool version {version}")
        off = 8 + 20
        want = (p * 3 * (k - 1) + o * 3 + p * o * n * 3) * 4
        if len(blob) - off != want:
            raise ArtifactFormatError("pool file truncated or oversized")
        def take(count, shape):
            nonlocal off
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape)
            off += count * 4
            return arr
        return cls(
            pose_centroids=take(p * 3 * (k - 1), (p, 3 * (k - 1))).astype(np.float64),
            orient_centroids=take(o * 3, (o, 3)).astype(np.float64),
            joints_cache=take(p * o * n * 3, (p * o, n, 3)).copy(),
        )


def build_pool(motion_set: MotionSet, p: int, o: int, seed: int, model: BodyModel) -> CandidatePool:
    """Cluster a motion set and precompute oriented keypoints for all P*O members."""
    pose_centroids = kmeans(motion_set.poses, p, seed)
    orient_centroids = kmeans(motion_set.orients, o, seed + 1)
    root = model.joint_rest[0]
    n = model.num_keypoints
    rots = np.stack([rodrigues(orient_centroids[i]) for i in range(o)])  # (O, 3, 3)
    cache = np.empty((p * o, n, 3), dtype=np.float32)
    zero_shape = ShapeParams.zero(model.num_shapes)
    for pi in range(p):
        pose = PoseParams(np.zeros(3), pose_centroids[pi].reshape(-1, 3))
        joints = regress_joints(model, forward(model, pose, zero_shape))
        oriented = (joints - root) @ rots.transpose(0, 2, 1) + root  # (O, N, 3)
        cache[pi * o:(pi + 1) * o] = oriented.astype(np.float32)
    return CandidatePool(pose_centroids, orient_centroids, cache)


@dataclass
class FitBatch:
    """Index-aligned fit results for every pool member."""

    translations: np.ndarray  # (M, 3)
    losses: np.ndarray        # (M,)

    def __len__(self) -> int:
        return self.losses.shape[0]

    def __getitem__(self, i: int) -> FitResult:
        return FitResult(translation=self.translations[i].copy(), loss=float(self.losses[i]))


def fit_all(pool: CandidatePool, j2d: np.ndarray, intr: Intrinsics,
            conf: np.ndarray | None = None, threads: int = 1) -> FitBatch:
    """Fit every pool member's camera translation to one keypoint set.

    Results are a pure function of the inputs: chunking across threads only
    partitions independent members, so worker count never changes output.
    """
    cache = pool.joints_cache
    m = cache.shape[0]
    if threads <= 1 or m < 2 * threads:
        t, losses = fit_translation_batch(cache, j2d, intr, conf)
        return FitBatch(t, losses)
    bounds = np.linspace(0, m, threads + 1).astype(int)
    out_t = np.empty((m, 3))
    out_l = np.empty(m)

    def work(a: int, b: int) -> None:
        t, losses = fit_translation_batch(cache[a:b], j2d, intr, conf)
        out_t[a:b] = t
        out_l[a:b] = losses

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        zero_conf = conf is not None and not np.any(np.asarray(conf) > 0)
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(lambda ab: work(*ab), zip(bounds[:-1], bounds[1:])))
    if zero_conf:
        warnings.warn("all keypoint confidences are zero; fits are vacuous", stacklevel=2)
    return FitBatch(out_t, out_l)


@dataclass
class Candidate:
    pose: PoseParams
    translation: np.ndarray
    fit_loss: float
    pool_index: int = -1

    def to_dict(self) -> dict:
        return {
            "pose": self.pose.joints.ravel().tolist(),
            "orient": self.pose.global_orient.tolist(),
            "translation": self.translation.tolist(),
            "fit_loss": self.fit_loss,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Candidate":
        return cls(
            pose=PoseParams(
                global_orient=np.asarray(doc["orient"], dtype=np.float64),
                joints=np.asarray(doc["pose"], dtype=np.float64).reshape(-1, 3),
            ),
            translation=np.asarray(doc["translation"], dtype=np.float64),
            fit_loss=float(doc["fit_loss"]),
        )


def save_candidates(cands: list[Candidate], path: str | Path) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cands]))


def load_candidates(path: str | Path) -> list[Candidate]:
    try:
        docs = json.loads(Path(path).read_text())
        return [Candidate.from_dict(d) for d in docs]
    except (json.JSONDecodeError, KeyError) as e:
        raise ArtifactFormatError(f"bad candidate file: {e}") from e


def select_candidates(fits: FitBatch, pool: CandidatePool, threshold: float,
                      n_branches: int) -> list[Candidate]:
    """Low-loss, pose-diverse branch selection.

    Admissible members have fit loss below the threshold (falling back to
    the n lowest-loss members when none qualify). The first pick is the
    loss argmin; the rest follow farthest-point sampling on the full pose
    parameter vector, ties broken towards the lower pool index.
    """
    m = pool.size
    if m == 0:
        raise EmptyPool("cannot select from an empty pool")
    n_branches = max(1, int(n_branches))
    losses = fits.losses
    admissible = np.flatnonzero(losses < threshold)
    if admissible.size == 0:
        order = np.argsort(losses, kind="stable")
        admissible = np.sort(order[:n_branches])
    vecs = np.stack([pool.member_pose_vector(i) for i in admissible])
    local_first = int(np.argmin(losses[admissible]))
    chosen_local = [local_first]
    min_d = np.linalg.norm(vecs - vecs[local_first], axis=1)
    min_d[local_first] = -np.inf
    while len(chosen_local) < min(n_branches, admissible.size):
        nxt = int(np.argmax(min_d))
        chosen_local.append(nxt)
        min_d = np.minimum(min_d, np.linalg.norm(vecs - vecs[nxt], axis=1))
        min_d[nxt] = -np.inf
    out = []
    for loc in chosen_local:
        idx = int(admissible[loc])
        out.append(Candidate(
            pose=pool.member_pose(idx),
            translation=fits.translations[idx].copy(),
            fit_loss=float(losses[idx]),
            pool_index=idx,
        ))
    return out
