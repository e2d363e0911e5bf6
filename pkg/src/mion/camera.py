"""Perspective projection and the closed-form camera translation fit.

The fit linearizes each joint's projection into two equations that are
linear in (Tx, Ty, Tz) and solves the weighted normal equations by adjugate
expansion; the reported loss is always the geometric reprojection loss
re-evaluated at the solved translation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, ShapeMismatch, SingularSystem
from .geometry import adjugate_det_3x3

MIN_DEPTH = 1e-6


@dataclass
class Intrinsics:
    f: float = 5000.0
    c1: float = 112.0
    c2: float = 112.0

    def scaled(self, factor: float) -> "Intrinsics":
        """Intrinsics for a viewport scaled by `factor` (e.g. feature maps)."""
        return Intrinsics(self.f * factor, self.c1 * factor, self.c2 * factor)


@dataclass
class FitResult:
    translation: np.ndarray  # (3,)
    loss: float              # pixels^2, +inf when the fit puts joints behind the camera


def project(points: np.ndarray, intr: Intrinsics, t: np.ndarray) -> np.ndarray:
    """Perspective projection of (N, 3) camera-frame points shifted by t."""
    points = np.asarray(points, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    depth = points[..., 2] + t[2]
    if np.any(depth <= MIN_DEPTH):
        raise BehindCamera("point at or behind the camera plane")
    u = intr.f * (points[..., 0] + t[0]) / depth + intr.c1
    v = intr.f * (points[..., 1] + t[1]) / depth + intr.c2
    return np.stack([u, v], axis=-1)


def reproj_loss(j3d: np.ndarray, j2d: np.ndarray, intr: Intrinsics, t: np.ndarray,
                conf: np.ndarray | None = None) -> float:
    """Confidence-weighted sum of squared pixel errors; zero-conf joints are ignored."""
    j3d = np.asarray(j3d, dtype=np.float64)
    j2d = np.asarray(j2d, dtype=np.float64)
    n = j3d.shape[0]
    if j2d.shape != (n, 2):
        raise ShapeMismatch(f"expected ({n}, 2) keypoints, got {j2d.shape}")
    conf = np.ones(n) if conf is None else np.asarray(conf, dtype=np.float64)
    active = conf > 0
    if not np.any(active):
        return 0.0
    proj = project(j3d[active], intr, t)
    res = proj - j2d[active]
    return float((conf[active] * (res * res).sum(axis=1)).sum())


def _normal_system(j3d: np.ndarray, j2d: np.ndarray, intr: Intrinsics,
                   conf: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Weighted normal equations of the linearized projection constraints.

    Per joint: f*(x + Tx) + (c1 - u)*(z + Tz) = 0 and the y analogue, i.e.
    rows [f, 0, c1-u] and [0, f, c2-v] with right-hand sides moving the
    known terms across. j3d may carry leading batch dims (..., N, 3); the
    system matrix depends only on the 2D keypoints so it has shape (3, 3).
    """
    f = intr.f
    du = intr.c1 - j2d[:, 0]
    dv = intr.c2 - j2d[:, 1]
    ata = np.zeros((3, 3))
    ata[0, 0] = (conf * f * f).sum()
    ata[1, 1] = ata[0, 0]
    ata[0, 2] = (conf * f * du).sum()
    ata[2, 0] = ata[0, 2]
    ata[1, 2] = (conf * f * dv).sum()
    ata[2, 1] = ata[1, 2]
    ata[2, 2] = (conf * (du * du + dv * dv)).sum()
    x, y, z = j3d[..., 0], j3d[..., 1], j3d[..., 2]
    bu = -du * z - f * x
    bv = -dv * z - f * y
    atb = np.stack([
        (conf * f * bu).sum(axis=-1),
        (conf * f * bv).sum(axis=-1),
        (conf * (du * bu + dv * bv)).sum(axis=-1),
    ], axis=-1)
    return ata, atb


def _apply_adjugate(adj: np.ndarray, atb: np.ndarray, det: float) -> np.ndarray:
    """x = adj @ b / det, written elementwise so results do not depend on
    batch shape (BLAS picks size-dependent kernels otherwise)."""
    out = np.empty(atb.shape)
    for i in range(3):
        out[..., i] = (atb[..., 0] * adj[i, 0] + atb[..., 1] * adj[i, 1]
                       + atb[..., 2] * adj[i, 2]) / det
    return out


def _losses_at(j3d: np.ndarray, j2d: np.ndarray, intr: Intrinsics, t: np.ndarray,
               conf: np.ndarray) -> np.ndarray:
    """Geometric losses for batched joints (..., N, 3) and translations (..., 3)."""
    active = conf > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = j3d[..., 2] + t[..., 2:3]
        u = intr.f * (j3d[..., 0] + t[..., 0:1]) / depth + intr.c1
        v = intr.f * (j3d[..., 1] + t[..., 1:2]) / depth + intr.c2
        res = (u - j2d[:, 0]) ** 2 + (v - j2d[:, 1]) ** 2
    loss = (conf * np.where(active, np.nan_to_num(res, nan=0.0, posinf=np.inf), 0.0)).sum(axis=-1)
    bad = (depth[..., active] <= MIN_DEPTH).any(axis=-1)
    return np.where(bad, np.inf, loss)


def fit_translation(j3d: np.ndarray, j2d: np.ndarray, intr: Intrinsics,
                    conf: np.ndarray | None = None) -> FitResult:
    """Closed-form camera translation for already-oriented joints.

    Raises :class:`SingularSystem` for degenerate joint configurations; a
    solution that puts any active joint behind the camera is returned with
    loss +inf so batch fitting can proceed.
    """
    j3d = np.asarray(j3d, dtype=np.float64)
    j2d = np.asarray(j2d, dtype=np.float64)
    n = j3d.shape[0]
    conf = np.ones(n) if conf is None else np.asarray(conf, dtype=np.float64)
    if (conf > 0).sum() < 2:
        raise SingularSystem("need at least two effective joints")
    ata, atb = _normal_system(j3d, j2d, intr, conf)
    adj, det = adjugate_det_3x3(ata)
    norm = float(np.sqrt((ata * ata).sum()))
    if abs(float(det)) <= 1e-12 * norm**3:
        raise SingularSystem("camera fit normal equations are singular")
    # Same elementwise expression as the batched path: bit-identical results.
    t = _apply_adjugate(adj, atb[None], float(det))[0]
    loss = float(_losses_at(j3d[None], j2d, intr, t[None], conf)[0])
    return FitResult(translation=t, loss=loss)


def fit_translation_batch(j3d: np.ndarray, j2d: np.ndarray, intr: Intrinsics,
                          conf: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized fit over (M, N, 3) joint sets against one keypoint set.

    The normal matrix depends only on the keypoints, so one adjugate serves
    every member. Returns translations (M, 3) and geometric losses (M,);
    members whose fit fails get loss +inf. All-zero confidence yields zero
    losses (nothing to fit) and a warning.
    """
    j3d = np.asarray(j3d, dtype=np.float64)
    j2d = np.asarray(j2d, dtype=np.float64)
    m, n = j3d.shape[0], j3d.shape[1]
    conf = np.ones(n) if conf is None else np.asarray(conf, dtype=np.float64)
    if not np.any(conf > 0):
        warnings.warn("all keypoint confidences are zero; fits are vacuous", stacklevel=2)
        t = np.tile(np.array([0.0, 0.0, 1.0]), (m, 1))
        return t, np.zeros(m)
    ata, atb = _normal_system(j3d, j2d, intr, conf)
    adj, det = adjugate_det_3x3(ata)
    norm = float(np.sqrt((ata * ata).sum()))
    if abs(float(det)) <= 1e-12 * norm**3:
        return np.zeros((m, 3)), np.full(m, np.inf)
    t = _apply_adjugate(adj, atb, float(det))
    return t, _losses_at(j3d, j2d, intr, t, conf)
