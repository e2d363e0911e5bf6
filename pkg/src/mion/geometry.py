"""Rotation representations, small closed-form linear solves, rigid alignment.

Everything here is 64-bit and pure: safe to call from any number of workers.
Axis-angle vectors are plain ``(3,)`` float arrays (angle = vector norm),
rotation matrices plain ``(3, 3)`` arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateCloud, SingularSystem


@dataclass
class Similarity:
    """Scale + proper rotation + translation: ``p -> s * r @ p + t``."""

    s: float
    r: np.ndarray
    t: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.s * points @ self.r.T + self.t


def _cross_matrix(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rodrigues(a: np.ndarray) -> np.ndarray:
    """Axis-angle vector to rotation matrix.

    Zero angle is handled by a series expansion, so ``rodrigues(0) == I``
    exactly and the map stays smooth through the origin.
    """
    a = np.asarray(a, dtype=np.float64)
    theta2 = float(a @ a)
    k = _cross_matrix(a)
    if theta2 < 1e-16:
        # sin(t)/t ~ 1 - t^2/6, (1-cos t)/t^2 ~ 1/2 - t^2/24
        return np.eye(3) + (1.0 - theta2 / 6.0) * k + (0.5 - theta2 / 24.0) * (k @ k)
    theta = math.sqrt(theta2)
    return np.eye(3) + (math.sin(theta) / theta) * k + ((1.0 - math.cos(theta)) / theta2) * (k @ k)


def rotation_log(r: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rodrigues`; returns the axis-angle with angle in [0, pi]."""
    r = np.asarray(r, dtype=np.float64)
    w = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    s = 0.5 * math.sqrt(float(w @ w))
    c = min(1.0, max(-1.0, (np.trace(r) - 1.0) / 2.0))
    theta = math.atan2(s, c)
    if theta < 1e-7:
        return 0.5 * w
    if c > -0.99:
        return w * (theta / (2.0 * math.sin(theta)))
    # Near a half turn the skew part is tiny; the symmetric part equals
    # (1 - cos) * a a^T + cos * I, which pins the axis accurately.
    m = 0.5 * (r + r.T) - c * np.eye(3)
    i = int(np.argmax(np.diag(m)))
    axis = m[:, i]
    axis = axis / math.sqrt(float(axis @ axis))
    if float(axis @ w) < 0.0:
        axis = -axis
    return axis * theta


def canonicalize_axis_angle(v: np.ndarray) -> np.ndarray:
    """Wrap the rotation angle into (-pi, pi], keeping the rotation itself."""
    v = np.asarray(v, dtype=np.float64)
    theta = float(np.linalg.norm(v))
    if theta <= math.pi:
        return v.copy()
    wrapped = math.fmod(theta, 2.0 * math.pi)
    if wrapped > math.pi:
        wrapped -= 2.0 * math.pi
    return v * (wrapped / theta)


def is_rotation(m: np.ndarray, tol: float = 1e-9) -> bool:
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        return False
    ortho = float(np.abs(m.T @ m - np.eye(3)).max())
    return ortho <= tol and abs(_det3(m) - 1.0) <= tol


def _det3(a: np.ndarray) -> np.ndarray:
    """Determinant of (..., 3, 3) by cofactor expansion."""
    return (
        a[..., 0, 0] * (a[..., 1, 1] * a[..., 2, 2] - a[..., 1, 2] * a[..., 2, 1])
        - a[..., 0, 1] * (a[..., 1, 0] * a[..., 2, 2] - a[..., 1, 2] * a[..., 2, 0])
        + a[..., 0, 2] * (a[..., 1, 0] * a[..., 2, 1] - a[..., 1, 1] * a[..., 2, 0])
    )


def adjugate_det_3x3(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Adjugate and determinant of (..., 3, 3); ``x = adj @ b / det`` solves ``Ax=b``.

    Shared by :func:`solve_3x3` and the batched camera fit so both take the
    same arithmetic path.
    """
    a = np.asarray(a, dtype=np.float64)
    adj = np.empty_like(a)
    adj[..., 0, 0] = a[..., 1, 1] * a[..., 2, 2] - a[..., 1, 2] * a[..., 2, 1]
    adj[..., 0, 1] = a[..., 0, 2] * a[..., 2, 1] - a[..., 0, 1] * a[..., 2, 2]
    adj[..., 0, 2] = a[..., 0, 1] * a[..., 1, 2] - a[..., 0, 2] * a[..., 1, 1]
    adj[..., 1, 0] = a[..., 1, 2] * a[..., 2, 0] - a[..., 1, 0] * a[..., 2, 2]
    adj[..., 1, 1] = a[..., 0, 0] * a[..., 2, 2] - a[..., 0, 2] * a[..., 2, 0]
    adj[..., 1, 2] = a[..., 0, 2] * a[..., 1, 0] - a[..., 0, 0] * a[..., 1, 2]
    adj[..., 2, 0] = a[..., 1, 0] * a[..., 2, 1] - a[..., 1, 1] * a[..., 2, 0]
    adj[..., 2, 1] = a[..., 0, 1] * a[..., 2, 0] - a[..., 0, 0] * a[..., 2, 1]
    adj[..., 2, 2] = a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]
    return adj, _det3(a)


def solve_3x3(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``A x = b`` for a single 3x3 system by adjugate expansion.

    Raises :class:`SingularSystem` when ``|det A| <= 1e-12 * ||A||_F^3``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    adj, det = adjugate_det_3x3(a)
    norm = math.sqrt(float((a * a).sum()))
    if abs(float(det)) <= 1e-12 * norm**3:
        raise SingularSystem(f"3x3 system is singular (det={float(det):.3e})")
    return adj @ b / det


def _svd3(m: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """SVD of a 3x3 matrix by one-sided Jacobi: ``m = u @ diag(s) @ v.T``.

    At most 30 sweeps; for 3x3 inputs convergence is far quicker. No LAPACK.
    """
    b = np.asarray(m, dtype=np.float64).copy()
    v = np.eye(3)
    for _ in range(30):
        off = 0.0
        for i in range(2):
            for j in range(i + 1, 3):
                gamma = float(b[:, i] @ b[:, j])
                alpha = float(b[:, i] @ b[:, i])
                beta = float(b[:, j] @ b[:, j])
                scale = math.sqrt(alpha * beta)
                if scale > 0.0:
                    off = max(off, abs(gamma) / scale)
                if gamma == 0.0 or abs(gamma) <= 1e-15 * scale:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.hypot(1.0, zeta))
                c = 1.0 / math.hypot(1.0, t)
                s = c * t
                bi = b[:, i].copy()
                b[:, i] = c * bi - s * b[:, j]
                b[:, j] = s * bi + c * b[:, j]
                vi = v[:, i].copy()
                v[:, i] = c * vi - s * v[:, j]
                v[:, j] = s * vi + c * v[:, j]
        if off <= 1e-14:
            break
    sig = np.sqrt((b * b).sum(axis=0))
    order = np.argsort(-sig)
    sig = sig[order]
    b = b[:, order]
    v = v[:, order]
    u = np.zeros((3, 3))
    for i in range(3):
        if sig[i] > 1e-300:
            u[:, i] = b[:, i] / sig[i]
    # Complete degenerate columns to an orthonormal basis.
    if sig[1] <= 1e-12 * max(sig[0], 1e-300):
        if sig[0] <= 1e-300:
            u = np.eye(3)
        else:
            a = np.zeros(3)
            a[int(np.argmin(np.abs(u[:, 0])))] = 1.0
            u[:, 1] = np.cross(u[:, 0], a)
            u[:, 1] /= math.sqrt(float(u[:, 1] @ u[:, 1]))
            u[:, 2] = np.cross(u[:, 0], u[:, 1])
    elif sig[2] <= 1e-12 * sig[0]:
        u[:, 2] = np.cross(u[:, 0], u[:, 1])
    return u, sig, v


def procrustes(x: np.ndarray, y: np.ndarray) -> Similarity:
    """Similarity transform minimizing ``sum_i || s R x_i + t - y_i ||^2``.

    The returned rotation is always proper (det +1); reflections are excluded
    even when they would fit better. Raises :class:`DegenerateCloud` when the
    source points have zero variance.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2 or x.shape[1] != 3 or x.shape[0] < 3:
        raise DegenerateCloud(f"need matching Nx3 clouds with N >= 3, got {x.shape} vs {y.shape}")
    n = x.shape[0]
    mx = x.mean(axis=0)
    my = y.mean(axis=0)
    xc = x - mx
    yc = y - my
    var_x = float((xc * xc).sum()) / n
    if var_x <= 1e-24:
        raise DegenerateCloud("source cloud has zero variance")
    cov = yc.T @ xc / n
    u, sig, v = _svd3(cov)
    d = np.ones(3)
    if _det3(u) * _det3(v) < 0.0:
        d[2] = -1.0
    r = u @ np.diag(d) @ v.T
    s = float(sig @ d) / var_x
    t = my - s * r @ mx
    return Similarity(s=s, r=r, t=t)
