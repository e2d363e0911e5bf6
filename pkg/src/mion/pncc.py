"""Normalized coordinate coloring, Z-buffer rasterization, positional encoding.

The rasterizer is the shared core for both the PNCC renderer here and the
RGB renderer in :mod:`mion.synth`. Conventions are fixed so output is
bit-reproducible: pixel centers at (x + 0.5, y + 0.5) with the origin at
the top-left; perspective-correct interpolation; no back-face culling;
depth ties closer than 1e-9 go to the lower triangle index.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .body import Mesh
from .camera import Intrinsics, MIN_DEPTH
from .errors import ArtifactFormatError, DegenerateAxis, OddDim, ShapeMismatch
from .ppm import write_ppm

PNCC_MAGIC = b"MIONPNCC"

DEPTH_TIE = 1e-9


@dataclass
class NccColors:
    colors: np.ndarray  # (V, 3) in [0, 1]


@dataclass
class PnccMap:
    data: np.ndarray  # (H, W, 3) in [0, 1], exact zeros on background

    def save(self, path: str | Path) -> None:
        h, w, _ = self.data.shape
        with open(path, "wb") as fh:
            fh.write(PNCC_MAGIC)
            fh.write(struct.pack("<2I", h, w))
            fh.write(self.data.astype("<f4").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "PnccMap":
        blob = Path(path).read_bytes()
        if blob[:8] != PNCC_MAGIC:
            raise ArtifactFormatError("not a pncc raster (bad magic)")
        h, w = struct.unpack_from("<2I", blob, 8)
        if len(blob) != 16 + h * w * 12:
            raise ArtifactFormatError("pncc raster truncated")
        data = np.frombuffer(blob, dtype="<f4", offset=16).reshape(h, w, 3)
        return cls(data=data.astype(np.float64))

    def save_ppm(self, path: str | Path) -> None:
        write_ppm(path, self.data)


@dataclass
class PosEncoding:
    data: np.ndarray  # (H, W, 3 * d_pe) in [-1, 1]


def ncc(template: np.ndarray) -> NccColors:
    """Min-max normalize the template per axis to [0, 1]."""
    template = np.asarray(template, dtype=np.float64)
    lo = template.min(axis=0)
    hi = template.max(axis=0)
    if np.any(hi - lo <= 0):
        raise DegenerateAxis("template has zero extent on some axis")
    return NccColors(colors=np.clip((template - lo) / (hi - lo), 0.0, 1.0))


@dataclass
class RasterBuffers:
    """Per-pixel visibility: winning triangle (or -1), camera depth, and the
    perspective-correct vertex weights of the winner."""

    tri_index: np.ndarray  # (H, W) int32
    depth: np.ndarray      # (H, W) float64, +inf on background
    weights: np.ndarray    # (H, W, 3) float64

    @property
    def covered(self) -> np.ndarray:
        return self.tri_index >= 0


def rasterize(vertices: np.ndarray, faces: np.ndarray, intr: Intrinsics,
              t: np.ndarray, h: int, w: int) -> RasterBuffers:
    """Project and scan-convert a triangle mesh into visibility buffers.

    Triangles with any vertex depth <= 1e-6 and zero-area screen
    projections are skipped; both winding orders are rasterized.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    tri_index = np.full((h, w), -1, dtype=np.int32)
    depth = np.full((h, w), np.inf)
    weights = np.zeros((h, w, 3))
    if len(faces) == 0:
        return RasterBuffers(tri_index, depth, weights)

    z = vertices[:, 2] + t[2]
    valid_v = z > MIN_DEPTH
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.f * (vertices[:, 0] + t[0]) / z + intr.c1
        v = intr.f * (vertices[:, 1] + t[1]) / z + intr.c2
    tri_ok = valid_v[faces].all(axis=1)

    for ti in np.flatnonzero(tri_ok):
        i0, i1, i2 = faces[ti]
        u0, u1, u2 = u[i0], u[i1], u[i2]
        v0, v1, v2 = v[i0], v[i1], v[i2]
        area = (u1 - u0) * (v2 - v0) - (v1 - v0) * (u2 - u0)
        if area == 0.0:
            continue
        x_lo = max(0, int(np.floor(min(u0, u1, u2) - 0.5)) - 1)
        x_hi = min(w - 1, int(np.ceil(max(u0, u1, u2) - 0.5)) + 1)
        y_lo = max(0, int(np.floor(min(v0, v1, v2) - 0.5)) - 1)
        y_hi = min(h - 1, int(np.ceil(max(v0, v1, v2) - 0.5)) + 1)
        if x_lo > x_hi or y_lo > y_hi:
            continue
        px = np.arange(x_lo, x_hi + 1) + 0.5
        py = (np.arange(y_lo, y_hi + 1) + 0.5)[:, None]
        w0 = (u2 - u1) * (py - v1) - (v2 - v1) * (px - u1)
        w1 = (u0 - u2) * (py - v2) - (v0 - v2) * (px - u2)
        w2 = (u1 - u0) * (py - v0) - (v1 - v0) * (px - u0)
        inside = ((w0 >= 0) & (w1 >= 0) & (w2 >= 0)) | ((w0 <= 0) & (w1 <= 0) & (w2 <= 0))
        if not inside.any():
            continue
        l0 = (w0 / area) / z[i0]
        l1 = (w1 / area) / z[i1]
        l2 = (w2 / area) / z[i2]
        denom = l0 + l1 + l2
        d = 1.0 / denom
        sub = (slice(y_lo, y_hi + 1), slice(x_lo, x_hi + 1))
        win = inside & (d < depth[sub] - DEPTH_TIE)
        if not win.any():
            continue
        tri_index[sub][win] = ti
        depth[sub][win] = d[win]
        weights[sub + (0,)][win] = (l0 * d)[win]
        weights[sub + (1,)][win] = (l1 * d)[win]
        weights[sub + (2,)][win] = (l2 * d)[win]
    return RasterBuffers(tri_index, depth, weights)


def shade(buffers: RasterBuffers, faces: np.ndarray, vertex_colors: np.ndarray) -> np.ndarray:
    """Interpolate per-vertex colors through the visibility buffers; background 0."""
    h, w = buffers.tri_index.shape
    out = np.zeros((h, w, vertex_colors.shape[1]))
    mask = buffers.covered
    if not mask.any():
        return out
    tris = buffers.tri_index[mask]
    wts = buffers.weights[mask]
    corner = vertex_colors[faces[tris]]  # (n, 3, C)
    out[mask] = np.einsum("nk,nkc->nc", wts, corner)
    return out


def render_pncc(mesh: Mesh, intr: Intrinsics, t: np.ndarray, colors: NccColors,
                h: int, w: int) -> PnccMap:
    """Z-buffer render of the NCC-colored body over an exact-zero background."""
    if colors.colors.shape[0] != mesh.vertices.shape[0]:
        raise ShapeMismatch("color count must match vertex count")
    buffers = rasterize(mesh.vertices, mesh.faces, intr, t, h, w)
    data = shade(buffers, mesh.faces, colors.colors)
    return PnccMap(data=np.clip(data, 0.0, 1.0, out=data))


def pncc_pe(pmap: PnccMap, d_pe: int, scale: float = 1.0) -> PosEncoding:
    """Sinusoidal encoding of each PNCC channel into d_pe channels.

    Per channel value p and i in [0, d_pe/2): even outputs are
    sin(p / 10000^(2i/d_pe)), odd outputs the matching cos. The three
    channel blocks are concatenated, giving 3 * d_pe output channels.
    The optional `scale` multiplies p first (default 1, the verbatim form).
    """
    if d_pe % 2 != 0 or d_pe <= 0:
        raise OddDim(f"d_pe must be a positive even number, got {d_pe}")
    p = pmap.data * scale
    i = np.arange(d_pe // 2)
    freq = 10000.0 ** (2.0 * i / d_pe)  # (d_pe/2,)
    phase = p[..., None] / freq         # (H, W, 3, d_pe/2)
    out = np.empty((*p.shape[:2], 3, d_pe))
    out[..., 0::2] = np.sin(phase)
    out[..., 1::2] = np.cos(phase)
    return PosEncoding(data=out.reshape(*p.shape[:2], 3 * d_pe))
