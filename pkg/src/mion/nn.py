"""Minimal tensor engine: reverse-mode autodiff plus the layer set the
refinement transformer and the consistency scorer need.

Training numerics are 32-bit; wrap code in ``with precision(np.float64):``
to run the same graphs in a 64-bit shadow mode for gradient checks. A
graph is confined to one worker between recording and backward; trained
parameter arrays are read-only shareable.
"""

from __future__ import annotations

import hashlib
import struct
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .errors import ArtifactFormatError, ShapeMismatch

CKPT_MAGIC = b"MIONCKPT"

_default_dtype = np.float32


@contextmanager
def precision(dtype):
    """Temporarily switch the dtype newly created tensors are cast to."""
    global _default_dtype
    old = _default_dtype
    _default_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = old


def default_dtype():
    return _default_dtype


class Tensor:
    """An n-d array with an optional gradient and a tape edge to its parents."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None, cast=True):
        arr = np.asarray(data)
        if cast and arr.dtype != _default_dtype:
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        """Reverse sweep from a scalar root; one pass per recorded graph."""
        if self.data.size != 1:
            raise ShapeMismatch("backward requires a scalar root")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                node._backward = None  # tape is single-use


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _make(data, parents, backward) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), backward=backward, cast=False)
    return Tensor(data, cast=False)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --------------------------------------------------------------------------
# Elementwise and shape ops

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))
    return _make(out_data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data - b.data

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))
    return _make(out_data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def back(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))
    return _make(out_data, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data / b.data

    def back(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
    return _make(out_data, (a, b), back)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatch("matmul operands must have rank >= 2")
    out_data = a.data @ b.data

    def back(g):
        _accum(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
        _accum(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))
    return _make(out_data, (a, b), back)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    out_data = np.where(mask, a.data, 0.0).astype(a.data.dtype)

    def back(g):
        _accum(a, g * mask)
    return _make(out_data, (a,), back)


_GELU_C = 0.7978845608028654  # sqrt(2 / pi)


def gelu(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def back(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        _accum(a, g * d)
    return _make(out_data, (a,), back)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.tanh(a.data)

    def back(g):
        _accum(a, g * (1.0 - out_data * out_data))
    return _make(out_data, (a,), back)


def sin(a) -> Tensor:
    a = _as_tensor(a)

    def back(g):
        _accum(a, g * np.cos(a.data))
    return _make(np.sin(a.data), (a,), back)


def cos(a) -> Tensor:
    a = _as_tensor(a)

    def back(g):
        _accum(a, -g * np.sin(a.data))
    return _make(np.cos(a.data), (a,), back)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)

    def back(g):
        _accum(a, g * 0.5 / np.maximum(out_data, 1e-20))
    return _make(out_data, (a,), back)


def absolute(a) -> Tensor:
    a = _as_tensor(a)

    def back(g):
        _accum(a, g * np.sign(a.data))
    return _make(np.abs(a.data), (a,), back)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(a, out_data * (g - dot))
    return _make(out_data, (a,), back)


def layer_norm(a, axis: int = -1, eps: float = 1e-5) -> Tensor:
    a = _as_tensor(a)
    mu = a.data.mean(axis=axis, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def back(g):
        m = a.data.shape[axis]
        gm = g.mean(axis=axis, keepdims=True)
        gy = (g * y).mean(axis=axis, keepdims=True)
        _accum(a, inv * (g - gm - y * gy) if m > 1 else np.zeros_like(g))
    return _make(y, (a,), back)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)

    def back(g):
        _accum(a, g.reshape(a.data.shape))
    return _make(a.data.reshape(shape), (a,), back)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    inv = np.argsort(axes)

    def back(g):
        _accum(a, g.transpose(inv))
    return _make(a.data.transpose(axes), (a,), back)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)

    def back(g):
        offset = 0
        for t, s in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + s)
            _accum(t, g[tuple(sl)])
            offset += s
    return _make(out_data, tuple(tensors), back)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    a = _as_tensor(a)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def back(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        _accum(a, full)
    return _make(a.data[sl].copy(), (a,), back)


def stack(tensors, axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        t = _as_tensor(t)
        shape = list(t.data.shape)
        shape.insert(axis if axis >= 0 else axis + t.data.ndim + 1, 1)
        expanded.append(reshape(t, shape))
    return concat(expanded, axis=axis)


def tile_batch(a, n: int) -> Tensor:
    """Broadcast a tensor to a leading batch dimension of size n."""
    a = _as_tensor(a)
    out_data = np.broadcast_to(a.data[None], (n, *a.data.shape)).copy()

    def back(g):
        _accum(a, g.sum(axis=0))
    return _make(out_data, (a,), back)


def take_rows(a, idx: np.ndarray) -> Tensor:
    """Gather rows per batch element: a (B, L, D), idx (B, K) -> (B, K, D)."""
    a = _as_tensor(a)
    b = a.data.shape[0]
    rows = np.arange(b)[:, None]
    out_data = a.data[rows, idx]

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, idx), g)
        _accum(a, full)
    return _make(out_data, (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape) / count)
    return _make(out_data, (a,), back)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())
    return _make(out_data, (a,), back)


def mse_loss(pred, target) -> Tensor:
    diff = sub(pred, target)
    return mean(mul(diff, diff))


def l2_loss(a) -> Tensor:
    """Euclidean norm of the flattened input; zero input gives exactly zero."""
    a = _as_tensor(a)
    s = float((a.data.astype(np.float64) ** 2).sum())
    out_data = np.asarray(np.sqrt(s), dtype=a.data.dtype)

    def back(g):
        _accum(a, g * a.data / max(float(out_data), 1e-12))
    return _make(out_data, (a,), back)


def l2norm(a, axis: int = -1) -> Tensor:
    """Euclidean norm along one axis; backward is guarded at zero."""
    a = _as_tensor(a)
    s = (a.data * a.data).sum(axis=axis)
    out_data = np.sqrt(s)

    def back(g):
        denom = np.maximum(np.expand_dims(out_data, axis), 1e-12)
        _accum(a, np.expand_dims(g, axis) * a.data / denom)
    return _make(out_data, (a,), back)


# --------------------------------------------------------------------------
# Convolutions

def _conv_out(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def _im2col(x: np.ndarray, kh: int, kw: int, s: int, p: int) -> np.ndarray:
    b, c, h, w = x.shape
    ho, wo = _conv_out(h, kh, s, p), _conv_out(w, kw, s, p)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
    return cols


def _col2im(cols: np.ndarray, h: int, w: int, s: int, p: int) -> np.ndarray:
    b, c, kh, kw, ho, wo = cols.shape
    xp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + s * ho:s, j:j + s * wo:s] += cols[:, :, i, j]
    return xp[:, :, p:p + h, p:p + w] if p else xp


def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution: x (B, Cin, H, W) with kernel w (Cout, Cin, kh, kw)."""
    x, w = _as_tensor(x), _as_tensor(w)
    b, cin, h, wd = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ShapeMismatch(f"conv2d channel mismatch {cin} vs {cin_w}")
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(wd, kw, stride, pad)
    cols = _im2col(x.data, kh, kw, stride, pad)
    cols2 = cols.reshape(b, cin * kh * kw, ho * wo)
    w2 = w.data.reshape(cout, cin * kh * kw)
    out_data = (w2 @ cols2).reshape(b, cout, ho, wo)

    def back(g):
        g2 = g.reshape(b, cout, ho * wo)
        if w.requires_grad:
            gw = np.einsum("bop,bxp->ox", g2, cols2)
            _accum(w, gw.reshape(w.data.shape))
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(b, cin, kh, kw, ho, wo)
            _accum(x, _col2im(gcols, h, wd, stride, pad))
    return _make(out_data, (x, w), back)


def deconv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution: x (B, Cin, H, W), kernel w (Cin, Cout, kh, kw).

    Output spatial size is (H - 1) * stride + kh - 2 * pad.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    b, cin, h, wd = x.data.shape
    cin_w, cout, kh, kw = w.data.shape
    if cin != cin_w:
        raise ShapeMismatch(f"deconv2d channel mismatch {cin} vs {cin_w}")
    ho = (h - 1) * stride + kh - 2 * pad
    wo = (wd - 1) * stride + kw - 2 * pad
    x2 = x.data.reshape(b, cin, h * wd)
    w2 = w.data.reshape(cin, cout * kh * kw)
    cols = (w2.swapaxes(0, 1)[None] @ x2).reshape(b, cout, kh, kw, h, wd)
    out_data = _col2im(cols, ho, wo, stride, pad)

    def back(g):
        gcols = _im2col(g, kh, kw, stride, pad)  # (b, cout, kh, kw, h, wd)
        gcols2 = gcols.reshape(b, cout * kh * kw, h * wd)
        if x.requires_grad:
            _accum(x, (w2 @ gcols2).reshape(x.data.shape))
        if w.requires_grad:
            gw = np.einsum("bip,bxp->ix", x2, gcols2)
            _accum(w, gw.reshape(w.data.shape))
    return _make(out_data, (x, w), back)


# --------------------------------------------------------------------------
# Attention

def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, length, d = x.data.shape
    x = reshape(x, (b, length, heads, d // heads))
    return transpose(x, (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, heads, length, dh = x.data.shape
    x = transpose(x, (0, 2, 1, 3))
    return reshape(x, (b, length, heads * dh))


def multi_head_attention(q, k, v, heads: int, wq, bq, wk, bk, wv, bv, wo, bo) -> Tensor:
    """Projected scaled dot-product attention with concatenated heads.

    q is (L_q, d) or (B, L_q, d); k and v share L_k. The model width d must
    be divisible by the head count.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    squeeze = q.data.ndim == 2
    if squeeze:
        q = reshape(q, (1, *q.data.shape))
        k = reshape(k, (1, *k.data.shape))
        v = reshape(v, (1, *v.data.shape))
    d = q.data.shape[-1]
    if d % heads != 0:
        raise ShapeMismatch(f"width {d} not divisible by {heads} heads")
    qh = _split_heads(add(matmul(q, wq), bq), heads)
    kh = _split_heads(add(matmul(k, wk), bk), heads)
    vh = _split_heads(add(matmul(v, wv), bv), heads)
    scores = mul(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(d / heads))
    attn = softmax(scores, axis=-1)
    out = _merge_heads(matmul(attn, vh))
    out = add(matmul(out, wo), bo)
    return reshape(out, out.data.shape[1:]) if squeeze else out


# --------------------------------------------------------------------------
# Parameters, optimizer, checkpoints

def _named_rng(seed: int, name: str) -> np.random.Generator:
    digest = hashlib.sha256(name.encode()).digest()
    words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([int(seed), *words]))


def init_param(params: dict, name: str, shape: tuple, fan_in: int, seed: int,
               zero: bool = False) -> Tensor:
    """Uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) init from a name-keyed stream."""
    if zero:
        data = np.zeros(shape)
    else:
        bound = np.sqrt(1.0 / max(fan_in, 1))
        data = _named_rng(seed, name).uniform(-bound, bound, size=shape)
    t = Tensor(data, requires_grad=True)
    params[name] = t
    return t


def clip_grad_norm(params: dict, max_norm: float) -> float:
    """Scale all gradients so their global norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm > 0:
        factor = np.float64(max_norm / norm)
        for p in params.values():
            if p.grad is not None:
                p.grad = (p.grad * factor).astype(p.grad.dtype)
    return norm


class SGD:
    """SGD with momentum and decoupled weight decay, deterministic ordering.

    `lr_scales` maps parameter-name prefixes to learning-rate multipliers
    (longest matching prefix wins); useful for zero-initialized heads whose
    effective scale differs from the trunk.
    """

    def __init__(self, params: dict, lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0, lr_scales: dict | None = None):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_scales = dict(lr_scales or {})
        self.velocity = {n: np.zeros_like(t.data) for n, t in sorted(params.items())}

    def _scale(self, name: str) -> float:
        best = 1.0
        best_len = -1
        for prefix, s in self.lr_scales.items():
            if name.startswith(prefix) and len(prefix) > best_len:
                best, best_len = s, len(prefix)
        return best

    def step(self) -> None:
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            v = self.velocity[name]
            v *= self.momentum
            v += g
            lr = self.lr * self._scale(name)
            p.data -= (lr * v + lr * self.weight_decay * p.data).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class AdamW:
    """Adam with decoupled weight decay; deterministic parameter ordering.

    The trainers use this: the encoder-decoder's zero-initialized residual
    heads give the loss surface a pathological eigenvalue spread that plain
    momentum SGD cannot cross at desk-scale step budgets.
    """

    def __init__(self, params: dict, lr: float, betas: tuple = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(t.data) for n, t in sorted(params.items())}
        self.v = {n: np.zeros_like(t.data) for n, t in sorted(params.items())}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (self.lr * update + self.lr * self.weight_decay * p.data).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def save_checkpoint(params: dict, path: str | Path, version: int = 1) -> None:
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<2I", version, len(params)))
        for name in sorted(params):
            t = params[name]
            data = (t.data if isinstance(t, Tensor) else np.asarray(t)).astype("<f4")
            enc = name.encode()
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(path: str | Path) -> dict:
    blob = Path(path).read_bytes()
    if blob[:8] != CKPT_MAGIC:
        raise ArtifactFormatError("not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<2I", blob, 8)
    if version != 1:
        raise ArtifactFormatError(f"unsupported checkpoint version {version}")
    off = 16
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode()
            off += nlen
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            out[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(dims).copy()
            off += 4 * size
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise ArtifactFormatError(f"corrupt checkpoint: {e}") from e
    if off != len(blob):
        raise ArtifactFormatError("checkpoint has trailing bytes")
    return out


def params_from_arrays(arrays: dict, requires_grad: bool = True) -> dict:
    return {n: Tensor(a, requires_grad=requires_grad) for n, a in arrays.items()}


# --------------------------------------------------------------------------
# Finite-difference gradient checking (64-bit shadow mode)

def gradcheck(fn, arrays: list[np.ndarray], eps: float = 1e-5, sample: int | None = None,
              seed: int = 0) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``fn`` maps a list of Tensors to a scalar Tensor. The relative error of
    an entry is |a - fd| / max(1, |a|, |fd|); entries are exhaustive unless
    `sample` caps the count per input.
    """
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        tensors = [Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
        loss = fn(tensors)
        loss.backward()
        grads = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]
        worst = 0.0
        for ti, t in enumerate(tensors):
            flat = t.data.reshape(-1)
            n = flat.size
            idxs = range(n) if sample is None or sample >= n else rng.choice(n, sample, replace=False)
            for i in idxs:
                orig = flat[i]
                flat[i] = orig + eps
                hi = float(fn(tensors).data)
                flat[i] = orig - eps
                lo = float(fn(tensors).data)
                flat[i] = orig
                fd = (hi - lo) / (2 * eps)
                an = float(grads[ti].reshape(-1)[i])
                worst = max(worst, abs(an - fd) / max(1.0, abs(an), abs(fd)))
    return worst
