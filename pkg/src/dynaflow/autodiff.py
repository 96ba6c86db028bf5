"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Scoped to what the traffic model needs: convolution, the usual pointwise
nonlinearities, pooling/upsampling/concatenation, batch normalization,
reductions, embedding lookups, fancy gathers, and a finite-difference
verification harness. 64-bit floats by default; no general broadcasting.
"""

from __future__ import annotations

import struct

import numpy as np


class ShapeError(ValueError):
    pass


class BoundsError(IndexError):
    pass


class Tensor:
    """A node in the computation graph: value, gradient, and backward rule."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _fail_scalar(self)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None):
        """Reverse pass from this node; visits each node exactly once."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("implicit backward needs a scalar output")
            grad = np.ones_like(self.data)
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accum(np.asarray(grad, dtype=np.float64))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor_like(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __getitem__(self, idx):
        return basic_slice(self, idx)


def _fail_scalar(t):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor_like(x, ref):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full_like(ref.data, float(x)))


def _node(data, parents, backward_if_needed):
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, _parents=tuple(parents) if req else ())
    if req:
        out._backward = backward_if_needed
    return out


def _check_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# --- elementwise -------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        out = _node(a.data + c, (a,), None)
        if out.requires_grad:
            out._backward = lambda g: a._accum(g)
        return out
    _check_same_shape(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(g)
    return _node(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_same_shape(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(-g)
    return _node(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    _check_same_shape(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accum(g * b.data)
        if b.requires_grad:
            b._accum(g * a.data)
    return _node(a.data * b.data, (a, b), backward)


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, 1.0 / float(b))
    _check_same_shape(a, b, "div")

    def backward(g):
        if a.requires_grad:
            a._accum(g / b.data)
        if b.requires_grad:
            b._accum(-g * a.data / (b.data * b.data))
    return _node(a.data / b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        a._accum(g * c)
    return _node(a.data * c, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        a._accum(g * mask)
    return _node(np.where(mask, a.data, 0.0), (a,), backward)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)

    def backward(g):
        a._accum(g * s * (1.0 - s))
    return _node(s, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), overflow-safe; output is always >= 0."""
    s = np.logaddexp(0.0, a.data)

    def backward(g):
        a._accum(g * _sigmoid(a.data))
    return _node(s, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        a._accum(g / a.data)
    return _node(np.log(a.data), (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    s = np.sqrt(a.data)

    def backward(g):
        a._accum(g / (2.0 * s))
    return _node(s, (a,), backward)


# --- reductions --------------------------------------------------------------

def tsum(a: Tensor, axis=None) -> Tensor:
    data = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            a._accum(np.full_like(a.data, float(g)))
        else:
            a._accum(np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())
    return _node(data, (a,), backward)


def tmean(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return scale(tsum(a, axis=axis), 1.0 / n)


# --- structure ---------------------------------------------------------------

def basic_slice(a: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing; backward scatters into the source."""
    data = a.data[idx]

    def backward(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[idx] += g
    return _node(data.copy(), (a,), backward)


def take(a: Tensor, idx) -> Tensor:
    """Fancy gather with integer-array indices; duplicates accumulate."""
    data = a.data[idx]

    def backward(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, idx, g)
    return _node(data.copy(), (a,), backward)


def concat(tensors, axis=1) -> Tensor:
    datas = [t.data for t in tensors]
    nd = datas[0].ndim
    for d in datas[1:]:
        if d.ndim != nd:
            raise ShapeError("concat: rank mismatch")
        for ax in range(nd):
            if ax != axis and d.shape[ax] != datas[0].shape[ax]:
                raise ShapeError(f"concat: shape mismatch on axis {ax}")
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * nd
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])
    return _node(np.concatenate(datas, axis=axis), tuple(tensors), backward)


def tile_spatial(v: Tensor, height: int, width: int) -> Tensor:
    """(N, F) -> (N, F, H, W) constant spatial tiling."""
    if v.data.ndim != 2:
        raise ShapeError(f"tile_spatial expects (N, F), got {v.data.shape}")
    data = np.broadcast_to(v.data[:, :, None, None], v.data.shape + (height, width)).copy()

    def backward(g):
        v._accum(g.sum(axis=(2, 3)))
    return _node(data, (v,), backward)


def upsample_nearest2x(a: Tensor) -> Tensor:
    if a.data.ndim != 4:
        raise ShapeError("upsample_nearest2x expects NCHW")
    data = a.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        n, c, h, w = a.data.shape
        a._accum(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))
    return _node(data, (a,), backward)


def maxpool2x(a: Tensor) -> Tensor:
    n, c, h, w = _expect4(a, "maxpool2x")
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x needs even H, W; got {h}x{w}")
    blocks = a.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(n, c, h // 2, w // 2, 4)
    arg = flat.argmax(axis=-1)  # first maximum wins on ties
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gfull = gflat.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        a._accum(gfull.reshape(n, c, h, w))
    return _node(out, (a,), backward)


def _expect4(a, op):
    if a.data.ndim != 4:
        raise ShapeError(f"{op} expects NCHW, got shape {a.data.shape}")
    return a.data.shape


# --- convolution -------------------------------------------------------------

def _im2col(xp, kh, kw, stride, oh, ow):
    """(N, KH*KW*C, OH*OW) patch matrix built from shifted slices."""
    n, c = xp.shape[:2]
    span = oh * ow
    patches = np.empty((n, kh * kw * c, span))
    blk = 0
    for i in range(kh):
        for j in range(kw):
            sl = xp[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride]
            patches[:, blk * c:(blk + 1) * c, :] = sl.reshape(n, c, span)
            blk += 1
    return patches


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with OIKK kernels (im2col fast path)."""
    n, c, h, ww_ = _expect4(x, "conv2d")
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d kernel must be OIKK, got {w.data.shape}")
    o, ci, kh, kw = w.data.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ci}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (ww_ + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError("conv2d: kernel larger than padded input")
    if b is not None and b.data.shape != (o,):
        raise ShapeError(f"conv2d: bias must have shape ({o},), got {b.data.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    span = oh * ow
    # kernel flattened to match the (KH, KW, C) block order of the patches
    w2 = np.ascontiguousarray(w.data.transpose(0, 2, 3, 1)).reshape(o, kh * kw * c)
    patches = _im2col(xp, kh, kw, stride, oh, ow)
    out = np.matmul(w2[None], patches).reshape(n, o, oh, ow)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def backward(g):
        g2 = np.ascontiguousarray(g.reshape(n, o, span))
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            gw2 = np.matmul(g2, patches.transpose(0, 2, 1)).sum(axis=0)
            w._accum(gw2.reshape(o, kh, kw, c).transpose(0, 3, 1, 2))
        if x.requires_grad:
            gcols = np.matmul(w2.T[None], g2)  # (N, KH*KW*C, span)
            gxp = np.zeros_like(xp)
            blk = 0
            for i in range(kh):
                for j in range(kw):
                    gsl = gcols[:, blk * c:(blk + 1) * c, :].reshape(n, c, oh, ow)
                    gxp[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += gsl
                    blk += 1
            x._accum(gxp[:, :, pad:pad + h, pad:pad + ww_] if pad else gxp)

    parents = (x, w, b) if b is not None else (x, w)
    return _node(out, parents, backward)


def conv2d_reference(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None,
                     stride: int = 1, pad: int = 0) -> np.ndarray:
    """Explicit-loop cross-correlation; oracle for the im2col fast path."""
    n, c, h, ww_ = x.shape
    o, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (ww_ + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.zeros((n, o, oh, ow))
    for ni in range(n):
        for oi in range(o):
            for r in range(oh):
                for cc in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[ni, ci, r * stride + i, cc * stride + j] * w[oi, ci, i, j]
                    out[ni, oi, r, cc] = acc + (b[oi] if b is not None else 0.0)
    return out


# --- normalization / softmax ---------------------------------------------------

class BatchNormState:
    """Running statistics owned by a batchnorm layer."""

    def __init__(self, channels: int):
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    n, c, h, w = _expect4(x, "batchnorm2d")
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError("batchnorm2d: gamma/beta must be (C,)")
    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))  # biased
        state.running_mean = (1 - momentum) * state.running_mean + momentum * mean
        state.running_var = (1 - momentum) * state.running_var + momentum * var
    else:
        mean = state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    count = n * h * w

    def backward(g):
        if beta.requires_grad:
            beta._accum(g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if training:
                sum_g = gxhat.sum(axis=(0, 2, 3), keepdims=True)
                sum_gx = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = (gxhat - sum_g / count - xhat * sum_gx / count) * inv_std[None, :, None, None]
            else:
                gx = gxhat * inv_std[None, :, None, None]
            x._accum(gx)
    return _node(out, (x, gamma, beta), backward)


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax over the channel axis of an NCHW tensor."""
    _expect4(x, "softmax_channels")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=1, keepdims=True)
        x._accum(s * (g - dot))
    return _node(s, (x,), backward)


def channel_logsumexp(x: Tensor) -> Tensor:
    """log(sum(exp(x), channel)) with max-subtraction; output (N, 1, H, W)."""
    _expect4(x, "channel_logsumexp")
    m = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - m)
    se = e.sum(axis=1, keepdims=True)
    out = m + np.log(se)

    def backward(g):
        x._accum(g * (e / se))
    return _node(out, (x,), backward)


# --- lookups / aggregation ------------------------------------------------------

def embedding_lookup(table: Tensor, index) -> Tensor:
    """Row(s) of a V x D table; backward scatters into the rows."""
    if table.data.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.data.shape}")
    idx = np.asarray(index)
    if idx.ndim > 1:
        raise ShapeError("embedding index must be a scalar or 1-D array")
    v = table.data.shape[0]
    if np.any(idx < 0) or np.any(idx >= v):
        raise BoundsError(f"embedding index out of range [0, {v})")
    data = table.data[idx]

    def backward(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx, g)
    return _node(data.copy(), (table,), backward)


def region_mean(values: Tensor, regions: list[np.ndarray]) -> Tensor:
    """Mean of a 1-D tensor over index subsets; gradient is uniform 1/|R|."""
    if values.data.ndim != 1:
        raise ShapeError("region_mean expects a 1-D tensor")
    sizes = []
    for r in regions:
        if len(r) == 0:
            raise ShapeError("region_mean: empty region")
        sizes.append(len(r))
    data = np.array([values.data[np.asarray(r)].mean() for r in regions])

    def backward(g):
        if values.grad is None:
            values.grad = np.zeros_like(values.data)
        for gi, r, n in zip(g, regions, sizes):
            np.add.at(values.grad, np.asarray(r), gi / n)
    return _node(data, (values,), backward)


# --- serialization ---------------------------------------------------------------

_MAGIC = b"DFT1"


def write_array(f, arr: np.ndarray) -> None:
    """Shape header plus little-endian float payload, versioned magic bytes."""
    a = np.asarray(arr)
    dtype_code = {"float64": 0, "float32": 1}[a.dtype.name] if a.dtype.name in ("float64", "float32") else 0
    a = a.astype("<f8" if dtype_code == 0 else "<f4")
    f.write(_MAGIC)
    f.write(struct.pack("<BB", dtype_code, a.ndim))
    f.write(struct.pack(f"<{a.ndim}I", *a.shape))
    f.write(a.tobytes())


def read_array(f) -> np.ndarray:
    magic = f.read(4)
    if magic != _MAGIC:
        raise ValueError(f"bad tensor magic: {magic!r}")
    dtype_code, ndim = struct.unpack("<BB", f.read(2))
    shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim)) if ndim else ()
    dtype = "<f8" if dtype_code == 0 else "<f4"
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(f.read(count * (8 if dtype_code == 0 else 4)), dtype=dtype)
    return data.reshape(shape).astype(np.float64)


# --- verification -----------------------------------------------------------------

def grad_check(f, xs, eps: float = 1e-4, max_entries: int | None = None, seed: int = 0) -> float:
    """Max relative error between reverse-mode and central finite differences.

    ``f`` maps the tensors in ``xs`` to a scalar Tensor. Perturbs every entry
    (or a seeded sample of ``max_entries`` per tensor) and compares slopes.
    The caller should keep inputs away from relu/maxpool kinks.
    """
    if isinstance(xs, Tensor):
        xs = [xs]
    for x in xs:
        x.data = np.ascontiguousarray(x.data)  # in-place perturbation needs a view
        x.zero_grad()
    out = f(*xs)
    out.backward()
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in xs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for x, g in zip(xs, analytic):
        flat = x.data.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            entries = rng.choice(n, size=max_entries, replace=False)
        else:
            entries = range(n)
        ga = g.reshape(-1)
        for i in entries:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(*xs).data)
            flat[i] = orig - eps
            lo = float(f(*xs).data)
            flat[i] = orig
            fd = (hi - lo) / (2.0 * eps)
            err = abs(fd - ga[i]) / max(abs(fd), abs(ga[i]), 1.0)
            worst = max(worst, err)
    return worst
