"""Dense tensors with reverse-mode automatic differentiation.

Covers exactly the operations the NCA diffusion models need: elementwise
arithmetic and activations, per-pixel dense layers, depthwise and dense
convolution, pooling, integer-factor upsampling, concatenation/slicing and
scalar reductions. Everything is backed by numpy; forward evaluation is
deterministic (numpy's fixed left-to-right summation order) and each
recorded node's backward runs exactly once per backward() call.

Broadcasting is restricted to the cases the models use: equal shapes, a
scalar, a per-channel vector [c] against [c,H,W], and a single-channel
plane [1,H,W] against [c,H,W].
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

_DEFAULT_DTYPE = np.dtype(np.float32)


def set_default_dtype(dtype) -> None:
    """Set the dtype newly created tensors use (float32 or float64)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}")
    _DEFAULT_DTYPE = dt


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


class _Node:
    __slots__ = ("out", "parents", "vjp")

    def __init__(self, out: Tensor, parents: tuple, vjp: Callable):
        self.out = out
        self.parents = parents
        self.vjp = vjp


class Tape:
    """Ordered record of executed differentiable operations.

    There is always an active tape; `with Tape():` installs a fresh one
    (distinct tapes let independent samples run concurrently).
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


_TAPE_STACK: list[Tape] = [Tape()]


def active_tape() -> Tape:
    return _TAPE_STACK[-1]


def _record(out_data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = tuple(parents) if out.requires_grad else ()
    if out.requires_grad:
        active_tape().nodes.append(_Node(out, out._parents, vjp))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad of every reachable leaf.

    Repeated calls without zero_grad accumulate. Each tape node is
    executed at most once per call.
    """
    if loss.data.shape not in ((), (1,)):
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    tape = active_tape()
    reachable = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in reachable:
            continue
        reachable.add(id(t))
        stack.extend(t._parents)

    # pass-local grad buffers; flushed into .grad at the end
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    tensors: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        if id(node.out) not in reachable:
            continue
        g = grads.pop(id(node.out), None)
        tensors.pop(id(node.out), None)
        if g is None:
            continue
        for p, gp in zip(node.parents, node.vjp(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + gp
            else:
                grads[key] = gp
                tensors[key] = p
    for key, g in grads.items():
        _flush(tensors[key], g)


def _flush(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g.astype(t.data.dtype, copy=False)


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# broadcasting helpers (restricted)

def _align(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """View b so it broadcasts against a under the supported cases."""
    if a.shape == b.shape:
        return b
    if b.ndim == 0 or b.shape == (1,):
        return b
    if a.ndim == 0 or a.shape == (1,):
        return b
    if b.ndim == 1 and a.ndim == 3 and b.shape[0] == a.shape[0]:
        return b.reshape(b.shape[0], 1, 1)
    if b.ndim == 3 and a.ndim == 3 and b.shape[0] == 1 and b.shape[1:] == a.shape[1:]:
        return b
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return b
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax in range(g.ndim):
        if ax < len(shape) and g.shape[ax] != shape[ax]:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _unbroadcast_pair(ga, gb, a: Tensor, b: Tensor, b_view_shape):
    """Undo both the restricted view and numpy broadcasting."""
    if ga is not None:
        ga = _unbroadcast(ga, a.data.shape)
    if gb is not None:
        gb = _unbroadcast(gb, b_view_shape).reshape(b.data.shape)
    return ga, gb


# ---------------------------------------------------------------------------
# elementwise ops

def add(a: Tensor, b: Tensor) -> Tensor:
    bv = _align(a.data, b.data)
    out = a.data + bv

    def vjp(g):
        return _unbroadcast_pair(g, g, a, b, bv.shape)

    return _record(out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    bv = _align(a.data, b.data)
    out = a.data - bv

    def vjp(g):
        return _unbroadcast_pair(g, -g, a, b, bv.shape)

    return _record(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    bv = _align(a.data, b.data)
    out = a.data * bv
    a_data, b_data = a.data, bv

    def vjp(g):
        return _unbroadcast_pair(g * b_data, g * a_data, a, b, b_data.shape)

    return _record(out, (a, b), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    out = a.data * s

    def vjp(g):
        return (g * s,)

    return _record(out, (a,), vjp)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, 0).astype(a.dtype, copy=False)

    def vjp(g):
        return (g * mask,)

    return _record(out, (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# dense layer

def affine(x: Tensor, w: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """y = x @ w (+ bias); x is [n,k], w is [k,m], bias is [m]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"affine dimension mismatch: x {x.data.shape}, w {w.data.shape}")
    out = x.data @ w.data
    if bias is not None:
        if bias.data.shape != (w.data.shape[1],):
            raise ShapeError(f"bias shape {bias.data.shape} does not match output dim {w.data.shape[1]}")
        out = out + bias.data
    x_data, w_data = x.data, w.data

    if bias is None:
        def vjp(g):
            return (g @ w_data.T, x_data.T @ g)
        return _record(out, (x, w), vjp)

    def vjp_b(g):
        return (g @ w_data.T, x_data.T @ g, g.sum(axis=0))

    return _record(out, (x, w, bias), vjp_b)


# ---------------------------------------------------------------------------
# convolution

def _pad(x: np.ndarray, p: int, padding: str) -> np.ndarray:
    mode = {"replicate": "edge", "circular": "wrap"}[padding]
    return np.pad(x, ((0, 0), (p, p), (p, p)), mode=mode)


def _fold_axis(g: np.ndarray, axis: int, p: int, padding: str) -> np.ndarray:
    """Adjoint of padding one spatial axis by p (edge/wrap are separable)."""
    if p == 0:
        return g
    n = g.shape[axis] - 2 * p
    sl = [slice(None)] * g.ndim
    sl[axis] = slice(p, p + n)
    core = np.ascontiguousarray(g[tuple(sl)])
    sl[axis] = slice(0, p)
    lead = g[tuple(sl)]
    sl[axis] = slice(p + n, None)
    tail = g[tuple(sl)]
    idx = [slice(None)] * g.ndim
    if padding == "replicate":
        idx[axis] = slice(0, 1)
        core[tuple(idx)] += lead.sum(axis=axis, keepdims=True)
        idx[axis] = slice(n - 1, n)
        core[tuple(idx)] += tail.sum(axis=axis, keepdims=True)
    else:  # circular
        idx[axis] = slice(n - p, n)
        core[tuple(idx)] += lead
        idx[axis] = slice(0, p)
        core[tuple(idx)] += tail
    return core


def _fold_pad(gpad: np.ndarray, p: int, padding: str) -> np.ndarray:
    return _fold_axis(_fold_axis(gpad, 1, p, padding), 2, p, padding)


def conv2d(x: Tensor, kernels: Tensor, mode: str = "depthwise",
           padding: str = "replicate", bias: Optional[Tensor] = None) -> Tensor:
    """Spatial-shape-preserving 2-D convolution.

    mode="depthwise": kernels is [c,k,k], one kernel per input channel.
    mode="dense": kernels is [c_out,c_in,k,k].
    """
    if padding not in ("replicate", "circular"):
        raise ValueError(f"unknown padding {padding!r}")
    c, H, W = x.data.shape
    kd = kernels.data
    if mode == "depthwise":
        if kd.ndim != 3 or kd.shape[0] != c:
            raise ShapeError(f"depthwise kernels {kd.shape} do not match input channels {c}")
        k = kd.shape[1]
    elif mode == "dense":
        if kd.ndim != 4 or kd.shape[1] != c:
            raise ShapeError(f"dense kernels {kd.shape} do not match input channels {c}")
        k = kd.shape[2]
    else:
        raise ValueError(f"unknown conv mode {mode!r}")
    if kd.shape[-1] != k or k % 2 == 0:
        raise ShapeError(f"kernel spatial size must be odd square, got {kd.shape}")
    p = k // 2
    pad = _pad(x.data, p, padding)

    if mode == "depthwise":
        out = np.zeros((c, H, W), dtype=x.dtype)
        for dy in range(k):
            for dx in range(k):
                out += kd[:, dy, dx][:, None, None] * pad[:, dy:dy + H, dx:dx + W]

        def vjp(g):
            gpad = np.zeros_like(pad)
            gk = np.zeros_like(kd)
            for dy in range(k):
                for dx in range(k):
                    gpad[:, dy:dy + H, dx:dx + W] += kd[:, dy, dx][:, None, None] * g
                    gk[:, dy, dx] = (g * pad[:, dy:dy + H, dx:dx + W]).sum(axis=(1, 2))
            return (_fold_pad(gpad, p, padding), gk)

        return _record(out, (x, kernels), vjp)

    co = kd.shape[0]
    out = np.zeros((co, H, W), dtype=x.dtype)
    parents = [x, kernels]
    if bias is not None:
        if bias.data.shape != (co,):
            raise ShapeError(f"conv bias shape {bias.data.shape}, expected ({co},)")
        out += bias.data[:, None, None]
        parents.append(bias)
    # bias first, then taps in channel-major order: keeps the float
    # accumulation order identical to a scalar nested-loop evaluation
    for i in range(c):
        for dy in range(k):
            for dx in range(k):
                out += kd[:, i, dy, dx][:, None, None] * pad[i, dy:dy + H, dx:dx + W]

    def vjp_dense(g):
        gpad = np.zeros_like(pad)
        gk = np.zeros_like(kd)
        for dy in range(k):
            for dx in range(k):
                gk[:, :, dy, dx] = np.einsum("ohw,ihw->oi", g, pad[:, dy:dy + H, dx:dx + W])
                gpad[:, dy:dy + H, dx:dx + W] += np.einsum("oi,ohw->ihw", kd[:, :, dy, dx], g)
        grads = [_fold_pad(gpad, p, padding), gk]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)

    return _record(out, tuple(parents), vjp_dense)


# ---------------------------------------------------------------------------
# pooling

def pool(x: Tensor, kind: str, k: Optional[int] = None) -> Tensor:
    c, H, W = x.data.shape
    if H == 0 or W == 0:
        raise ShapeError("empty spatial extent")
    xd = x.data

    if kind == "global-avg":
        out = xd.mean(axis=(1, 2))

        def vjp(g):
            return (np.broadcast_to(g[:, None, None] / (H * W), xd.shape).astype(xd.dtype, copy=False),)

        return _record(out, (x,), vjp)

    if kind == "global-max":
        flat = xd.reshape(c, -1)
        idx = flat.argmax(axis=1)  # first maximum
        out = flat[np.arange(c), idx]

        def vjp(g):
            gf = np.zeros_like(flat)
            gf[np.arange(c), idx] = g
            return (gf.reshape(xd.shape),)

        return _record(out, (x,), vjp)

    if kind == "channel-avg":
        out = xd.mean(axis=0, keepdims=True)

        def vjp(g):
            return (np.broadcast_to(g / c, xd.shape).astype(xd.dtype, copy=False),)

        return _record(out, (x,), vjp)

    if kind == "channel-max":
        idx = xd.argmax(axis=0)[None]  # first maximum per pixel
        out = np.take_along_axis(xd, idx, axis=0)

        def vjp(g):
            gx = np.zeros_like(xd)
            np.put_along_axis(gx, idx, g, axis=0)
            return (gx,)

        return _record(out, (x,), vjp)

    if kind == "spatial-avg":
        if k is None or k < 1:
            raise ValueError("spatial-avg pooling needs a stride k >= 1")
        if H % k or W % k:
            raise ShapeError(f"spatial extent {H}x{W} not divisible by {k}")
        out = xd.reshape(c, H // k, k, W // k, k).mean(axis=(2, 4))

        def vjp(g):
            gx = np.repeat(np.repeat(g, k, axis=1), k, axis=2) / (k * k)
            return (gx.astype(xd.dtype, copy=False),)

        return _record(out, (x,), vjp)

    raise ValueError(f"unknown pool kind {kind!r}")


# ---------------------------------------------------------------------------
# resampling

_BILINEAR_CACHE: dict = {}


def _bilinear_matrix(n: int, f: int, dtype) -> np.ndarray:
    """Row-interpolation matrix [n*f, n], align-corners=false convention:
    output center i maps to source coordinate (i+0.5)/f - 0.5, edges clamped."""
    key = (n, f, np.dtype(dtype))
    m = _BILINEAR_CACHE.get(key)
    if m is None:
        m = np.zeros((n * f, n), dtype=dtype)
        for i in range(n * f):
            src = (i + 0.5) / f - 0.5
            i0 = math.floor(src)
            w = src - i0
            lo = min(max(i0, 0), n - 1)
            hi = min(max(i0 + 1, 0), n - 1)
            m[i, lo] += 1.0 - w
            m[i, hi] += w
        _BILINEAR_CACHE[key] = m
    return m


def resample(x: Tensor, factor: int, kind: str = "bilinear-up") -> Tensor:
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    c, h, w = x.data.shape
    xd = x.data

    if kind == "nearest-up":
        out = np.repeat(np.repeat(xd, factor, axis=1), factor, axis=2)

        def vjp(g):
            return (g.reshape(c, h, factor, w, factor).sum(axis=(2, 4)),)

        return _record(out, (x,), vjp)

    if kind == "bilinear-up":
        ah = _bilinear_matrix(h, factor, xd.dtype)
        aw = _bilinear_matrix(w, factor, xd.dtype)
        out = np.einsum("ij,cjk,lk->cil", ah, xd, aw, optimize=True)

        def vjp(g):
            return (np.einsum("ij,cik,kl->cjl", ah, g, aw, optimize=True),)

        return _record(out, (x,), vjp)

    raise ValueError(f"unknown resample kind {kind!r}")


# ---------------------------------------------------------------------------
# structure ops

def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
                     for i in range(len(parts)))

    return _record(out, tuple(parts), vjp)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    out = x.data[start:stop].copy()

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return _record(out, (x,), vjp)


def to_pixel_matrix(x: Tensor) -> Tensor:
    """[c,H,W] -> [H*W, c] so per-cell dense layers are one matmul."""
    c, h, w = x.data.shape
    out = np.ascontiguousarray(x.data.transpose(1, 2, 0).reshape(h * w, c))

    def vjp(g):
        return (g.reshape(h, w, c).transpose(2, 0, 1),)

    return _record(out, (x,), vjp)


def to_matrix_row(x: Tensor) -> Tensor:
    """[c] -> [1,c] so vectors can pass through affine layers."""
    out = x.data.reshape(1, -1)

    def vjp(g):
        return (g.reshape(x.data.shape),)

    return _record(out, (x,), vjp)


def from_matrix_row(x: Tensor) -> Tensor:
    """[1,c] -> [c]; inverse of to_matrix_row."""
    out = x.data.reshape(-1)

    def vjp(g):
        return (g.reshape(x.data.shape),)

    return _record(out, (x,), vjp)


def to_image(x: Tensor, h: int, w: int) -> Tensor:
    """[H*W, c] -> [c,H,W]; inverse of to_pixel_matrix."""
    n, c = x.data.shape
    if n != h * w:
        raise ShapeError(f"cannot reshape {x.data.shape} to image {h}x{w}")
    out = np.ascontiguousarray(x.data.reshape(h, w, c).transpose(2, 0, 1))

    def vjp(g):
        return (g.transpose(1, 2, 0).reshape(n, c),)

    return _record(out, (x,), vjp)


# ---------------------------------------------------------------------------
# reductions

def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def vjp(g):
        return (np.broadcast_to(g, x.data.shape).astype(x.dtype, copy=False),)

    return _record(out, (x,), vjp)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.sum() / n, dtype=x.dtype)

    def vjp(g):
        return (np.broadcast_to(g / n, x.data.shape).astype(x.dtype, copy=False),)

    return _record(out, (x,), vjp)


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mse shape mismatch: {a.data.shape} vs {b.data.shape}")
    d = sub(a, b)
    return mean_all(mul(d, d))
