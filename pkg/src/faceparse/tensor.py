"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value flowing through the network lives in a ``Tensor``. Operations
build a DAG of backward closures; ``Tensor.backward()`` on a scalar loss
runs one reverse topological sweep and accumulates gradients into every
``requires_grad`` leaf. The graph is single-use: a second backward over
already-consumed nodes raises ``GraphStateError``.

All arithmetic is 64-bit. Any operation producing NaN/Inf raises
``NonFiniteError`` instead of letting the value escape.
"""

from __future__ import annotations

import numpy as np
from scipy import special

from .errors import DataError, GraphStateError, NonFiniteError, ShapeError

Array = np.ndarray


def _as_array(data) -> Array:
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains NaN or Inf")
    return arr


class Tensor:
    """N-dimensional float64 array participating in an autodiff graph."""

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse sweep from a scalar loss, accumulating grads into leaves."""
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphStateError("loss does not depend on any requires_grad tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        for node in topo:
            if node._consumed:
                raise GraphStateError(
                    "graph was already consumed by a previous backward; rerun the forward pass"
                )
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            node._consumed = node._backward is not None
        self._consumed = True

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / float(other))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: Array, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    return out


def _accum(t: Tensor, g: Array) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _sum_to_shape(g: Array, shape: tuple[int, ...]) -> Array:
    """Undo numpy broadcasting: reduce ``g`` back to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are incompatible") from None


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "add")
    data = a.data + b.data

    def backward(g):
        _accum(a, _sum_to_shape(g, a.shape))
        _accum(b, _sum_to_shape(g, b.shape))

    return _make(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, -g)

    return _make(-a.data, (a,), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "mul")
    data = a.data * b.data

    def backward(g):
        _accum(a, _sum_to_shape(g * b.data, a.shape))
        _accum(b, _sum_to_shape(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    data = a.data ** exponent

    def backward(g):
        _accum(a, g * exponent * a.data ** (exponent - 1.0))

    return _make(data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # the finite guard reports overflow
        data = np.exp(a.data)

    def backward(g):
        _accum(a, g * data)

    return _make(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):  # guard reports NaN/Inf
        data = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data)

    return _make(data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def backward(g):
        _accum(a, g * (a.data > 0.0))

    return _make(data, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit, x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x / np.sqrt(2.0)))
    data = x * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        _accum(a, g * (cdf + x * pdf))

    return _make(data, (a,), backward)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _make(data, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(int(ax) for ax in axes)
    inverse = tuple(np.argsort(axes))
    data = a.data.transpose(axes)

    def backward(g):
        _accum(a, g.transpose(inverse))

    return _make(data, (a,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    extents = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + extents)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _make(data, tuple(tensors), backward)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _make(data, (a,), backward)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return reduce_sum(a, axis, keepdims) * (1.0 / count)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    data = a.data @ b.data

    def backward(g):
        _accum(a, g @ b.data.swapaxes(-1, -2))
        _accum(b, a.data.swapaxes(-1, -2) @ g)

    return _make(data, (a, b), backward)


# ---------------------------------------------------------------------------
# normalization / activation over axes
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        _accum(a, data * (g - inner))

    return _make(data, (a,), backward)


def layer_norm(a: Tensor, axis: int, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    axis = axis % a.ndim
    extent = a.shape[axis]
    gamma, beta = _wrap(gamma), _wrap(beta)
    if gamma.shape != (extent,) or beta.shape != (extent,):
        raise ShapeError(
            f"layer_norm affine params must have shape ({extent},), "
            f"got {gamma.shape} and {beta.shape}"
        )
    bshape = [1] * a.ndim
    bshape[axis] = extent
    gb = gamma.data.reshape(bshape)
    bb = beta.data.reshape(bshape)

    mu = a.data.mean(axis=axis, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gb + bb

    def backward(g):
        reduce_axes = tuple(i for i in range(a.ndim) if i != axis)
        _accum(gamma, (g * xhat).sum(axis=reduce_axes))
        _accum(beta, g.sum(axis=reduce_axes))
        dxhat = g * gb
        term = dxhat - dxhat.mean(axis=axis, keepdims=True) \
            - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True)
        _accum(a, inv * term)

    return _make(data, (a, gamma, beta), backward)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-d cross-correlation with zero padding."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d needs 4-d input/weight, got {x.shape} and {w.shape}")
    n, c_in, h, width = x.shape
    c_out, c_in_g, kh, kw = w.shape
    if c_in % groups != 0 or c_out % groups != 0 or c_in_g != c_in // groups:
        raise ShapeError(
            f"conv2d channel/group mismatch: input {c_in} channels, weight {w.shape}, "
            f"groups {groups}"
        )
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias must have shape ({c_out},), got {bias.shape}")
    s, p = int(stride), int(padding)
    h_out = (h + 2 * p - kh) // s + 1
    w_out = (width + 2 * p - kw) // s + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for padded input {h}x{width}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    xg = xp.reshape(n, groups, c_in_g, xp.shape[2], xp.shape[3])
    wg = w.data.reshape(groups, c_out // groups, c_in_g, kh, kw)

    out = np.zeros((n, groups, c_out // groups, h_out, w_out))
    for a in range(kh):
        for b in range(kw):
            xs = xg[:, :, :, a:a + (h_out - 1) * s + 1:s, b:b + (w_out - 1) * s + 1:s]
            out += np.einsum("ngihw,goi->ngohw", xs, wg[:, :, :, a, b])
    data = out.reshape(n, c_out, h_out, w_out)
    if bias is not None:
        data = data + bias.data.reshape(1, c_out, 1, 1)

    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        gg = g.reshape(n, groups, c_out // groups, h_out, w_out)
        if bias is not None:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        gw = np.zeros_like(wg)
        gxp = np.zeros_like(xg)
        for a in range(kh):
            for b in range(kw):
                sl_h = slice(a, a + (h_out - 1) * s + 1, s)
                sl_w = slice(b, b + (w_out - 1) * s + 1, s)
                xs = xg[:, :, :, sl_h, sl_w]
                gw[:, :, :, a, b] += np.einsum("ngohw,ngihw->goi", gg, xs)
                gxp[:, :, :, sl_h, sl_w] += np.einsum(
                    "ngohw,goi->ngihw", gg, wg[:, :, :, a, b])
        _accum(w, gw.reshape(w.shape))
        gx = gxp.reshape(xp.shape)
        if p:
            gx = gx[:, :, p:-p, p:-p]
        _accum(x, gx)

    return _make(data, parents, backward)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def _resize_axis(in_size: int, out_size: int):
    # align-corners-false: source coord = (t + 0.5) * scale - 0.5
    scale = in_size / out_size
    src = (np.arange(out_size) + 0.5) * scale - 0.5
    lo = np.floor(src).astype(np.int64)
    frac = src - lo
    lo_c = np.clip(lo, 0, in_size - 1)
    hi_c = np.clip(lo + 1, 0, in_size - 1)
    return lo_c, hi_c, frac


def bilinear_resize_array(x: Array, out_h: int, out_w: int) -> Array:
    """Plain-numpy bilinear resize of a [..., H, W] array (no autodiff)."""
    i0, i1, fy = _resize_axis(x.shape[-2], out_h)
    j0, j1, fx = _resize_axis(x.shape[-1], out_w)
    fy = fy.reshape(-1, 1)
    top = (1.0 - fx) * x[..., i0[:, None], j0[None, :]] + fx * x[..., i0[:, None], j1[None, :]]
    bot = (1.0 - fx) * x[..., i1[:, None], j0[None, :]] + fx * x[..., i1[:, None], j1[None, :]]
    return (1.0 - fy) * top + fy * bot


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize expects NCHW input, got {x.shape}")
    out_h, out_w = int(out_h), int(out_w)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: target {out_h}x{out_w} must be positive")
    h, w = x.shape[2], x.shape[3]
    i0, i1, fy = _resize_axis(h, out_h)
    j0, j1, fx = _resize_axis(w, out_w)
    wy = fy.reshape(-1, 1)
    wx = fx.reshape(1, -1)
    w00 = (1.0 - wy) * (1.0 - wx)
    w01 = (1.0 - wy) * wx
    w10 = wy * (1.0 - wx)
    w11 = wy * wx
    ii0, jj0 = i0[:, None], j0[None, :]
    ii1, jj1 = i1[:, None], j1[None, :]
    data = (w00 * x.data[:, :, ii0, jj0] + w01 * x.data[:, :, ii0, jj1]
            + w10 * x.data[:, :, ii1, jj0] + w11 * x.data[:, :, ii1, jj1])

    def backward(g):
        gx = np.zeros_like(x.data)
        bi0 = np.broadcast_to(ii0, (out_h, out_w))
        bi1 = np.broadcast_to(ii1, (out_h, out_w))
        bj0 = np.broadcast_to(jj0, (out_h, out_w))
        bj1 = np.broadcast_to(jj1, (out_h, out_w))
        np.add.at(gx, (slice(None), slice(None), bi0, bj0), g * w00)
        np.add.at(gx, (slice(None), slice(None), bi0, bj1), g * w01)
        np.add.at(gx, (slice(None), slice(None), bi1, bj0), g * w10)
        np.add.at(gx, (slice(None), slice(None), bi1, bj1), g * w11)
        _accum(x, gx)

    return _make(data, (x,), backward)


def adaptive_avg_pool(x: Tensor, bins_h: int, bins_w: int) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool expects NCHW input, got {x.shape}")
    bins_h, bins_w = int(bins_h), int(bins_w)
    if bins_h < 1 or bins_w < 1:
        raise ShapeError("adaptive_avg_pool: bins must be >= 1")
    n, c, h, w = x.shape
    if bins_h > h or bins_w > w:
        raise ShapeError(f"adaptive_avg_pool: bins ({bins_h},{bins_w}) exceed input {h}x{w}")

    def bounds(size, bins, i):
        return (size * i) // bins, -(-(size * (i + 1)) // bins)  # floor, ceil

    data = np.zeros((n, c, bins_h, bins_w))
    windows = []
    for i in range(bins_h):
        h0, h1 = bounds(h, bins_h, i)
        for j in range(bins_w):
            w0, w1 = bounds(w, bins_w, j)
            data[:, :, i, j] = x.data[:, :, h0:h1, w0:w1].mean(axis=(2, 3))
            windows.append((i, j, h0, h1, w0, w1))

    def backward(g):
        gx = np.zeros_like(x.data)
        for i, j, h0, h1, w0, w1 in windows:
            area = (h1 - h0) * (w1 - w0)
            gx[:, :, h0:h1, w0:w1] += g[:, :, i, j][:, :, None, None] / area
        _accum(x, gx)

    return _make(data, (x,), backward)


def bilinear_sample(x: Tensor, offsets: Tensor) -> Tensor:
    """Warp ``x`` by per-pixel displacements, zero padding out of bounds.

    ``offsets`` is [N,2,H,W]: channel 0 displaces columns (x), channel 1 rows
    (y), in pixel units. output(i,j) reads x at (i + dy, j + dx) bilinearly.
    Differentiable w.r.t. both the source and the offsets.
    """
    if x.ndim != 4 or offsets.ndim != 4 or offsets.shape[1] != 2:
        raise ShapeError(
            f"bilinear_sample expects NCHW input and Nx2xHxW offsets, "
            f"got {x.shape} and {offsets.shape}"
        )
    n, c, h, w = x.shape
    if offsets.shape[0] != n or offsets.shape[2:] != (h, w):
        raise ShapeError(
            f"bilinear_sample: offsets {offsets.shape} do not match input {x.shape}"
        )
    jj = np.arange(w).reshape(1, 1, w)
    ii = np.arange(h).reshape(1, h, 1)
    # positions beyond the padded border all read zero; clamping there keeps
    # the result identical while avoiding int overflow on extreme offsets
    px = np.clip(jj + offsets.data[:, 0], -2.0, w + 1.0)  # [N,H,W]
    py = np.clip(ii + offsets.data[:, 1], -2.0, h + 1.0)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    fx = px - x0
    fy = py - y0
    x1, y1 = x0 + 1, y0 + 1

    batch = np.arange(n)[:, None, None]

    def take(yi, xi):
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        yc = np.clip(yi, 0, h - 1)
        xc = np.clip(xi, 0, w - 1)
        vals = x.data[batch[:, None], np.arange(c)[None, :, None, None],
                      yc[:, None], xc[:, None]]
        return vals * valid[:, None], valid, yc, xc

    v00, m00, y00, x00 = take(y0, x0)
    v01, m01, y01, x01 = take(y0, x1)
    v10, m10, y10, x10 = take(y1, x0)
    v11, m11, y11, x11 = take(y1, x1)
    fxe = fx[:, None]
    fye = fy[:, None]
    w00 = (1.0 - fye) * (1.0 - fxe)
    w01 = (1.0 - fye) * fxe
    w10 = fye * (1.0 - fxe)
    w11 = fye * fxe
    data = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            chan = np.arange(c)[None, :, None, None]
            for weight, mask, yc, xc in (
                (w00, m00, y00, x00), (w01, m01, y01, x01),
                (w10, m10, y10, x10), (w11, m11, y11, x11),
            ):
                np.add.at(gx, (batch[:, None], chan, yc[:, None], xc[:, None]),
                          g * weight * mask[:, None])
            _accum(x, gx)
        if offsets.requires_grad:
            d_px = ((1.0 - fye) * (v01 - v00) + fye * (v11 - v10))
            d_py = ((1.0 - fxe) * (v10 - v00) + fxe * (v11 - v01))
            go = np.stack([(g * d_px).sum(axis=1), (g * d_py).sum(axis=1)], axis=1)
            _accum(offsets, go)

    return _make(data, (x, offsets), backward)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def cross_entropy_loss(logits: Tensor, target: Array, ignore_index: int = 255) -> Tensor:
    """Mean over non-ignored pixels of -log softmax(logits) at the target class.

    ``logits`` is [N,K,H,W]; ``target`` an integer [N,H,W] array. A batch with
    every pixel ignored yields loss 0 with zero gradient.
    """
    if logits.ndim != 4:
        raise ShapeError(f"cross_entropy_loss expects NKHW logits, got {logits.shape}")
    target = np.asarray(target)
    n, k, h, w = logits.shape
    if target.shape != (n, h, w):
        raise ShapeError(
            f"cross_entropy_loss: target shape {target.shape} does not match "
            f"logits {logits.shape}"
        )
    valid = target != ignore_index
    bad = valid & ((target < 0) | (target >= k))
    if bad.any():
        idx = tuple(int(v) for v in np.argwhere(bad)[0])
        raise DataError(
            f"label {int(target[idx])} at pixel {idx} outside [0, {k}) "
            f"and not the ignore index {ignore_index}"
        )
    count = int(valid.sum())
    if count == 0:
        # fully-ignored batch: defined as 0 with zero gradient
        def backward_zero(g):
            _accum(logits, np.zeros_like(logits.data))

        return _make(np.float64(0.0), (logits,), backward_zero)

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + logits.data.max(axis=1)
    tclamped = np.where(valid, target, 0)
    bi, hi, wi = np.ogrid[:n, :h, :w]
    picked = logits.data[bi, tclamped, hi, wi]
    data = np.float64(((lse - picked) * valid).sum() / count)

    def backward(g):
        prob = np.exp(shifted)
        prob /= prob.sum(axis=1, keepdims=True)
        onehot = np.zeros_like(prob)
        onehot[bi, tclamped, hi, wi] = 1.0
        gl = (prob - onehot) * valid[:, None] / count
        _accum(logits, float(g) * gl)

    return _make(data, (logits,), backward)
