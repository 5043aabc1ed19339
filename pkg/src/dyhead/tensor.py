"""Minimal dense tensor with tape-based reverse-mode autodiff.

Data lives in row-major numpy arrays (float64 by default, float32 optional).
Every op builds a node graph; Tensor.backward() walks the graph in reverse
topological order and accumulates gradients additively into the leaves that
were created with requires_grad=True.

A process-local multiply-accumulate (MAC) counter can be activated with
count_macs(); ops then report how many MACs they actually execute, bucketed
by the innermost mac_stage() label. Pure adds, comparisons and nonlinearities
are not counted.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "MacCounter",
    "count_macs",
    "mac_stage",
    "elementwise",
    "add",
    "mul",
    "maximum",
    "minimum",
    "relu",
    "sigmoid",
    "hard_sigmoid",
    "softplus",
    "exp",
    "log",
    "absval",
    "pow_const",
    "mean",
    "tsum",
    "linear",
    "conv2d_3x3",
    "global_avg_pool",
    "bilinear_sample",
    "bilinear_sample_map",
    "bilinear_resize",
    "stack",
    "reshape",
    "GradcheckReport",
    "gradcheck",
]


# ---------------------------------------------------------------------------
# MAC accounting
# ---------------------------------------------------------------------------

class MacCounter:
    """Collects executed multiply-accumulate counts, bucketed by stage label."""

    def __init__(self):
        self.stages = {}

    def add(self, stage, n):
        self.stages[stage] = self.stages.get(stage, 0) + int(n)

    @property
    def total(self):
        return sum(self.stages.values())


_ACTIVE_COUNTERS = []
_STAGE = ["other"]


@contextmanager
def count_macs(counter=None):
    """Activate MAC counting; yields the counter."""
    c = counter if counter is not None else MacCounter()
    _ACTIVE_COUNTERS.append(c)
    try:
        yield c
    finally:
        _ACTIVE_COUNTERS.pop()


@contextmanager
def mac_stage(name):
    """Attribute MACs executed inside this context to the given stage."""
    _STAGE.append(name)
    try:
        yield
    finally:
        _STAGE.pop()


def _count(n):
    if _ACTIVE_COUNTERS:
        _ACTIVE_COUNTERS[-1].add(_STAGE[-1], n)


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------

class Tensor:
    """Dense row-major N-d array node in the autodiff graph.

    Leaves created with requires_grad=True receive accumulated gradients in
    .grad after backward(); interior nodes only relay gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_needs")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else np.float64)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._needs = self.requires_grad

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _node(data, parents, vjp):
        t = Tensor.__new__(Tensor)
        t.data = data
        t.requires_grad = False
        t.grad = None
        needs = any(p._needs for p in parents)
        t._parents = tuple(parents) if needs else ()
        t._vjp = vjp if needs else None
        t._needs = needs
        return t

    # -- basic protocol -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.item())

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operators ------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)

    def __getitem__(self, key):
        return _getitem(self, key)

    def zero_grad(self):
        self.grad = None

    # -- backward -------------------------------------------------------------

    def backward(self):
        """Reverse pass from a scalar; gradients accumulate into leaf .grad."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar, got shape {self.data.shape}")
        topo = []
        seen = set()
        stack_ = [(self, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for p in node._parents:
                if p._needs and id(p) not in seen:
                    stack_.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent._needs:
                    continue
                acc = grads.get(id(parent))
                if acc is None:
                    # a vjp may hand the same array (or views of one buffer)
                    # to several parents, so never accumulate in place
                    grads[id(parent)] = pg
                else:
                    grads[id(parent)] = acc + pg


class Parameter(Tensor):
    """Named leaf tensor tracked by optimizers and checkpoints."""

    __slots__ = ("name",)

    def __init__(self, data, name, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Reduce grad of a broadcast result back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b)
    out = a.data + b.data
    return Tensor._node(out, (a, b), lambda g: (
        _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b)
    out = a.data * b.data
    _count(out.size)
    return Tensor._node(out, (a, b), lambda g: (
        _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)))


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b)
    out = a.data - b.data
    return Tensor._node(out, (a, b), lambda g: (
        _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def neg(x):
    x = _wrap(x)
    return Tensor._node(-x.data, (x,), lambda g: (-g,))


def maximum(a, b):
    """Elementwise max; ties route the gradient to the first argument."""
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b)
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)
    return Tensor._node(out, (a, b), lambda g: (
        _unbroadcast(g * take_a, a.data.shape),
        _unbroadcast(g * ~take_a, b.data.shape)))


def minimum(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b)
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)
    return Tensor._node(out, (a, b), lambda g: (
        _unbroadcast(g * take_a, a.data.shape),
        _unbroadcast(g * ~take_a, b.data.shape)))


def relu(x):
    x = _wrap(x)
    mask = x.data > 0
    return Tensor._node(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x):
    x = _wrap(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    out[~pos] = e / (1.0 + e)
    return Tensor._node(out, (x,), lambda g: (g * out * (1.0 - out),))


def hard_sigmoid(x):
    """max(0, min(1, (x + 1) / 2)); flat (zero) gradient outside (-1, 1)."""
    x = _wrap(x)
    pre = (x.data + 1.0) * 0.5
    out = np.clip(pre, 0.0, 1.0)
    interior = (pre > 0.0) & (pre < 1.0)
    return Tensor._node(out, (x,), lambda g: (g * (0.5 * interior),))


def softplus(x):
    """log(1 + exp(x)), numerically stable."""
    x = _wrap(x)
    out = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
    sig = 1.0 / (1.0 + np.exp(-np.clip(x.data, -500, 500)))
    return Tensor._node(out, (x,), lambda g: (g * sig,))


def exp(x):
    x = _wrap(x)
    out = np.exp(x.data)
    return Tensor._node(out, (x,), lambda g: (g * out,))


def log(x):
    x = _wrap(x)
    out = np.log(x.data)
    return Tensor._node(out, (x,), lambda g: (g / x.data,))


def absval(x):
    x = _wrap(x)
    s = np.sign(x.data)
    return Tensor._node(np.abs(x.data), (x,), lambda g: (g * s,))


def pow_const(x, p):
    x = _wrap(x)
    out = x.data ** p
    return Tensor._node(out, (x,), lambda g: (g * p * x.data ** (p - 1),))


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "max": maximum,
    "relu": relu,
    "sigmoid": sigmoid,
    "hard_sigmoid": hard_sigmoid,
}


def elementwise(kind, *inputs):
    """Dispatch by name; 'affine' takes (x, scale, shift)."""
    if kind == "affine":
        x, a, b = inputs
        return add(mul(x, a), b)
    if kind not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return _ELEMENTWISE[kind](*inputs)


# ---------------------------------------------------------------------------
# Reductions, shaping
# ---------------------------------------------------------------------------

def tsum(x, axes=None, keepdims=False):
    x = _wrap(x)
    axes = tuple(range(x.data.ndim)) if axes is None else tuple(np.atleast_1d(axes))
    out = x.data.sum(axis=axes, keepdims=keepdims)
    _count(x.data.size)

    def vjp(g):
        gg = g if keepdims else np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(gg, x.data.shape),)

    return Tensor._node(np.asarray(out), (x,), vjp)


def mean(x, axes=None, keepdims=False):
    x = _wrap(x)
    axes_t = tuple(range(x.data.ndim)) if axes is None else tuple(np.atleast_1d(axes))
    n = int(np.prod([x.data.shape[a] for a in axes_t])) if axes_t else 1
    out = x.data.mean(axis=axes_t, keepdims=keepdims)
    _count(x.data.size)

    def vjp(g):
        gg = g if keepdims else np.expand_dims(g, axes_t) if axes_t else g
        return (np.broadcast_to(gg, x.data.shape) / n,)

    return Tensor._node(np.asarray(out), (x,), vjp)


def global_avg_pool(x, axes):
    """Arithmetic mean over the named axes; an empty axis set is an error."""
    axes = tuple(np.atleast_1d(axes))
    if len(axes) == 0:
        raise ValueError("global_avg_pool requires at least one axis")
    return mean(x, axes)


def reshape(x, shape):
    x = _wrap(x)
    old = x.data.shape
    return Tensor._node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def stack(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._node(out, tuple(tensors), vjp)


def _getitem(x, key):
    out = x.data[key]
    advanced = isinstance(key, (np.ndarray, list)) or (
        isinstance(key, tuple) and any(isinstance(k, (np.ndarray, list)) for k in key))

    def vjp(g):
        gx = np.zeros_like(x.data)
        if advanced:
            np.add.at(gx, key, g)
        else:
            gx[key] = g
        return (gx,)

    return Tensor._node(np.asarray(out), (x,), vjp)


# ---------------------------------------------------------------------------
# Linear / conv / sampling
# ---------------------------------------------------------------------------

def linear(x, W, b=None):
    """y[..., j] = sum_i x[..., i] W[i, j] + b[j]."""
    x, W = _wrap(x), _wrap(W)
    if x.data.shape[-1] != W.data.shape[0]:
        raise ValueError(
            f"linear: input last dim {x.data.shape[-1]} != weight rows {W.data.shape[0]}")
    out = x.data @ W.data
    _count(out.size * W.data.shape[0])
    if b is None:
        return Tensor._node(out, (x, W), lambda g: (
            g @ W.data.T,
            np.tensordot(x.data, g, axes=(tuple(range(x.data.ndim - 1)),) * 2)))
    b = _wrap(b)
    if b.data.shape != (W.data.shape[1],):
        raise ValueError(f"linear: bias shape {b.data.shape} != ({W.data.shape[1]},)")
    out = out + b.data
    lead = tuple(range(x.data.ndim - 1))
    return Tensor._node(out, (x, W, b), lambda g: (
        g @ W.data.T,
        np.tensordot(x.data, g, axes=(lead, lead)),
        g.sum(axis=lead) if lead else g))


def conv2d_3x3(x, K, b=None):
    """3x3 cross-correlation, stride 1, zero padding 1.

    x: [H, W, C_in], K: [3, 3, C_in, C_out], b: [C_out] or None.
    """
    x, K = _wrap(x), _wrap(K)
    H, W_, Cin = x.data.shape
    if K.data.shape[:3] != (3, 3, Cin):
        raise ValueError(f"conv2d_3x3: kernel shape {K.data.shape} incompatible with input {x.data.shape}")
    Cout = K.data.shape[3]
    xp = np.zeros((H + 2, W_ + 2, Cin), dtype=x.data.dtype)
    xp[1:-1, 1:-1] = x.data
    out = np.zeros((H, W_, Cout), dtype=x.data.dtype)
    for dy in range(3):
        for dx in range(3):
            out += xp[dy:dy + H, dx:dx + W_] @ K.data[dy, dx]
    _count(H * W_ * 9 * Cin * Cout)

    def vjp(g):
        gxp = np.zeros_like(xp)
        gK = np.zeros_like(K.data)
        for dy in range(3):
            for dx in range(3):
                gxp[dy:dy + H, dx:dx + W_] += g @ K.data[dy, dx].T
                gK[dy, dx] = np.tensordot(xp[dy:dy + H, dx:dx + W_], g, axes=((0, 1), (0, 1)))
        grads = [gxp[1:-1, 1:-1], gK]
        if b is not None:
            grads.append(g.sum(axis=(0, 1)))
        return tuple(grads)

    if b is not None:
        b = _wrap(b)
        out += b.data
        return Tensor._node(out, (x, K, b), vjp)
    return Tensor._node(out, (x, K), vjp)


def bilinear_sample_map(x, ys, xs):
    """Bilinear interpolation of x[H,W,C] at fractional (ys, xs) points.

    Sites outside [0,H)x[0,W) contribute zero. ys/xs may be Tensors with any
    common shape P; output has shape P + (C,). Gradients flow to x and to the
    coordinates.
    """
    x = _wrap(x)
    ys, xs = _wrap(ys), _wrap(xs)
    if not (np.all(np.isfinite(ys.data)) and np.all(np.isfinite(xs.data))):
        raise ValueError("bilinear_sample: non-finite coordinates")
    H, W_, C = x.data.shape
    py, px = ys.data, xs.data
    y0 = np.floor(py)
    x0 = np.floor(px)
    fy = py - y0
    fx = px - x0
    y0i = y0.astype(np.int64)
    x0i = x0.astype(np.int64)

    corners = []
    for cy, cx, wy, wx, dwy, dwx in (
        (y0i, x0i, (1 - fy) * (1 - fx), None, -(1 - fx), -(1 - fy)),
        (y0i, x0i + 1, (1 - fy) * fx, None, -fx, (1 - fy)),
        (y0i + 1, x0i, fy * (1 - fx), None, (1 - fx), -fy),
        (y0i + 1, x0i + 1, fy * fx, None, fx, fy),
    ):
        valid = (cy >= 0) & (cy < H) & (cx >= 0) & (cx < W_)
        cyc = np.clip(cy, 0, H - 1)
        cxc = np.clip(cx, 0, W_ - 1)
        v = x.data[cyc, cxc] * valid[..., None]
        corners.append((cyc, cxc, valid, wy, dwy, dwx, v))

    out = np.zeros(py.shape + (C,), dtype=x.data.dtype)
    for _, _, _, w, _, _, v in corners:
        out += w[..., None] * v
    _count(out.size * 4)

    def vjp(g):
        gx = np.zeros_like(x.data)
        gy = np.zeros_like(py)
        gxc = np.zeros_like(px)
        for cyc, cxc, valid, w, dwy, dwx, v in corners:
            np.add.at(gx, (cyc, cxc), g * (w * valid)[..., None])
            dot = (g * v).sum(axis=-1)
            gy += dot * dwy
            gxc += dot * dwx
        return (gx, gy, gxc)

    return Tensor._node(out, (x, ys, xs), vjp)


def bilinear_sample(x, py, px):
    """Single-point bilinear sample; returns a length-C vector tensor."""
    return bilinear_sample_map(x, np.float64(py), np.float64(px))


def bilinear_resize(x, out_h, out_w):
    """Resize x[H,W,C] to [out_h,out_w,C] with bilinear interpolation.

    Target-pixel centers map proportionally into the source grid
    (align-corners=false); source reads clamp to the edge, so constants are
    preserved exactly. Same-size input passes through bit-identically.
    """
    x = _wrap(x)
    H, W_, C = x.data.shape
    if (H, W_) == (out_h, out_w):
        return Tensor._node(x.data, (x,), lambda g: (g,))
    sy = H / out_h
    sx = W_ / out_w
    py = np.clip((np.arange(out_h) + 0.5) * sy - 0.5, 0.0, H - 1.0)
    px = np.clip((np.arange(out_w) + 0.5) * sx - 0.5, 0.0, W_ - 1.0)
    y0 = np.floor(py).astype(np.int64)
    x0 = np.floor(px).astype(np.int64)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W_ - 1)
    fy = (py - y0)[:, None, None]
    fx = (px - x0)[None, :, None]

    d = x.data
    out = ((1 - fy) * (1 - fx) * d[y0[:, None], x0[None, :]]
           + (1 - fy) * fx * d[y0[:, None], x1[None, :]]
           + fy * (1 - fx) * d[y1[:, None], x0[None, :]]
           + fy * fx * d[y1[:, None], x1[None, :]])
    _count(out.size * 4)

    def vjp(g):
        gx = np.zeros_like(d)
        np.add.at(gx, (y0[:, None], x0[None, :]), (1 - fy) * (1 - fx) * g)
        np.add.at(gx, (y0[:, None], x1[None, :]), (1 - fy) * fx * g)
        np.add.at(gx, (y1[:, None], x0[None, :]), fy * (1 - fx) * g)
        np.add.at(gx, (y1[:, None], x1[None, :]), fy * fx * g)
        return (gx,)

    return Tensor._node(out, (x,), vjp)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradcheckReport:
    """Per-input max relative error between analytic and central differences."""

    max_errors: list = field(default_factory=list)
    tol: float = 1e-5

    @property
    def max_error(self):
        return max(self.max_errors) if self.max_errors else 0.0

    @property
    def passed(self):
        return all(np.isfinite(e) and e < self.tol for e in self.max_errors)


def gradcheck(f, inputs, eps=1e-6, tol=1e-5, max_entries=None):
    """Compare analytic gradients of scalar-valued f against central differences.

    inputs: list of Tensors (requires_grad is forced on). max_entries limits
    the number of perturbed entries per input (deterministic stride subset)
    to bound runtime on large inputs; analytic gradients are always full.
    """
    for t in inputs:
        t.requires_grad = True
        t._needs = True
        t.grad = None
    loss = f(*inputs)
    loss.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in inputs]
    report = GradcheckReport(tol=tol)
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        idx = range(n)
        if max_entries is not None and n > max_entries:
            stride = max(1, n // max_entries)
            idx = range(0, n, stride)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(*inputs).item()
            flat[i] = orig - eps
            lo = f(*inputs).item()
            flat[i] = orig
            num = (hi - lo) / (2 * eps)
            ana = a.reshape(-1)[i]
            if not (math.isfinite(num) and math.isfinite(ana)):
                worst = float("inf")
                break
            err = abs(ana - num) / max(1.0, abs(ana), abs(num))
            worst = max(worst, err)
        report.max_errors.append(worst)
    return report
