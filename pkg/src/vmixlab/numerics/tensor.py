"""Small reverse-mode autodiff engine over numpy arrays.

Float32 is the working precision; float64 is used as a shadow mode for
gradient verification. Arrays are row-major and treated as immutable once
an operation has produced them; the only mutation is gradient accumulation
during a single-threaded backward pass. Any NaN/Inf produced by an
operation is an error, enforced after every op unless disabled via
no_finite_checks() for a measured hot loop.
"""

import contextlib
import math

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


_grad_enabled = True
_finite_checks = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (sampling, eval)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def no_finite_checks():
    global _finite_checks
    prev = _finite_checks
    _finite_checks = False
    try:
        yield
    finally:
        _finite_checks = prev


def _check_finite(arr, opname):
    if _finite_checks and not np.isfinite(arr).all():
        raise NonFiniteError(f"{opname} produced non-finite values")


class Tensor:
    """A numpy array plus an optional grad buffer and backward closure."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- graph plumbing ------------------------------------------------

    def _tracked(self) -> bool:
        return self.requires_grad or self._vjp is not None

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Reverse-mode accumulation from this tensor (scalar unless grad given)."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without grad requires a scalar tensor")
            grad = np.ones_like(self.data)
        topo = []
        seen = set()
        stack = [(self, False)]
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
                if p._tracked() and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): grad}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent._tracked():
                    continue
                pid = id(parent)
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg

    # -- operators -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def tensor(data, requires_grad=False, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data, parents, vjp, opname) -> Tensor:
    _check_finite(data, opname)
    out = Tensor(data)
    if _grad_enabled and any(p._tracked() for p in parents):
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient g down to the given (broadcast-source) shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic ---------------------------------------------------------


def add(a, b):
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    b = _coerce(b, a)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), vjp, "add")


def mul(a, b):
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    if not isinstance(b, Tensor):
        bs = float(b)

        def vjp_s(g):
            return (g * bs,)

        return _make(a.data * bs, (a,), vjp_s, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _make(ad * bd, (a, b), vjp, "mul")


def matmul(a: Tensor, b: Tensor):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least rank-2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g @ bd.swapaxes(-1, -2), a.shape) if a._tracked() else None
        gb = _unbroadcast(ad.swapaxes(-1, -2) @ g, b.shape) if b._tracked() else None
        return ga, gb

    return _make(ad @ bd, (a, b), vjp, "matmul")


def texp(a: Tensor):
    out_data = np.exp(a.data)

    def vjp(g):
        return (g * out_data,)

    return _make(out_data, (a,), vjp, "exp")


def square(a: Tensor):
    ad = a.data

    def vjp(g):
        return (g * (2.0 * ad),)

    return _make(ad * ad, (a,), vjp, "square")


def power(a: Tensor, p: float):
    ad = a.data

    def vjp(g):
        return (g * (p * ad ** (p - 1.0)),)

    return _make(ad ** p, (a,), vjp, "power")


def sigmoid(a: Tensor):
    # stable both tails
    ad = a.data
    out_data = np.where(ad >= 0, 1.0 / (1.0 + np.exp(-np.abs(ad))),
                        np.exp(-np.abs(ad)) / (1.0 + np.exp(-np.abs(ad))))
    out_data = out_data.astype(ad.dtype, copy=False)

    def vjp(g):
        return (g * (out_data * (1.0 - out_data)),)

    return _make(out_data, (a,), vjp, "sigmoid")


def silu(a: Tensor):
    ad = a.data
    # exp(-x) may overflow to inf for very negative x; 1/(1+inf) -> 0 is the right limit
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-ad))

    def vjp(g):
        return (g * (s * (1.0 + ad * (1.0 - s))),)

    return _make(ad * s, (a,), vjp, "silu")


# -- shape --------------------------------------------------------------


def reshape(a: Tensor, shape):
    old = a.shape

    def vjp(g):
        return (g.reshape(old),)

    return _make(a.data.reshape(shape), (a,), vjp, "reshape")


def transpose(a: Tensor, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inv),)

    return _make(a.data.transpose(axes), (a,), vjp, "transpose")


def swapaxes(a: Tensor, i: int, j: int):
    def vjp(g):
        return (g.swapaxes(i, j),)

    return _make(a.data.swapaxes(i, j), (a,), vjp, "swapaxes")


def concat(tensors, axis: int):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp, "concat")


# -- reductions ---------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims=False):
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp, "sum")


def tmean(a: Tensor, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in ax]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


# -- neural-net kernels --------------------------------------------------


def softmax_lastdim(a: Tensor):
    """Row-stable softmax over the last axis (max subtraction)."""
    ad = a.data
    m = ad.max(axis=-1, keepdims=True)
    e = np.exp(ad - m)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _make(s, (a,), vjp, "softmax")


def softmax_rows(m):
    """Softmax over each row of a rank-2 tensor; rows sum to 1."""
    t = m if isinstance(m, Tensor) else Tensor(np.asarray(m))
    if t.ndim != 2:
        raise ShapeError(f"softmax_rows expects rank-2 input, got rank {t.ndim}")
    return softmax_lastdim(t)


def layer_norm_lastdim(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Normalize each last-axis vector to mean 0 / var 1, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"affine shapes {gamma.shape}/{beta.shape} do not match feature dim {d}")
    xd, gd = x.data, gamma.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gd + beta.data

    def vjp(g):
        batch_axes = tuple(range(g.ndim - 1))
        gbeta = g.sum(axis=batch_axes)
        ggamma = (g * xhat).sum(axis=batch_axes)
        gg = g * gd
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), vjp, "layer_norm")


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """GroupNorm over channels-last (B, H, W, C): per-group stats across H, W, C//groups."""
    b, h, w, c = x.shape
    if c % groups:
        raise ShapeError(f"channels {c} not divisible by {groups} groups")
    xg = x.data.reshape(b, h * w, groups, c // groups)
    mu = xg.mean(axis=(1, 3), keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=(1, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat.reshape(b, h, w, c) * gamma.data + beta.data

    def vjp(g):
        gbeta = g.sum(axis=(0, 1, 2))
        ggamma = (g.reshape(b, h * w, groups, -1) * xhat).reshape(b, h, w, c).sum(axis=(0, 1, 2))
        gg = (g * gamma.data).reshape(b, h * w, groups, -1)
        gx = inv * (gg - gg.mean(axis=(1, 3), keepdims=True)
                    - xhat * (gg * xhat).mean(axis=(1, 3), keepdims=True))
        return gx.reshape(b, h, w, c), ggamma, gbeta

    return _make(out, (x, gamma, beta), vjp, "group_norm")


def conv2d(x: Tensor, w: Tensor, b, stride: int = 1, padding: int = 1):
    """2D convolution: channels-last (B, H, W, Cin) x (Cout, Cin, kh, kw) -> (B, Ho, Wo, Cout).

    im2col flattens patches in (kh, kw, Cin) order so the gather walks
    contiguous channel runs; the GEMM then hits BLAS directly.
    """
    bn, hh, ww, cin = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channels: input {cin} vs kernel {cin_w}")
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        # pointwise conv is a plain feature-axis matmul
        k1 = w.data.reshape(cout, cin).T
        out = x.data @ k1
        if b is not None:
            out = out + b.data

        def vjp1(g):
            g2 = g.reshape(-1, cout)
            x2 = x.data.reshape(-1, cin)
            gw = (g2.T @ x2).reshape(w.shape) if w._tracked() else None
            gx = (g2 @ k1.T).reshape(x.shape) if x._tracked() else None
            if b is None:
                return gx, gw
            return gx, gw, g2.sum(axis=0) if b._tracked() else None

        parents = (x, w) if b is None else (x, w, b)
        return _make(out, parents, vjp1, "conv1x1")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    ho = (hh + 2 * padding - kh) // stride + 1
    wo = (ww + 2 * padding - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (B, Ho, Wo, Cin, kh, kw)
    col = win.transpose(0, 1, 2, 4, 5, 3).reshape(bn * ho * wo, kh * kw * cin)
    k2 = w.data.transpose(2, 3, 1, 0).reshape(kh * kw * cin, cout)
    out = col @ k2
    if b is not None:
        out = out + b.data
    out = out.reshape(bn, ho, wo, cout)

    def vjp(g):
        g2 = g.reshape(bn * ho * wo, cout)
        gw = gb = gx = None
        if w._tracked():
            gw = (col.T @ g2).reshape(kh, kw, cin, cout).transpose(3, 2, 0, 1)
        if b is not None and b._tracked():
            gb = g2.sum(axis=0)
        if x._tracked():
            gcol = (g2 @ k2.T).reshape(bn, ho, wo, kh, kw, cin)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + ho * stride:stride, j:j + wo * stride:stride, :] += gcol[:, :, :, i, j, :]
            gx = gxp[:, padding:padding + hh, padding:padding + ww, :] if padding else gxp
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, vjp, "conv2d")


def upsample_nearest2x(x: Tensor):
    bn, h, w, c = x.shape
    out = x.data.repeat(2, axis=1).repeat(2, axis=2)

    def vjp(g):
        return (g.reshape(bn, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _make(out, (x,), vjp, "upsample_nearest2x")


def linear(x: Tensor, w: Tensor, b=None):
    """x @ w (+ b); w is (d_in, d_out)."""
    y = matmul(x, w)
    return add(y, b) if b is not None else y


def sinusoidal_embedding(t, dim: int, max_period: float = 10000.0, dtype=np.float32) -> np.ndarray:
    """Classic sin/cos timestep features, (B,) int -> (B, dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)
