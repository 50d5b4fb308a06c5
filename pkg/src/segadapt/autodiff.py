"""Minimal reverse-mode automatic differentiation over numpy arrays.

Arrays use channels-last layout throughout: images and feature maps are
(B, H, W, C), convolution weights are (kh, kw, Cin, Cout). The tape is
built lazily: an op only records backward closures when at least one
input requires gradients, so inference-only passes cost a thin wrapper
and nothing else.
"""

from __future__ import annotations

import numpy as np


class Var:
    """A node in the computation graph wrapping an ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_vjps")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._vjps = ()  # tuple of (parent Var, vjp callable)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Var(self.data)

    def backward(self):
        """Accumulate gradients of this (scalar) node into the graph."""
        if self.data.ndim != 0:
            raise ValueError("backward() requires a scalar output")
        order = _topo_order(self)
        self.grad = np.ones((), dtype=self.data.dtype)
        for node in order:
            g = node.grad
            if g is None:
                continue
            for parent, vjp in node._vjps:
                contrib = vjp(g)
                if parent.grad is None:
                    parent.grad = contrib
                else:
                    parent.grad = parent.grad + contrib

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __rtruediv__(self, other):
        return mul(power(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return vmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def __repr__(self):
        return f"Var(shape={self.data.shape}, grad={self.requires_grad})"


def _topo_order(root):
    """Reverse topological order, iteratively (graphs can be deep)."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._vjps:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order[::-1]


def as_var(x):
    return x if isinstance(x, Var) else Var(np.asarray(x))


def _make(data, links):
    """Create an op output; record only links whose parent needs grads."""
    out = Var(data)
    live = tuple((p, fn) for p, fn in links if p.requires_grad)
    if live:
        out.requires_grad = True
        out._vjps = live
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` following numpy broadcasting rules."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] > 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ---------------------------------------------------------

def add(a, b):
    a, b = as_var(a), as_var(b)
    return _make(a.data + b.data, [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(g, b.data.shape)),
    ])


def mul(a, b):
    a, b = as_var(a), as_var(b)
    return _make(a.data * b.data, [
        (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
    ])


def power(a, exponent):
    a = as_var(a)
    out = a.data ** exponent
    return _make(out, [
        (a, lambda g: g * exponent * a.data ** (exponent - 1.0)),
    ])


def exp(a):
    a = as_var(a)
    out = np.exp(a.data)
    return _make(out, [(a, lambda g: g * out)])


def log(a):
    a = as_var(a)
    return _make(np.log(a.data), [(a, lambda g: g / a.data)])


def sqrt(a):
    a = as_var(a)
    out = np.sqrt(a.data)
    return _make(out, [(a, lambda g: g * (0.5 / out))])


def tanh(a):
    a = as_var(a)
    out = np.tanh(a.data)
    return _make(out, [(a, lambda g: g * (1.0 - out * out))])


def relu(a):
    a = as_var(a)
    mask = a.data > 0
    return _make(np.maximum(a.data, 0.0), [(a, lambda g: g * mask)])


def leaky_relu(a, slope=0.2):
    a = as_var(a)
    mask = a.data > 0
    scale = np.where(mask, 1.0, slope).astype(a.data.dtype)
    return _make(a.data * scale, [(a, lambda g: g * scale)])


def clip(a, lo, hi):
    """Clamp values; gradient passes only through unclipped entries."""
    a = as_var(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), [(a, lambda g: g * mask)])


# -- reductions and shape ops --------------------------------------------

def vsum(a, axis=None, keepdims=False):
    a = as_var(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(g2, a.data.shape)

    return _make(out, [(a, vjp)])


def vmean(a, axis=None, keepdims=False):
    a = as_var(a)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[i] for i in np.atleast_1d(axis)])
    return mul(vsum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(a, shape):
    a = as_var(a)
    return _make(a.data.reshape(shape), [
        (a, lambda g: g.reshape(a.data.shape)),
    ])


def transpose(a, axes):
    a = as_var(a)
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), [
        (a, lambda g: g.transpose(inv)),
    ])


def concat(parts, axis):
    parts = [as_var(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return _make(out, [(p, make_vjp(i)) for i, p in enumerate(parts)])


def matmul(a, b):
    a, b = as_var(a), as_var(b)
    return _make(a.data @ b.data, [
        (a, lambda g: g @ b.data.T),
        (b, lambda g: a.data.T @ g),
    ])


def index(a, sl):
    """Basic slicing; gradient scatters back into a zero array."""
    a = as_var(a)

    def vjp(g):
        out = np.zeros_like(a.data)
        out[sl] = g
        return out

    return _make(a.data[sl].copy(), [(a, vjp)])


# -- convolution kernels ---------------------------------------------------

def _conv_geometry(size, kernel, stride, dilation, pad):
    span = dilation * (kernel - 1) + 1
    return (size + 2 * pad - span) // stride + 1


def _im2col(x, kh, kw, stride, dilation, pad):
    """Unfold (B,H,W,C) into (B,Ho,Wo,kh*kw,C) patch columns."""
    b, h, w, c = x.shape
    ho = _conv_geometry(h, kh, stride, dilation, pad)
    wo = _conv_geometry(w, kw, stride, dilation, pad)
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = np.empty((b, ho, wo, kh * kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i * kw + j, :] = x[
                :,
                i * dilation: i * dilation + ho * stride: stride,
                j * dilation: j * dilation + wo * stride: stride,
                :,
            ]
    return cols


def _col2im(cols, xshape, kh, kw, stride, dilation, pad):
    """Adjoint of _im2col: scatter-add patch columns back onto the image."""
    b, h, w, c = xshape
    _, ho, wo, _, _ = cols.shape
    out = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[
                :,
                i * dilation: i * dilation + ho * stride: stride,
                j * dilation: j * dilation + wo * stride: stride,
                :,
            ] += cols[:, :, :, i * kw + j, :]
    if pad:
        out = out[:, pad:-pad, pad:-pad, :]
    return out


def conv2d(x, w, bias=None, stride=1, dilation=1, pad=0):
    """2-D convolution. x: (B,H,W,Cin), w: (kh,kw,Cin,Cout), bias: (Cout,)."""
    x, w = as_var(x), as_var(w)
    kh, kw, cin, cout = w.data.shape
    if x.data.shape[3] != cin:
        raise ValueError(
            f"conv2d channel mismatch: input has {x.data.shape[3]}, kernel expects {cin}")
    cols = _im2col(x.data, kh, kw, stride, dilation, pad)
    b, ho, wo = cols.shape[:3]
    cols2 = cols.reshape(b * ho * wo, kh * kw * cin)
    w2 = w.data.reshape(kh * kw * cin, cout)
    out = (cols2 @ w2).reshape(b, ho, wo, cout)

    links = [
        (x, lambda g: _col2im(
            (g.reshape(b * ho * wo, cout) @ w2.T).reshape(b, ho, wo, kh * kw, cin),
            x.data.shape, kh, kw, stride, dilation, pad)),
        (w, lambda g: (cols2.T @ g.reshape(b * ho * wo, cout)).reshape(w.data.shape)),
    ]
    if bias is not None:
        bias = as_var(bias)
        out = out + bias.data
        links.append((bias, lambda g: g.sum(axis=(0, 1, 2))))
    return _make(out, links)


def conv_transpose2d(x, w, bias=None, stride=2, pad=1):
    """Transposed convolution. x: (B,H,W,Cin), w: (kh,kw,Cin,Cout).

    Output spatial size is (H-1)*stride - 2*pad + kh, the adjoint of a
    stride-`stride` convolution; with kh=4, stride=2, pad=1 it exactly
    doubles the resolution.
    """
    x, w = as_var(x), as_var(w)
    kh, kw, cin, cout = w.data.shape
    b, h, wd, xc = x.data.shape
    if xc != cin:
        raise ValueError(
            f"conv_transpose2d channel mismatch: input has {xc}, kernel expects {cin}")
    ho = (h - 1) * stride - 2 * pad + kh
    wo = (wd - 1) * stride - 2 * pad + kw

    w2 = w.data.transpose(2, 0, 1, 3).reshape(cin, kh * kw * cout)
    cols = (x.data.reshape(b * h * wd, cin) @ w2).reshape(b, h, wd, kh * kw, cout)
    out = _col2im(cols, (b, ho, wo, cout), kh, kw, stride, 1, pad)

    def vjp_x(g):
        gcols = _im2col(g, kh, kw, stride, 1, pad)
        return (gcols.reshape(b * h * wd, kh * kw * cout) @ w2.T).reshape(x.data.shape)

    def vjp_w(g):
        gcols = _im2col(g, kh, kw, stride, 1, pad)
        grad2 = x.data.reshape(b * h * wd, cin).T @ gcols.reshape(b * h * wd, kh * kw * cout)
        return grad2.reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3)

    links = [(x, vjp_x), (w, vjp_w)]
    if bias is not None:
        bias = as_var(bias)
        out = out + bias.data
        links.append((bias, lambda g: g.sum(axis=(0, 1, 2))))
    return _make(out, links)


# -- resampling ------------------------------------------------------------

def interp_matrix(n_in, n_out, dtype=np.float64):
    """Row-stochastic 1-D linear interpolation matrix (n_out, n_in).

    Sample positions follow the half-pixel convention, so composing the
    row and column matrices gives standard bilinear resampling (and exact
    2x2 averaging when n_out == n_in // 2).
    """
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        lo = int(np.floor(src))
        frac = src - lo
        m[o, min(max(lo, 0), n_in - 1)] += 1.0 - frac
        m[o, min(max(lo + 1, 0), n_in - 1)] += frac
    return m


def interp2d(x, row_mat, col_mat):
    """Separable spatial resample: out[b,i,j,c] = sum_hw A[i,h] B[j,w] x[b,h,w,c]."""
    x = as_var(x)
    a = row_mat.astype(x.data.dtype, copy=False)
    bm = col_mat.astype(x.data.dtype, copy=False)
    out = np.einsum("ih,jw,bhwc->bijc", a, bm, x.data, optimize=True)
    return _make(out, [
        (x, lambda g: np.einsum("ih,jw,bijc->bhwc", a, bm, g, optimize=True)),
    ])


# -- softmax ----------------------------------------------------------------

def softmax(x, axis=-1):
    """Numerically stabilized softmax along `axis` (max-subtraction)."""
    x = as_var(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        return p * (g - dot)

    return _make(p, [(x, vjp)])
