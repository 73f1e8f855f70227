"""Reverse-mode differentiable tensors on numpy arrays.

Small tape-based autodiff: each operation records its parents and a
backward closure; ``Tensor.backward()`` on a scalar loss accumulates
gradients into every reachable tensor with ``requires_grad``.

Arithmetic is float64 by default; training code that wants the 2x
memory-bandwidth win can build and run models under
``precision(np.float32)``.
"""

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigurationError, DimensionError, UsageError

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors (e.g. float64
    when validating gradients against finite differences)."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (forward-only evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _coerce(data):
    arr = np.asarray(data)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(_DEFAULT_DTYPE)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bw")

    def __init__(self, data, requires_grad=False):
        self.data = _coerce(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._bw = None

    # -- introspection ------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph plumbing ----------------------------------------------
    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        order = _toposort(self)
        grads = {id(self): np.ones_like(self.data)}
        for t in order:
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.requires_grad and t._bw is None:
                # leaf
                t._accumulate(g)
                continue
            if t._bw is None:
                continue
            parent_grads = t._bw(g)
            for p, pg in zip(t._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] += pg
                elif p._bw is None:
                    p._accumulate(pg)
                else:
                    grads[key] = pg

    # -- operator sugar ----------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -_coerce(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / _coerce(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _toposort(root):
    """Topological order (outputs first), iterative to cope with long
    rollout graphs."""
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    order.reverse()
    return order


def _make(data, parents, bw):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bw = bw
    return out


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Sum gradient ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def mul(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        bval = _coerce(b)
        return _make(a.data * bval, (a,), lambda g: (_unbroadcast(g * bval, a.data.shape),))
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.data.shape),
                            _unbroadcast(g * a.data, b.data.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * out / b.data, b.data.shape))

    return _make(out, (a, b), bw)


def power(a, p):
    a = as_tensor(a)
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    a = as_tensor(a)
    # stable in both tails
    out = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                   np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def elu(a):
    a = as_tensor(a)
    neg = np.expm1(np.minimum(a.data, 0.0))
    out = np.where(a.data > 0, a.data, neg)
    return _make(out, (a,), lambda g: (g * np.where(a.data > 0, 1.0, neg + 1.0),))


# -- reductions -------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make(out, (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- shape ------------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    axes = tuple(axes) if axes else tuple(reversed(range(a.data.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in ts]
    out = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, ts, bw)


def take(a, indices, axis):
    """Gather along ``axis``; backward scatter-adds (duplicate indices sum)."""
    a = as_tensor(a)
    idx = np.asarray(indices)
    out = np.take(a.data, idx, axis=axis)

    def bw(g):
        gi = np.zeros_like(a.data)
        gi_m = np.moveaxis(gi, axis, 0)
        np.add.at(gi_m, idx, np.moveaxis(g, axis, 0))
        return (gi,)

    return _make(out, (a,), bw)


# -- linear algebra ---------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(
            f"matmul needs >=2-d operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner axes disagree: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ b.data.swapaxes(-1, -2)
        gb = a.data.swapaxes(-1, -2) @ g
        return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

    return _make(out, (a, b), bw)


# -- softmax family ---------------------------------------------------

def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), bw)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw)


# -- 1-d convolution / pooling ---------------------------------------

def _conv_out_len(L, W, stride, padding):
    return (L + 2 * padding - W) // stride + 1


def _conv1d_stride1(xd, k, padding, squeeze):
    """Tap-decomposed convolution: one GEMM over all kernel taps on
    time-major data, accumulated through shifted views.  Avoids the
    overlapping-window gather that makes the im2col route memory-bound."""
    B, Cin, L = xd.shape
    Cout, _, W = k.shape
    Lp = L + 2 * padding
    Lout = Lp - W + 1

    x2 = np.ascontiguousarray(xd.transpose(0, 2, 1))      # [B, L, Cin]
    if padding:
        x2 = np.pad(x2, ((0, 0), (padding, padding), (0, 0)))
    k2 = np.ascontiguousarray(k.transpose(1, 2, 0)).reshape(Cin, W * Cout)
    y = (x2.reshape(B * Lp, Cin) @ k2).reshape(B, Lp, W, Cout)
    out2 = y[:, 0:Lout, 0].copy()
    for w in range(1, W):
        out2 += y[:, w:w + Lout, w]
    out = np.ascontiguousarray(out2.transpose(0, 2, 1))   # [B, Cout, Lout]

    def bw(g):
        if g.ndim == 2:
            g = g[None]
        g2 = np.ascontiguousarray(g.transpose(0, 2, 1))   # [B, Lout, Cout]
        # kernel grad: per tap, correlate the shifted input with g
        gbig = np.zeros((B, Lp, W * Cout), dtype=g2.dtype)
        for w in range(W):
            gbig[:, w:w + Lout, w * Cout:(w + 1) * Cout] = g2
        gk2 = x2.reshape(B * Lp, Cin).T @ gbig.reshape(B * Lp, W * Cout)
        gk = np.ascontiguousarray(
            gk2.reshape(Cin, W, Cout).transpose(2, 0, 1))
        # input grad: push g back through each tap and its shift
        kcat = np.ascontiguousarray(k.transpose(0, 2, 1)).reshape(
            Cout, W * Cin)
        u = (g2.reshape(B * Lout, Cout) @ kcat).reshape(B, Lout, W, Cin)
        gx2 = np.zeros((B, Lp, Cin), dtype=g2.dtype)
        for w in range(W):
            gx2[:, w:w + Lout] += u[:, :, w]
        gx = np.ascontiguousarray(
            gx2[:, padding:padding + L].transpose(0, 2, 1))
        if squeeze:
            gx = gx[0]
        return (gx, gk)

    return out, bw


def _conv1d_strided(xd, k, stride, padding, squeeze):
    B, Cin, L = xd.shape
    Cout, _, W = k.shape
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, W, axis=2)[:, :, ::stride]  # [B, Cin, Lout, W]
    out = np.tensordot(win, k, axes=[(1, 3), (1, 2)])         # [B, Lout, Cout]
    out = np.ascontiguousarray(out.transpose(0, 2, 1))
    Lout = out.shape[2]

    def bw(g):
        if g.ndim == 2:
            g = g[None]
        # kernel grad: correlate input windows with upstream grad
        gk = np.tensordot(g, win, axes=[(0, 2), (0, 2)])  # [Cout, Cin, W]
        # input grad: full correlation of the dilated upstream grad with
        # the flipped kernel, then slice away the padding margin
        gd = np.zeros((B, Cout, (Lout - 1) * stride + 1), dtype=g.dtype)
        gd[:, :, ::stride] = g
        kf = np.ascontiguousarray(k[:, :, ::-1].transpose(1, 0, 2))  # [Cin, Cout, W]
        gp = np.pad(gd, ((0, 0), (0, 0), (W - 1, W - 1)))
        gwin = sliding_window_view(gp, W, axis=2)
        gxp = np.tensordot(gwin, kf, axes=[(1, 3), (1, 2)]).transpose(0, 2, 1)
        gx = gxp[:, :, padding:padding + L]
        if gx.shape[2] < L:  # padded tail no window reached
            gx = np.pad(gx, ((0, 0), (0, 0), (0, L - gx.shape[2])))
        gx = np.ascontiguousarray(gx)
        if squeeze:
            gx = gx[0]
        return (gx, gk)

    return out, bw


def conv1d(x, kernel, bias=None, stride=1, padding=0):
    """Cross-correlation over the last axis.

    x: [B, C_in, L] (or [C_in, L]), kernel: [C_out, C_in, W], bias: [C_out].
    Output length is floor((L + 2*padding - W)/stride) + 1.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or kernel.data.ndim != 3:
        raise DimensionError(
            f"conv1d wants input [B, C_in, L] and kernel [C_out, C_in, W], "
            f"got {x.data.shape} and {kernel.data.shape}")
    B, Cin, L = xd.shape
    Cout, KCin, W = kernel.data.shape
    if KCin != Cin:
        raise DimensionError(
            f"conv1d channel axes disagree: input C_in={Cin}, kernel C_in={KCin}")
    if stride < 1:
        raise ConfigurationError(f"conv1d stride must be >= 1, got {stride}")
    if W > L + 2 * padding:
        raise DimensionError(
            f"conv1d kernel width {W} exceeds padded length {L + 2 * padding}")

    if stride == 1:
        out, bw = _conv1d_stride1(xd, kernel.data, padding, squeeze)
    else:
        out, bw = _conv1d_strided(xd, kernel.data, stride, padding, squeeze)

    out_t = _make(out[0] if squeeze else out, (x, kernel), bw)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (Cout,):
            raise DimensionError(
                f"conv1d bias must have shape ({Cout},), got {bias.data.shape}")
        shape = (Cout, 1) if squeeze else (1, Cout, 1)
        out_t = add(out_t, reshape(bias, shape))
    return out_t


def avg_pool1d(x, window):
    """Non-overlapping block means over the last axis; length must divide."""
    x = as_tensor(x)
    L = x.data.shape[-1]
    if window < 1 or L % window != 0:
        raise DimensionError(
            f"avg_pool1d window {window} must divide length {L}")
    shp = x.data.shape[:-1] + (L // window, window)
    out = x.data.reshape(shp).mean(axis=-1)

    def bw(g):
        return (np.repeat(g / window, window, axis=-1),)

    return _make(out, (x,), bw)


def upsample_nearest(x, factor):
    """Repeat each element ``factor`` times along the last axis."""
    x = as_tensor(x)
    if factor < 1:
        raise DimensionError(f"upsample factor must be >= 1, got {factor}")
    out = np.repeat(x.data, factor, axis=-1)

    def bw(g):
        shp = x.data.shape + (factor,)
        return (g.reshape(shp).sum(axis=-1),)

    return _make(out, (x,), bw)


def segment_mean(x, edges):
    """Mean over contiguous segments of the last axis.

    ``edges`` are boundaries [e0, e1, ..., eS] with e0=0 and eS=L; segment s
    covers [e_s, e_{s+1}). Segments may have unequal lengths.
    """
    x = as_tensor(x)
    edges = np.asarray(edges, dtype=np.int64)
    L = x.data.shape[-1]
    if edges[0] != 0 or edges[-1] != L or np.any(np.diff(edges) <= 0):
        raise DimensionError(f"bad segment edges {edges.tolist()} for length {L}")
    lengths = np.diff(edges)
    sums = np.add.reduceat(x.data, edges[:-1], axis=-1)
    # int64 divisor would promote float32 activations to float64
    out = sums / lengths.astype(sums.dtype)

    def bw(g):
        return (np.repeat(g / lengths.astype(g.dtype), lengths, axis=-1),)

    return _make(out, (x,), bw)


def grad_of(loss, params):
    """Gradients of a scalar loss for the named parameters.

    Returns {name: array}; a parameter unreachable from the loss gets
    zeros. Existing accumulated grads are cleared first.
    """
    if not isinstance(loss, Tensor):
        raise UsageError("grad_of expects a Tensor loss")
    if loss.data.size != 1:
        raise UsageError(f"grad_of needs a scalar loss, got shape {loss.data.shape}")
    for p in params.values():
        p.zero_grad()
    loss.backward()
    return {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in params.items()}
