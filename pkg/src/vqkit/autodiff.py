"""Dense float32 tensors with tape-based reverse-mode differentiation.

Every forward op that touches a tracked tensor records a node holding the op
name, its input tensors and a backward closure. ``backward`` replays the
recorded nodes in reverse topological order, so each call operates on exactly
the graph that produced its loss and never interferes with another one.

Tensors are treated as immutable once written by their producing op; parameter
updates happen between steps, never mid-graph.
"""

from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32

_debug_checks = False
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op."""


class GradientError(RuntimeError):
    """Raised on backward misuse or non-finite gradients."""


def set_debug(flag):
    """Enable per-op finite checks on forward values and gradients."""
    global _debug_checks
    _debug_checks = bool(flag)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation / sampling)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Row-major float32 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad=False):
        if type(data) is np.ndarray and data.dtype == DTYPE and \
                data.flags["C_CONTIGUOUS"] and data.ndim:
            self.data = data
        else:
            self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def backward(self, grad=None):
        backward(self, grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class TapeNode:
    """One recorded op: inputs and the backward closure.

    Deliberately no reference to the output tensor: nodes only point at
    their parents, so a finished graph has no cycles and dies by refcount
    as soon as the loss goes out of scope instead of waiting for the
    cyclic collector. At conv sizes a step graph is large, so this is the
    difference between a flat and an unbounded memory profile.
    """

    __slots__ = ("op", "inputs", "fn")

    def __init__(self, op, inputs, fn):
        self.op = op
        self.inputs = inputs
        self.fn = fn


def _tracked(t):
    return t.requires_grad or t.node is not None


def _assert_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise GradientError(f"non-finite values produced by op '{op}'")


def custom_op(op, inputs, out_data, backward_fn):
    """Create the output tensor of a differentiable op.

    ``backward_fn(out_grad)`` must return one gradient array (or None) per
    input, aligned with ``inputs``. Used by every built-in op and by modules
    that define fused ops of their own.
    """
    if _debug_checks:
        _assert_finite(out_data, op)
    out = Tensor(out_data)
    if _grad_enabled and any(_tracked(t) for t in inputs):
        out.node = TapeNode(op, tuple(inputs), backward_fn)
    return out


def _topo_order(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen or t.node is None:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for inp in t.node.inputs:
            stack.append((inp, False))
    return order


def backward(loss, grad=None):
    """Populate ``grad`` on every tracked tensor that feeds ``loss``.

    Without an explicit seed gradient the loss must be scalar. Gradients of
    tensors belonging to this graph are reset first, so independent losses
    never contaminate each other.
    """
    if grad is None:
        if loss.size != 1:
            raise GradientError(
                f"backward requires a scalar loss, got shape {loss.shape}"
            )
        if not np.all(np.isfinite(loss.data)):
            raise GradientError("backward called on a non-finite loss")
        grad = np.ones_like(loss.data)
    else:
        grad = np.asarray(grad, dtype=DTYPE)
        if grad.shape != loss.data.shape:
            raise GradientError("seed gradient shape does not match the loss")

    order = _topo_order(loss)
    for t in order:
        t.grad = None
        for inp in t.node.inputs:
            inp.grad = None
    loss.grad = grad

    for t in reversed(order):
        g = t.grad
        if g is None:
            continue
        grads = t.node.fn(g)
        for inp, gi in zip(t.node.inputs, grads):
            if gi is None or not _tracked(inp):
                continue
            if _debug_checks:
                _assert_finite(gi, t.node.op)
            inp.grad = gi if inp.grad is None else inp.grad + gi


# ---------------------------------------------------------------------------
# elementwise / reduction ops

def _require_same_shape(op, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def relu(t):
    return custom_op("relu", (t,), np.maximum(t.data, DTYPE(0)),
                     lambda g: (g * (t.data > 0),))


def add(a, b):
    _require_same_shape("add", a, b)
    return custom_op("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b):
    _require_same_shape("sub", a, b)
    return custom_op("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b):
    _require_same_shape("mul", a, b)
    return custom_op("mul", (a, b), a.data * b.data,
                     lambda g: (g * b.data, g * a.data))


def mul_scalar(t, s):
    s = DTYPE(s)
    return custom_op("mul_scalar", (t,), t.data * s, lambda g: (g * s,))


def add_scalar(t, s):
    return custom_op("add_scalar", (t,), t.data + DTYPE(s), lambda g: (g,))


def square(t):
    return custom_op("square", (t,), t.data * t.data,
                     lambda g: (g * (2 * t.data),))


def sum(t):  # noqa: A001 - deliberate numpy-style name
    out = np.asarray(t.data.sum(), dtype=DTYPE)
    return custom_op("sum", (t,), out,
                     lambda g: (np.full(t.data.shape, g, dtype=DTYPE),))


def mean(t):
    inv = DTYPE(1.0 / t.data.size)
    out = np.asarray(t.data.sum() * inv, dtype=DTYPE)
    return custom_op("mean", (t,), out,
                     lambda g: (np.full(t.data.shape, g * inv, dtype=DTYPE),))


def add_bias(x, b):
    """Add a per-channel bias to an NCHW tensor."""
    if x.data.ndim != 4 or b.data.ndim != 1 or b.data.shape[0] != x.data.shape[1]:
        raise ShapeError(
            f"add_bias: need NCHW input and ({x.data.shape[1]},) bias, "
            f"got {x.data.shape} and {b.data.shape}"
        )
    out = x.data + b.data.reshape(1, -1, 1, 1)
    return custom_op("add_bias", (x, b), out,
                     lambda g: (g, g.sum(axis=(0, 2, 3))))


def slice_channels(t, start, stop):
    """Take channels [start, stop) of an NCHW tensor."""
    if t.data.ndim != 4 or not (0 <= start < stop <= t.data.shape[1]):
        raise ShapeError(
            f"slice_channels: bad range [{start}, {stop}) for shape {t.data.shape}"
        )

    def bwd(g):
        full = np.zeros_like(t.data)
        full[:, start:stop] = g
        return (full,)

    return custom_op("slice_channels", (t,),
                     np.ascontiguousarray(t.data[:, start:stop]), bwd)


def stop_gradient(t):
    """Identity forward, zero gradient backward.

    Shares the input buffer, so the forward value is bit-identical; the output
    carries no tape node, which prunes the whole subtree from backward.
    """
    out = Tensor.__new__(Tensor)
    out.data = t.data
    out.grad = None
    out.requires_grad = False
    out.node = None
    return out


# ---------------------------------------------------------------------------
# spatial ops

def _im2col(xp, kh, kw, stride):
    # (B, C, Hp, Wp) -> (B*Ho*Wo, C*kh*kw); rows ordered b-major, raster minor
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = windows.shape[:4]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(b * ho * wo, c * kh * kw), ho, wo


def _col2im(cols, b, c, hp, wp, kh, kw, stride, ho, wo, crop):
    # scatter in channels-last order (contiguous inner axis), crop the
    # padding margin, then transpose back to NCHW with a single copy
    blocks = cols.reshape(b, ho, wo, c, kh, kw)
    out = np.zeros((b, hp, wp, c), dtype=DTYPE)
    for i in range(kh):
        si = slice(i, i + stride * (ho - 1) + 1, stride)
        for j in range(kw):
            sj = slice(j, j + stride * (wo - 1) + 1, stride)
            out[:, si, sj, :] += blocks[:, :, :, :, i, j]
    if crop:
        out = out[:, crop:hp - crop, crop:wp - crop, :]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _check_conv_args(op, x, w, stride, padding):
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"{op}: input and kernel must be 4-D, "
                         f"got {x.data.shape} and {w.data.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"{op}: stride must be >= 1 and padding >= 0")


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x, w, stride=1, padding=0):
    """Cross-correlate an NCHW input with an (out, in, kh, kw) kernel.

    Output spatial size is floor((in + 2*pad - k)/stride) + 1.
    """
    _check_conv_args("conv2d", x, w, stride, padding)
    b, ci, h, wd = x.data.shape
    co, ci_k, kh, kw = w.data.shape
    if ci != ci_k:
        raise ShapeError(f"conv2d: input has {ci} channels but kernel expects {ci_k}")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError(
            f"conv2d: padded input {h + 2 * padding}x{wd + 2 * padding} smaller "
            f"than kernel {kh}x{kw}"
        )

    xp = _pad(x.data, padding)
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wmat = w.data.reshape(co, -1)
    out = (cols @ wmat.T).reshape(b, ho, wo, co).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    need_x, need_w = _tracked(x), _tracked(w)

    def bwd(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, co)
        gw = (g2.T @ cols).reshape(w.data.shape) if need_w else None
        gx = None
        if need_x:
            gx = _col2im(g2 @ wmat, b, ci, h + 2 * padding, wd + 2 * padding,
                         kh, kw, stride, ho, wo, padding)
        return (gx, gw)

    return custom_op("conv2d", (x, w), out, bwd)


def conv2d_transpose(y, w, stride=1, padding=0):
    """Exact adjoint of ``conv2d`` with the same kernel and parameters.

    The kernel keeps the (out, in, kh, kw) layout of its paired forward conv;
    the input carries ``out`` channels and the result ``in`` channels, with
    spatial size (in - 1)*stride - 2*pad + k.
    """
    _check_conv_args("conv2d_transpose", y, w, stride, padding)
    b, co_y, ho, wo = y.data.shape
    co, ci, kh, kw = w.data.shape
    if co_y != co:
        raise ShapeError(
            f"conv2d_transpose: input has {co_y} channels but kernel expects {co}"
        )
    h = (ho - 1) * stride - 2 * padding + kh
    wd = (wo - 1) * stride - 2 * padding + kw
    if h < 1 or wd < 1:
        raise ShapeError("conv2d_transpose: output size would be empty")

    wmat = w.data.reshape(co, -1)
    y2 = np.ascontiguousarray(y.data.transpose(0, 2, 3, 1)).reshape(-1, co)
    out = _col2im(y2 @ wmat, b, ci, h + 2 * padding, wd + 2 * padding,
                  kh, kw, stride, ho, wo, padding)

    need_y, need_w = _tracked(y), _tracked(w)

    def bwd(g):
        cols, _, _ = _im2col(_pad(g, padding), kh, kw, stride)
        gy = gw = None
        if need_y:
            gy = (cols @ wmat.T).reshape(b, ho, wo, co).transpose(0, 3, 1, 2)
            gy = np.ascontiguousarray(gy)
        if need_w:
            gw = (y2.T @ cols).reshape(w.data.shape)
        return (gy, gw)

    return custom_op("conv2d_transpose", (y, w), out, bwd)


def gather_rows(table, indices):
    """Look rows of a (K, D) table up by an integer (B, H, W) grid.

    Returns a (B, D, H, W) tensor; backward scatter-adds into the table.
    """
    if table.data.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-D, got {table.data.shape}")
    idx = np.asarray(indices)
    if idx.ndim != 3:
        raise ShapeError(f"gather_rows: indices must be 3-D, got {idx.shape}")
    k, d = table.data.shape
    if idx.size and (idx.min() < 0 or idx.max() >= k):
        raise ShapeError(f"gather_rows: index out of range for table of {k} rows")
    out = np.ascontiguousarray(table.data[idx].transpose(0, 3, 1, 2))

    def bwd(g):
        flat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, d)
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), flat)
        return (gt,)

    return custom_op("gather_rows", (table,), out, bwd)


def cross_entropy_logits(logits, indices):
    """Summed categorical cross-entropy of (B, K, H, W) logits, in nats.

    ``indices`` is an integer (B, H, W) array of true classes; the backward
    pass is the usual softmax-minus-one-hot.
    """
    if logits.data.ndim != 4:
        raise ShapeError(f"cross_entropy_logits: logits must be 4-D, "
                         f"got {logits.data.shape}")
    idx = np.asarray(indices)
    b, k, h, w = logits.data.shape
    if idx.shape != (b, h, w):
        raise ShapeError(f"cross_entropy_logits: indices shape {idx.shape} does "
                         f"not match logits {logits.data.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= k):
        raise ShapeError("cross_entropy_logits: class index out of range")

    m = logits.data.max(axis=1, keepdims=True)
    ez = np.exp(logits.data - m)
    zsum = ez.sum(axis=1, keepdims=True)
    lse = m + np.log(zsum)
    taken = np.take_along_axis(logits.data, idx[:, None], axis=1)
    out = np.asarray((lse - taken).sum(dtype=np.float64), dtype=DTYPE)

    def bwd(g):
        p = ez / zsum
        np.put_along_axis(p, idx[:, None],
                          np.take_along_axis(p, idx[:, None], axis=1) - 1, axis=1)
        return (p * g,)

    return custom_op("cross_entropy_logits", (logits,), out, bwd)


def _sigmoid(u):
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    eu = np.exp(u[~pos])
    out[~pos] = eu / (1.0 + eu)
    return out


def discretized_logistic_nll(mu, log_s, x, bin_width=1.0 / 255.0):
    """Summed NLL of values quantized into ``bin_width`` bins, in nats.

    Each value is scored by the logistic CDF mass of its bin; the lowest and
    highest bins absorb the open tails. Differentiable in ``mu`` and
    ``log_s``; ``x`` is plain data.
    """
    xv = np.asarray(x, dtype=DTYPE)
    if mu.data.shape != xv.shape or log_s.data.shape != xv.shape:
        raise ShapeError(
            f"discretized_logistic_nll: shapes differ "
            f"{mu.data.shape} / {log_s.data.shape} / {xv.shape}"
        )
    half = DTYPE(bin_width / 2.0)
    lo_bin = xv < (-0.5 + bin_width / 4)
    hi_bin = xv > (0.5 - bin_width / 4)
    s = np.exp(log_s.data)
    u_hi = (xv - mu.data + half) / s
    u_lo = (xv - mu.data - half) / s
    c_hi = _sigmoid(u_hi)
    c_lo = _sigmoid(u_lo)
    raw = np.where(lo_bin, c_hi, np.where(hi_bin, 1.0 - c_lo, c_hi - c_lo))
    tiny = DTYPE(1e-12)
    p = np.maximum(raw, tiny)
    out = np.asarray(-np.log(p).sum(dtype=np.float64), dtype=DTYPE)

    def bwd(g):
        d_hi = c_hi * (1 - c_hi)
        d_lo = c_lo * (1 - c_lo)
        dp_dmu = np.where(lo_bin, -d_hi,
                          np.where(hi_bin, d_lo, d_lo - d_hi)) / s
        dp_dls = np.where(lo_bin, -d_hi * u_hi,
                          np.where(hi_bin, d_lo * u_lo,
                                   d_lo * u_lo - d_hi * u_hi))
        scale = np.where(raw > tiny, -g / p, DTYPE(0))
        return (scale * dp_dmu, scale * dp_dls)

    return custom_op("discretized_logistic_nll", (mu, log_s), out, bwd)
