"""Tensors, a define-by-run tape, and the differentiable op set.

A Tensor is a float32 ndarray plus a name and a trainable flag. Ops run
eagerly; while a Graph is active (see record()) each op also appends a
node carrying a backward closure. backward() replays the tape in reverse
and returns gradients for named trainable leaves.

Convolution padding rule: stride == 1 means causal left padding of
(K - 1) * dilation zeros, stride > 1 means no padding (valid framing, as
in the encoder front end).
"""

import math
from contextlib import contextmanager

import numpy as np

from . import kernels

F32 = np.float32
EPS = 1e-8


class Tensor:
    """float32 array with an optional name, trainable flag and gradient."""

    __slots__ = ("data", "grad", "name", "trainable", "_node")

    def __init__(self, data, name=None, trainable=False):
        # asarray with order="C" keeps 0-d losses 0-d (ascontiguousarray
        # would promote them to shape (1,))
        arr = np.asarray(data, dtype=F32, order="C")
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if arr.ndim > 3:
            raise ValueError(f"tensor rank {arr.ndim} > 3 not supported")
        self.data = arr
        self.grad = None
        self.name = name
        self.trainable = bool(trainable)
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, trainable={self.trainable})"

    def copy(self):
        t = Tensor(self.data.copy(), name=self.name, trainable=self.trainable)
        return t


class _Node:
    __slots__ = ("parents", "out", "bwd")

    def __init__(self, parents, out, bwd):
        self.parents = parents
        self.out = out
        self.bwd = bwd


class Graph:
    """Ordered record of ops from one forward pass."""

    def __init__(self):
        self.nodes = []

    def _add(self, parents, out, bwd):
        out._node = (self, len(self.nodes))
        self.nodes.append(_Node(parents, out, bwd))


_active = None


@contextmanager
def record(graph=None):
    """Route ops onto a tape. Yields the Graph being written."""
    global _active
    g = Graph() if graph is None else graph
    prev = _active
    _active = g
    try:
        yield g
    finally:
        _active = prev


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(out_data, parents, bwd):
    out = Tensor(out_data)
    if _active is not None:
        _active._add(parents, out, bwd)
    return out


def backward(graph, loss):
    """Reverse-accumulate d(loss)/d(leaf) for trainable named leaves.

    loss must be a scalar produced on this graph. Returns {name: Tensor};
    frozen or unnamed leaves are skipped (their .grad stays None).
    """
    if not isinstance(loss, Tensor):
        raise TypeError("loss must be a Tensor")
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    if loss._node is None or loss._node[0] is not graph:
        raise ValueError("loss tensor was not produced on this graph")
    start = loss._node[1]
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes[: start + 1]):
        gy = grads.pop(id(node.out), None)
        if gy is None:
            continue
        for parent, gp in zip(node.parents, node.bwd(gy)):
            if gp is None:
                continue
            buf = grads.get(id(parent))
            if buf is None:
                # always copy: an op's backward may hand the same array
                # object to several parents (add returns gy twice), and
                # accumulating in place into an aliased buffer would
                # corrupt the siblings
                grads[id(parent)] = np.array(gp, dtype=F32, order="C")
            else:
                buf += gp
        # leaves keep their buffers; interior outputs were popped above
    out = {}
    for node in graph.nodes[: start + 1]:
        for parent in node.parents:
            if parent._node is not None and parent._node[0] is graph:
                continue
            buf = grads.get(id(parent))
            if buf is None:
                continue
            if parent.trainable and parent.name:
                if parent.name not in out:
                    parent.grad = Tensor(buf)
                    out[parent.name] = parent.grad
    return out


# ---------------------------------------------------------------------------
# convolution ops


def conv1d_causal(x, w, b=None, dilation=1, stride=1):
    """1-D convolution, causal-padded when stride == 1, valid otherwise."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 3:
        raise ValueError(f"conv1d_causal expects x (C,T) and w (O,C,K), got {x.shape} {w.shape}")
    cout, cin, K = w.shape
    if x.shape[0] != cin:
        raise ValueError(f"conv1d_causal channel mismatch: x has {x.shape[0]}, w expects {cin}")
    if dilation < 1 or stride < 1:
        raise ValueError("dilation and stride must be >= 1")
    pad = (K - 1) * dilation if stride == 1 else 0
    keff = (K - 1) * dilation + 1
    if x.shape[1] + pad < keff:
        raise ValueError(f"input length {x.shape[1]} shorter than kernel span {keff}")
    bt = _as_tensor(b) if b is not None else None
    barr = bt.data if bt is not None else np.zeros(cout, F32)
    y = kernels.conv1d_fwd(x.data, w.data, barr, dilation, stride, pad)
    xd, wd = x.data, w.data
    parents = (x, w) if bt is None else (x, w, bt)

    def bwd(gy):
        gx, gw, gb = kernels.conv1d_bwd(xd, wd, gy, dilation, stride, pad)
        return (gx, gw) if bt is None else (gx, gw, gb)

    return _emit(y, parents, bwd)


def depthwise_conv1d_causal(x, w, b=None, dilation=1):
    """Per-channel causal convolution (the D-conv inside each TCN block)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ValueError(f"depthwise conv expects x (C,T) and w (C,K), got {x.shape} {w.shape}")
    C, K = w.shape
    if x.shape[0] != C:
        raise ValueError(f"depthwise conv channel mismatch: x has {x.shape[0]}, w has {C}")
    pad = (K - 1) * dilation
    bt = _as_tensor(b) if b is not None else None
    barr = bt.data if bt is not None else np.zeros(C, F32)
    y = kernels.dwconv1d_fwd(x.data, w.data, barr, dilation, pad)
    xd, wd = x.data, w.data
    parents = (x, w) if bt is None else (x, w, bt)

    def bwd(gy):
        gx, gw, gb = kernels.dwconv1d_bwd(xd, wd, gy, dilation, pad)
        return (gx, gw) if bt is None else (gx, gw, gb)

    return _emit(y, parents, bwd)


def conv_transpose1d(x, w, stride):
    """Transposed convolution; output length (T-1)*stride + K."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 3:
        raise ValueError(f"conv_transpose1d expects x (C,T) and w (C,O,K), got {x.shape} {w.shape}")
    cin, cout, K = w.shape
    if x.shape[0] != cin:
        raise ValueError(f"conv_transpose1d channel mismatch: x has {x.shape[0]}, w expects {cin}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    y = kernels.convT1d_fwd(x.data, w.data, stride)
    xd, wd = x.data, w.data

    def bwd(gy):
        gx, gw = kernels.convT1d_bwd(xd, wd, gy, stride)
        return gx, gw

    return _emit(y, (x, w), bwd)


def cumulative_layer_norm(x, gain, bias, eps=EPS):
    """Causal normalization: stats over all channels and frames 1..t."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if x.data.ndim != 2:
        raise ValueError(f"cumulative_layer_norm expects (C,T), got {x.shape}")
    C = x.shape[0]
    if gain.shape != (C,) or bias.shape != (C,):
        raise ValueError(f"gain/bias must be ({C},), got {gain.shape} {bias.shape}")
    y, mu, var = kernels.cln_fwd(x.data, gain.data, bias.data, eps)
    xd, gd = x.data, gain.data

    def bwd(gy):
        return kernels.cln_bwd(xd, gd, mu, var, gy, eps)

    return _emit(y, (x, gain, bias), bwd)


# ---------------------------------------------------------------------------
# pointwise ops


def relu(x):
    x = _as_tensor(x)
    y = np.maximum(x.data, 0)
    mask = x.data > 0

    def bwd(gy):
        return (gy * mask,)

    return _emit(y, (x,), bwd)


def prelu(x, alpha):
    """max(x,0) + alpha*min(x,0) with a per-channel slope."""
    x, alpha = _as_tensor(x), _as_tensor(alpha)
    if x.data.ndim != 2 or alpha.shape != (x.shape[0],):
        raise ValueError(f"prelu expects x (C,T) and alpha (C,), got {x.shape} {alpha.shape}")
    neg = x.data < 0
    a = alpha.data[:, None]
    y = np.where(neg, a * x.data, x.data)
    xd = x.data

    def bwd(gy):
        gx = np.where(neg, a * gy, gy)
        ga = (gy * xd * neg).sum(axis=1)
        return gx, ga

    return _emit(y, (x, alpha), bwd)


def sigmoid(x):
    x = _as_tensor(x)
    y = 1.0 / (1.0 + np.exp(-x.data.astype(np.float64)))
    y32 = y.astype(F32)

    def bwd(gy):
        return ((gy * (y * (1.0 - y))).astype(F32),)

    return _emit(y32, (x,), bwd)


def pointwise(x, kind, alpha=None):
    """Dispatcher over the supported activations."""
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "prelu":
        if alpha is None:
            raise ValueError("prelu needs an alpha tensor")
        return prelu(x, alpha)
    raise ValueError(f"unknown pointwise kind {kind!r}")


# ---------------------------------------------------------------------------
# structural / arithmetic ops


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    y = a.data + b.data

    def bwd(gy):
        return gy, gy

    return _emit(y, (a, b), bwd)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    y = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(gy):
        return gy * bd, gy * ad

    return _emit(y, (a, b), bwd)


def scale(x, c):
    x = _as_tensor(x)
    c = float(c)
    y = x.data * F32(c)

    def bwd(gy):
        return (gy * F32(c),)

    return _emit(y, (x,), bwd)


def scale_channels(x, v):
    """Multiply every frame of x (C,T) by the channel vector v (C,)."""
    x, v = _as_tensor(x), _as_tensor(v)
    if x.data.ndim != 2 or v.shape != (x.shape[0],):
        raise ValueError(f"scale_channels expects x (C,T) and v (C,), got {x.shape} {v.shape}")
    y = x.data * v.data[:, None]
    xd, vd = x.data, v.data

    def bwd(gy):
        return gy * vd[:, None], (gy * xd).sum(axis=1)

    return _emit(y, (x, v), bwd)


def concat_channels(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"concat_channels needs matching frame counts, got {a.shape} {b.shape}")
    y = np.concatenate([a.data, b.data], axis=0)
    ca = a.shape[0]

    def bwd(gy):
        return gy[:ca], gy[ca:]

    return _emit(y, (a, b), bwd)


def repeat_frames(v, T):
    """Broadcast a channel vector (C,) to (C,T)."""
    v = _as_tensor(v)
    if v.data.ndim != 1:
        raise ValueError(f"repeat_frames expects (C,), got {v.shape}")
    y = np.repeat(v.data[:, None], T, axis=1)

    def bwd(gy):
        return (gy.sum(axis=1),)

    return _emit(y, (v,), bwd)


def mean_frames(x):
    """Average over frames: (C,T) -> (C,)."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ValueError(f"mean_frames expects (C,T), got {x.shape}")
    T = x.shape[1]
    y = (x.data.astype(np.float64).sum(axis=1) / T).astype(F32)

    def bwd(gy):
        return (np.repeat((gy / F32(T))[:, None], T, axis=1),)

    return _emit(y, (x,), bwd)


def transpose2d(x):
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ValueError(f"transpose2d expects rank 2, got {x.shape}")
    y = np.ascontiguousarray(x.data.T)

    def bwd(gy):
        return (np.ascontiguousarray(gy.T),)

    return _emit(y, (x,), bwd)


def reshape(x, shape):
    x = _as_tensor(x)
    y = x.data.reshape(shape)
    old = x.data.shape

    def bwd(gy):
        return (gy.reshape(old),)

    return _emit(y, (x,), bwd)


def sum_all(x):
    x = _as_tensor(x)
    y = np.asarray(x.data.astype(np.float64).sum(), dtype=F32)
    shp = x.data.shape

    def bwd(gy):
        return (np.full(shp, gy, dtype=F32),)

    return _emit(y, (x,), bwd)


# ---------------------------------------------------------------------------
# fused losses (scalar outputs, analytic backwards)

_LN10 = math.log(10.0)


def snr_loss(est, ref, eps=EPS, clamp_db=60.0):
    """Negative SNR in dB: -10*log10(||ref||^2 / (||ref-est||^2 + eps)).

    ref is a constant (no gradient). The value is clamped to +/- clamp_db;
    inside the clamp the gradient w.r.t. est is analytic, at the clamp it
    is zero.
    """
    est, ref = _as_tensor(est), _as_tensor(ref)
    if est.shape != ref.shape:
        raise ValueError(f"snr_loss shape mismatch: {est.shape} vs {ref.shape}")
    e = est.data.astype(np.float64)
    r = ref.data.astype(np.float64)
    pr = float(np.dot(r.ravel(), r.ravel()))
    if pr == 0.0:
        raise ValueError("snr_loss: reference signal is identically zero")
    diff = e - r
    pe = float(np.dot(diff.ravel(), diff.ravel())) + eps
    raw = -10.0 / _LN10 * (math.log(pr) - math.log(pe))
    clamped = raw < -clamp_db or raw > clamp_db
    val = min(max(raw, -clamp_db), clamp_db)
    shp = est.data.shape

    def bwd(gy):
        if clamped:
            return np.zeros(shp, F32), None
        g = (20.0 / _LN10) * diff / pe * float(gy)
        return g.astype(F32), None

    return _emit(np.asarray(val, dtype=F32), (est, ref), bwd)


def si_snr_loss(est, ref, eps=EPS, clamp_db=60.0):
    """Negative scale-invariant SNR in dB.

    Both signals are zero-meaned, ref is a constant, est is projected onto
    ref to split a scaled target from a residual. Clamped like snr_loss.
    The regularizer scales with the estimate's energy, which keeps the
    value invariant under est -> g*est for any positive g.
    """
    est, ref = _as_tensor(est), _as_tensor(ref)
    if est.shape != ref.shape:
        raise ValueError(f"si_snr_loss shape mismatch: {est.shape} vs {ref.shape}")
    e = est.data.astype(np.float64).ravel()
    r = ref.data.astype(np.float64).ravel()
    eh = e - e.mean()
    rh = r - r.mean()
    prh = float(np.dot(rh, rh))
    if prh == 0.0:
        raise ValueError("si_snr_loss: reference signal is constant")
    shp = est.data.shape
    peh = float(np.dot(eh, eh))
    if peh == 0.0:
        # constant estimate: no projection at all, pinned at the clamp
        def bwd_flat(gy):
            return np.zeros(shp, F32), None

        return _emit(np.asarray(clamp_db, dtype=F32), (est, ref), bwd_flat)
    alpha = float(np.dot(eh, rh)) / prh
    ps = alpha * alpha * prh + eps * peh
    resid = eh - alpha * rh
    pe = float(np.dot(resid, resid)) + eps * peh
    raw = -10.0 / _LN10 * (math.log(ps) - math.log(pe))
    clamped = raw < -clamp_db or raw > clamp_db
    val = min(max(raw, -clamp_db), clamp_db)

    def bwd(gy):
        if clamped:
            return np.zeros(shp, F32), None
        # d/d(eh) of -10*(log ps - log pe)/ln10 with the eps*|eh|^2 terms
        # kept, then project out the mean
        geh = -10.0 / _LN10 * (
            (2.0 * alpha * rh + 2.0 * eps * eh) / ps
            - (2.0 * resid + 2.0 * eps * eh) / pe
        )
        geh -= geh.mean()
        return (geh * float(gy)).reshape(shp).astype(F32), None

    return _emit(np.asarray(val, dtype=F32), (est, ref), bwd)
