"""Pure-numpy kernels.

Reference implementations of the convolution and cumulative-norm kernels.
Every kernel accumulates in float64 and rounds once to float32 on the way
out, so the numba twins in numba_backend.py produce results within one
float32 ulp of these.

Array layouts:
    x  (C_in, T)      float32
    w  (C_out, C_in, K) float32   dense conv
    w  (C, K)         float32     depthwise conv
    w  (C_in, C_out, K) float32   transposed conv
    b  (C_out,)       float32     always present; callers pass zeros for "no bias"
"""

import numpy as np

F32 = np.float32
F64 = np.float64


def _out_len(T, K, dilation, stride, pad_left):
    keff = (K - 1) * dilation + 1
    return (T + pad_left - keff) // stride + 1


def conv1d_fwd(x, w, b, dilation, stride, pad_left):
    cout, cin, K = w.shape
    T = x.shape[1]
    tout = _out_len(T, K, dilation, stride, pad_left)
    x64 = x.astype(F64)
    if pad_left:
        x64 = np.concatenate([np.zeros((cin, pad_left), F64), x64], axis=1)
    w64 = w.astype(F64)
    acc = np.zeros((cout, tout), F64)
    span = (tout - 1) * stride + 1
    for k in range(K):
        acc += w64[:, :, k] @ x64[:, k * dilation : k * dilation + span : stride]
    acc += b.astype(F64)[:, None]
    return acc.astype(F32)


def conv1d_bwd(x, w, gy, dilation, stride, pad_left):
    cout, cin, K = w.shape
    T = x.shape[1]
    x64 = x.astype(F64)
    if pad_left:
        x64 = np.concatenate([np.zeros((cin, pad_left), F64), x64], axis=1)
    w64 = w.astype(F64)
    gy64 = gy.astype(F64)
    tout = gy.shape[1]
    span = (tout - 1) * stride + 1
    gxp = np.zeros_like(x64)
    gw = np.zeros((cout, cin, K), F64)
    for k in range(K):
        sl = slice(k * dilation, k * dilation + span, stride)
        gw[:, :, k] = gy64 @ x64[:, sl].T
        gxp[:, sl] += w64[:, :, k].T @ gy64
    gb = gy64.sum(axis=1)
    gx = gxp[:, pad_left:] if pad_left else gxp
    return gx.astype(F32), gw.astype(F32), gb.astype(F32)


def dwconv1d_fwd(x, w, b, dilation, pad_left):
    # depthwise: one length-K filter per channel, stride 1
    C, K = w.shape
    T = x.shape[1]
    tout = _out_len(T, K, dilation, 1, pad_left)
    x64 = x.astype(F64)
    if pad_left:
        x64 = np.concatenate([np.zeros((C, pad_left), F64), x64], axis=1)
    w64 = w.astype(F64)
    acc = np.zeros((C, tout), F64)
    for k in range(K):
        acc += w64[:, k : k + 1] * x64[:, k * dilation : k * dilation + tout]
    acc += b.astype(F64)[:, None]
    return acc.astype(F32)


def dwconv1d_bwd(x, w, gy, dilation, pad_left):
    C, K = w.shape
    x64 = x.astype(F64)
    if pad_left:
        x64 = np.concatenate([np.zeros((C, pad_left), F64), x64], axis=1)
    w64 = w.astype(F64)
    gy64 = gy.astype(F64)
    tout = gy.shape[1]
    gxp = np.zeros_like(x64)
    gw = np.zeros((C, K), F64)
    for k in range(K):
        sl = slice(k * dilation, k * dilation + tout)
        gw[:, k] = (gy64 * x64[:, sl]).sum(axis=1)
        gxp[:, sl] += w64[:, k : k + 1] * gy64
    gb = gy64.sum(axis=1)
    gx = gxp[:, pad_left:] if pad_left else gxp
    return gx.astype(F32), gw.astype(F32), gb.astype(F32)


def convT1d_fwd(x, w, stride):
    cin, cout, K = w.shape
    T = x.shape[1]
    twave = (T - 1) * stride + K
    x64 = x.astype(F64)
    w64 = w.astype(F64)
    acc = np.zeros((cout, twave), F64)
    span = (T - 1) * stride + 1
    for k in range(K):
        acc[:, k : k + span : stride] += w64[:, :, k].T @ x64
    return acc.astype(F32)


def convT1d_bwd(x, w, gy, stride):
    cin, cout, K = w.shape
    T = x.shape[1]
    x64 = x.astype(F64)
    w64 = w.astype(F64)
    gy64 = gy.astype(F64)
    gx = np.zeros((cin, T), F64)
    gw = np.zeros((cin, cout, K), F64)
    span = (T - 1) * stride + 1
    for k in range(K):
        gsl = gy64[:, k : k + span : stride]
        gx += w64[:, :, k] @ gsl
        gw[:, :, k] = x64 @ gsl.T
    return gx.astype(F32), gw.astype(F32)


def cln_fwd(x, g, b, eps):
    """Cumulative layer norm: stats over all channels and frames 1..t.

    Returns (y, mu, var); mu and var are float64 per-frame stats kept for
    the backward pass and for streaming-state cross-checks.
    """
    C, T = x.shape
    x64 = x.astype(F64)
    s1 = np.cumsum(x64.sum(axis=0))
    s2 = np.cumsum((x64 * x64).sum(axis=0))
    n = C * np.arange(1, T + 1, dtype=F64)
    mu = s1 / n
    var = np.maximum(s2 / n - mu * mu, 0.0)
    s = np.sqrt(var + eps)
    y = g.astype(F64)[:, None] * (x64 - mu) / s + b.astype(F64)[:, None]
    return y.astype(F32), mu, var


def cln_bwd(x, g, mu, var, gy, eps):
    C, T = x.shape
    x64 = x.astype(F64)
    g64 = g.astype(F64)
    gy64 = gy.astype(F64)
    s = np.sqrt(var + eps)
    xhat = (x64 - mu) / s
    gg = (gy64 * xhat).sum(axis=1)
    gb = gy64.sum(axis=1)
    # frame t's stats depend on x[:, :t+1], so each input column collects
    # suffix sums of the per-frame mean/variance sensitivities
    A = (gy64 * g64[:, None]).sum(axis=0)
    B = (gy64 * g64[:, None] * xhat).sum(axis=0)
    n = C * np.arange(1, T + 1, dtype=F64)
    v = var + eps
    P = np.cumsum((A / (n * s))[::-1])[::-1]
    Q = np.cumsum((B / (n * v))[::-1])[::-1]
    R = np.cumsum((B * mu / (n * v))[::-1])[::-1]
    gx = g64[:, None] * gy64 / s - P - x64 * Q + R
    return gx.astype(F32), gg.astype(F32), gb.astype(F32)
