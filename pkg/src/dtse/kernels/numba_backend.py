"""Numba-jitted kernels.

Loop-level mirrors of numpy_backend with the same float64-accumulate /
float32-round contract. No fastmath, no parallel: results must be
deterministic and bit-stable run to run.
"""

import numpy as np
from numba import njit

F32 = np.float32


@njit(cache=True)
def conv1d_fwd(x, w, b, dilation, stride, pad_left):
    cout, cin, K = w.shape
    T = x.shape[1]
    keff = (K - 1) * dilation + 1
    tout = (T + pad_left - keff) // stride + 1
    y = np.empty((cout, tout), F32)
    for o in range(cout):
        for t in range(tout):
            acc = np.float64(b[o])
            base = t * stride - pad_left
            for k in range(K):
                src = base + k * dilation
                if 0 <= src < T:
                    for i in range(cin):
                        acc += np.float64(w[o, i, k]) * np.float64(x[i, src])
            y[o, t] = acc
    return y


@njit(cache=True)
def conv1d_bwd(x, w, gy, dilation, stride, pad_left):
    cout, cin, K = w.shape
    T = x.shape[1]
    tout = gy.shape[1]
    gx64 = np.zeros((cin, T), np.float64)
    gw64 = np.zeros((cout, cin, K), np.float64)
    gb64 = np.zeros(cout, np.float64)
    for o in range(cout):
        for t in range(tout):
            gyv = np.float64(gy[o, t])
            gb64[o] += gyv
            base = t * stride - pad_left
            for k in range(K):
                src = base + k * dilation
                if 0 <= src < T:
                    for i in range(cin):
                        gw64[o, i, k] += gyv * np.float64(x[i, src])
                        gx64[i, src] += gyv * np.float64(w[o, i, k])
    return gx64.astype(F32), gw64.astype(F32), gb64.astype(F32)


@njit(cache=True)
def dwconv1d_fwd(x, w, b, dilation, pad_left):
    C, K = w.shape
    T = x.shape[1]
    keff = (K - 1) * dilation + 1
    tout = T + pad_left - keff + 1
    y = np.empty((C, tout), F32)
    for c in range(C):
        for t in range(tout):
            acc = np.float64(b[c])
            base = t - pad_left
            for k in range(K):
                src = base + k * dilation
                if 0 <= src < T:
                    acc += np.float64(w[c, k]) * np.float64(x[c, src])
            y[c, t] = acc
    return y


@njit(cache=True)
def dwconv1d_bwd(x, w, gy, dilation, pad_left):
    C, K = w.shape
    T = x.shape[1]
    tout = gy.shape[1]
    gx64 = np.zeros((C, T), np.float64)
    gw64 = np.zeros((C, K), np.float64)
    gb64 = np.zeros(C, np.float64)
    for c in range(C):
        for t in range(tout):
            gyv = np.float64(gy[c, t])
            gb64[c] += gyv
            base = t - pad_left
            for k in range(K):
                src = base + k * dilation
                if 0 <= src < T:
                    gw64[c, k] += gyv * np.float64(x[c, src])
                    gx64[c, src] += gyv * np.float64(w[c, k])
    return gx64.astype(F32), gw64.astype(F32), gb64.astype(F32)


@njit(cache=True)
def convT1d_fwd(x, w, stride):
    cin, cout, K = w.shape
    T = x.shape[1]
    twave = (T - 1) * stride + K
    acc = np.zeros((cout, twave), np.float64)
    for t in range(T):
        base = t * stride
        for o in range(cout):
            for k in range(K):
                s = 0.0
                for i in range(cin):
                    s += np.float64(w[i, o, k]) * np.float64(x[i, t])
                acc[o, base + k] += s
    return acc.astype(F32)


@njit(cache=True)
def convT1d_bwd(x, w, gy, stride):
    cin, cout, K = w.shape
    T = x.shape[1]
    gx64 = np.zeros((cin, T), np.float64)
    gw64 = np.zeros((cin, cout, K), np.float64)
    for t in range(T):
        base = t * stride
        for o in range(cout):
            for k in range(K):
                gyv = np.float64(gy[o, base + k])
                for i in range(cin):
                    gx64[i, t] += gyv * np.float64(w[i, o, k])
                    gw64[i, o, k] += gyv * np.float64(x[i, t])
    return gx64.astype(F32), gw64.astype(F32)


@njit(cache=True)
def cln_fwd(x, g, b, eps):
    C, T = x.shape
    y = np.empty((C, T), F32)
    mu = np.empty(T, np.float64)
    var = np.empty(T, np.float64)
    s1 = 0.0
    s2 = 0.0
    for t in range(T):
        for c in range(C):
            v = np.float64(x[c, t])
            s1 += v
            s2 += v * v
        n = np.float64(C * (t + 1))
        m = s1 / n
        va = s2 / n - m * m
        if va < 0.0:
            va = 0.0
        mu[t] = m
        var[t] = va
        s = np.sqrt(va + eps)
        for c in range(C):
            y[c, t] = np.float64(g[c]) * (np.float64(x[c, t]) - m) / s + np.float64(b[c])
    return y, mu, var


@njit(cache=True)
def cln_bwd(x, g, mu, var, gy, eps):
    C, T = x.shape
    gx = np.empty((C, T), F32)
    gg64 = np.zeros(C, np.float64)
    gb64 = np.zeros(C, np.float64)
    A = np.empty(T, np.float64)
    B = np.empty(T, np.float64)
    for t in range(T):
        s = np.sqrt(var[t] + eps)
        a = 0.0
        bb = 0.0
        for c in range(C):
            gyv = np.float64(gy[c, t])
            xh = (np.float64(x[c, t]) - mu[t]) / s
            gg64[c] += gyv * xh
            gb64[c] += gyv
            a += gyv * np.float64(g[c])
            bb += gyv * np.float64(g[c]) * xh
        A[t] = a
        B[t] = bb
    P = 0.0
    Q = 0.0
    R = 0.0
    for t in range(T - 1, -1, -1):
        n = np.float64(C * (t + 1))
        v = var[t] + eps
        s = np.sqrt(v)
        P += A[t] / (n * s)
        Q += B[t] / (n * v)
        R += B[t] * mu[t] / (n * v)
        for c in range(C):
            gx[c, t] = np.float64(g[c]) * np.float64(gy[c, t]) / s - P - np.float64(x[c, t]) * Q + R
    return gx, gg64.astype(F32), gb64.astype(F32)
