"""Timing harness comparing the numba and numpy kernel backends.

Shapes mirror the default model: 64 encoder channels, 32 bottleneck,
64 hidden, kernel 3 depthwise convs, ~1 s of 8 kHz audio (999 frames).
"""

import time

import numpy as np

from . import numpy_backend

try:
    from . import numba_backend
except ImportError:
    numba_backend = None


def _time(fn, args, repeats):
    fn(*args)  # warm up (and JIT-compile for numba)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best * 1000.0


def _cases(T=999, rng=None):
    rng = rng or np.random.default_rng(0)
    f32 = np.float32
    x_wave = rng.standard_normal((1, T * 8 + 8)).astype(f32)
    w_enc = rng.standard_normal((64, 1, 16)).astype(f32)
    x_bneck = rng.standard_normal((32, T)).astype(f32)
    w_in = rng.standard_normal((64, 32, 1)).astype(f32)
    x_hid = rng.standard_normal((64, T)).astype(f32)
    w_dw = rng.standard_normal((64, 3)).astype(f32)
    g = np.ones(64, f32)
    b64 = np.zeros(64, f32)
    w_dec = rng.standard_normal((64, 1, 16)).astype(f32)
    gy_hid = rng.standard_normal((64, T)).astype(f32)
    cases = {
        "conv1d_fwd_encoder": ("conv1d_fwd", (x_wave, w_enc, np.zeros(64, f32), 1, 8, 0)),
        "conv1d_fwd_1x1": ("conv1d_fwd", (x_bneck, w_in, b64, 1, 1, 0)),
        "conv1d_bwd_1x1": ("conv1d_bwd", (x_bneck, w_in, gy_hid, 1, 1, 0)),
        "dwconv1d_fwd": ("dwconv1d_fwd", (x_hid, w_dw, b64, 4, 8)),
        "dwconv1d_bwd": ("dwconv1d_bwd", (x_hid, w_dw, gy_hid, 4, 8)),
        "convT1d_fwd": ("convT1d_fwd", (x_hid, w_dec, 8)),
        "cln_fwd": ("cln_fwd", (x_hid, g, b64, 1e-8)),
    }
    y, mu, var = numpy_backend.cln_fwd(x_hid, g, b64, 1e-8)
    cases["cln_bwd"] = ("cln_bwd", (x_hid, g, mu, var, gy_hid, 1e-8))
    return cases


def run(repeats=5, frames=999):
    """Returns {case: {"numpy_ms": .., "numba_ms": .., "speedup": ..}}."""
    out = {}
    for case, (fname, args) in _cases(frames).items():
        row = {"numpy_ms": _time(getattr(numpy_backend, fname), args, repeats)}
        if numba_backend is not None:
            row["numba_ms"] = _time(getattr(numba_backend, fname), args, repeats)
            row["speedup"] = row["numpy_ms"] / row["numba_ms"] if row["numba_ms"] else None
        out[case] = row
    return out


def format_table(results):
    lines = [f"{'kernel':26s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}"]
    for case, row in results.items():
        nb = row.get("numba_ms")
        sp = row.get("speedup")
        lines.append(
            f"{case:26s} {row['numpy_ms']:10.3f} "
            f"{nb:10.3f} {sp:8.2f}" if nb is not None
            else f"{case:26s} {row['numpy_ms']:10.3f} {'n/a':>10s} {'n/a':>8s}"
        )
    return "\n".join(lines)
