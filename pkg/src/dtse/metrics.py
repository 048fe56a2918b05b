"""Separation quality metrics: SDR, SI-SDR, and a short-time
intelligibility score.

All metrics are plain float64 functions on 1-D arrays. Decibel values
are clamped to +/- 60 dB so degenerate inputs stay finite.

The intelligibility score follows the classic short-time objective
measure: resample to 10 kHz, drop frames 40 dB below the reference peak,
split 256-sample frames into 15 one-third-octave bands from 150 Hz, and
average the clipped, normalized correlation of 384 ms band envelopes.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import resample_poly

CLAMP_DB = 60.0
_EPS = np.finfo(np.float64).eps

# intelligibility analysis constants (10 kHz domain)
_FS = 10000
_FRAME = 256
_HOP = 128
_NFFT = 512
_N_BANDS = 15
_MIN_CF = 150.0
_SEG = 30          # frames per comparison segment (384 ms)
_BETA = -15.0      # lower bound of the per-segment SDR, dB
_DYN_RANGE = 40.0  # silence threshold below reference peak, dB


def _clamp_db(v):
    return float(min(max(v, -CLAMP_DB), CLAMP_DB))


def _check_pair(est, ref, name):
    est = np.asarray(est, np.float64).ravel()
    ref = np.asarray(ref, np.float64).ravel()
    if est.shape != ref.shape:
        raise ValueError(f"{name}: length mismatch {est.shape[0]} vs {ref.shape[0]}")
    if est.size == 0:
        raise ValueError(f"{name}: empty signals")
    return est, ref


def sdr(est, ref, eps=1e-8):
    """Signal-to-distortion ratio in dB (plain energy ratio form)."""
    est, ref = _check_pair(est, ref, "sdr")
    pr = float(np.dot(ref, ref))
    if pr == 0.0:
        raise ValueError("sdr: reference signal is identically zero")
    diff = est - ref
    pe = float(np.dot(diff, diff)) + eps
    return _clamp_db(10.0 * math.log10(pr / pe))


def si_sdr(est, ref, eps=1e-8):
    """Scale-invariant SDR in dB: project est onto the zero-meaned
    reference and compare target energy to residual energy.

    The regularizer scales with the estimate's energy so the score is
    invariant under est -> g*est for any positive g (up to float
    rounding), not just for gains near 1."""
    est, ref = _check_pair(est, ref, "si_sdr")
    eh = est - est.mean()
    rh = ref - ref.mean()
    prh = float(np.dot(rh, rh))
    if prh == 0.0:
        raise ValueError("si_sdr: reference signal is constant")
    peh = float(np.dot(eh, eh))
    if peh == 0.0:
        return -CLAMP_DB  # constant estimate: zero projection
    alpha = float(np.dot(eh, rh)) / prh
    ps = alpha * alpha * prh + eps * peh
    resid = eh - alpha * rh
    pe = float(np.dot(resid, resid)) + eps * peh
    return _clamp_db(10.0 * math.log10(ps / pe))


# ---------------------------------------------------------------------------
# intelligibility


def _resample_10k(x, fs):
    if fs == _FS:
        return x
    if fs not in (8000, 16000):
        raise ValueError(f"unsupported sample rate {fs} (expected 8000, 10000 or 16000)")
    g = math.gcd(_FS, fs)
    return resample_poly(x, _FS // g, fs // g)


def _frame_indices(n):
    starts = range(0, n - _FRAME + 1, _HOP)
    return [slice(s, s + _FRAME) for s in starts]


def _remove_silent_frames(ref, est):
    """Drop frames whose reference energy is 40 dB under the loudest
    frame; rebuild both signals by overlap-adding the kept frames."""
    w = np.hanning(_FRAME + 2)[1:-1]
    slices = _frame_indices(len(ref))
    if not slices:
        return ref[:0], est[:0]
    energies = np.array([20.0 * np.log10(np.linalg.norm(w * ref[s]) + _EPS)
                         for s in slices])
    keep = energies > energies.max() - _DYN_RANGE
    kept = np.flatnonzero(keep)
    if kept.size == 0:
        return ref[:0], est[:0]
    out_len = (kept.size - 1) * _HOP + _FRAME
    r_out = np.zeros(out_len)
    e_out = np.zeros(out_len)
    for j, idx in enumerate(kept):
        s = slices[idx]
        o = slice(j * _HOP, j * _HOP + _FRAME)
        r_out[o] += w * ref[s]
        e_out[o] += w * est[s]
    return r_out, e_out


def _third_octave_matrix():
    freqs = np.linspace(0, _FS / 2, _NFFT // 2 + 1)
    cf = _MIN_CF * 2.0 ** (np.arange(_N_BANDS) / 3.0)
    lo = cf * 2.0 ** (-1.0 / 6.0)
    hi = cf * 2.0 ** (1.0 / 6.0)
    mat = np.zeros((_N_BANDS, freqs.size))
    for j in range(_N_BANDS):
        mat[j] = (freqs >= lo[j]) & (freqs < hi[j])
    return mat


def _band_envelopes(x):
    w = np.hanning(_FRAME + 2)[1:-1]
    slices = _frame_indices(len(x))
    spec = np.array([np.abs(np.fft.rfft(w * x[s], _NFFT)) ** 2 for s in slices])
    return np.sqrt(spec @ _third_octave_matrix().T + _EPS)  # (frames, bands)


def stoi(est, ref, sample_rate):
    """Short-time intelligibility score in roughly (0, 1]."""
    est, ref = _check_pair(est, ref, "stoi")
    if float(np.dot(ref, ref)) == 0.0:
        raise ValueError("stoi: reference signal is identically zero")
    ref10 = _resample_10k(ref, sample_rate)
    est10 = _resample_10k(est, sample_rate)
    ref10, est10 = _remove_silent_frames(ref10, est10)
    X = _band_envelopes(ref10) if len(ref10) >= _FRAME else np.zeros((0, _N_BANDS))
    if X.shape[0] < _SEG:
        raise ValueError(
            "stoi: fewer than 30 active frames after silence removal; signal too short"
        )
    Y = _band_envelopes(est10)
    clip = 10.0 ** (-_BETA / 20.0)
    vals = []
    for m in range(_SEG - 1, X.shape[0]):
        xs = X[m - _SEG + 1 : m + 1]            # (30, bands)
        ys = Y[m - _SEG + 1 : m + 1]
        alpha = np.sqrt((xs * xs).sum(axis=0) / ((ys * ys).sum(axis=0) + _EPS))
        yn = np.minimum(ys * alpha, xs * (1.0 + clip))
        xc = xs - xs.mean(axis=0)
        yc = yn - yn.mean(axis=0)
        num = (xc * yc).sum(axis=0)
        den = np.linalg.norm(xc, axis=0) * np.linalg.norm(yc, axis=0) + _EPS
        vals.append(num / den)
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# combined evaluation


@dataclass
class EvalResult:
    sdr_db: float
    sdr_improvement_db: float
    si_sdr_db: float
    si_sdr_improvement_db: float
    stoi: float

    def to_dict(self):
        return {
            "sdr_db": self.sdr_db,
            "sdr_improvement_db": self.sdr_improvement_db,
            "si_sdr_db": self.si_sdr_db,
            "si_sdr_improvement_db": self.si_sdr_improvement_db,
            "stoi": self.stoi,
        }


def evaluate(est, ref, mix, sample_rate):
    """Score an estimate against the reference, with improvements over
    the unprocessed mixture. Signals are trimmed to the common length."""
    est = np.asarray(est, np.float64).ravel()
    ref = np.asarray(ref, np.float64).ravel()
    mix = np.asarray(mix, np.float64).ravel()
    n = min(len(est), len(ref), len(mix))
    if n == 0:
        raise ValueError("evaluate: empty signals")
    est, ref, mix = est[:n], ref[:n], mix[:n]
    sdr_est = sdr(est, ref)
    sdr_mix = sdr(mix, ref)
    si_est = si_sdr(est, ref)
    si_mix = si_sdr(mix, ref)
    return EvalResult(
        sdr_db=sdr_est,
        sdr_improvement_db=sdr_est - sdr_mix,
        si_sdr_db=si_est,
        si_sdr_improvement_db=si_est - si_mix,
        stoi=stoi(est, ref, sample_rate),
    )


def aggregate(results):
    """Mean and median of each field over a list of EvalResults."""
    if not results:
        raise ValueError("aggregate: no results")
    keys = list(results[0].to_dict())
    cols = {k: np.array([r.to_dict()[k] for r in results]) for k in keys}
    return {
        "mean": {k: float(v.mean()) for k, v in cols.items()},
        "median": {k: float(np.median(v)) for k, v in cols.items()},
    }
