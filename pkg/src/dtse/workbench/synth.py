"""Mixture synthesis and the toy two-speaker corpus.

synthesize_mixture scales an interferer and noise to hit requested SIR
and SNR levels against a target utterance. The toy corpus fakes two
"speakers" as band-limited noise carriers (disjoint passbands) with slow
amplitude modulation, which is enough structure for a small extractor to
learn and for enrollment conditioning to matter.
"""

import math

import numpy as np
from scipy.signal import butter, sosfilt

from ..training import Dataset

F32 = np.float32


def _power(x):
    x = np.asarray(x, np.float64)
    return float(np.dot(x, x)) / max(len(x), 1)


def _gain_for(target_power, other_power, level_db):
    """Gain g so that 10*log10(target_power / (g^2 * other_power)) == level_db."""
    if math.isinf(level_db) and level_db > 0:
        return 0.0
    if other_power == 0.0:
        raise ValueError("cannot set a level against a silent signal")
    return math.sqrt(target_power / (other_power * 10.0 ** (level_db / 10.0)))


def synthesize_mixture(target, interferer, sir_db, snr_db, noise=None, seed=0):
    """Mix target + scaled interferer + scaled noise.

    Returns (mixture, interferer_gain, noise_gain). A level of +inf
    means "leave that source out" (gain 0). When noise is None and a
    finite snr_db is requested, white noise is generated from `seed`.
    """
    target = np.asarray(target, F32).ravel()
    interferer = np.asarray(interferer, F32).ravel()
    if len(interferer) != len(target):
        raise ValueError(
            f"interferer length {len(interferer)} != target length {len(target)}"
        )
    pt = _power(target)
    if pt == 0.0:
        raise ValueError("target signal is silent")
    gi = _gain_for(pt, _power(interferer), sir_db)
    if noise is None:
        if math.isinf(snr_db) and snr_db > 0:
            noise = np.zeros(len(target), F32)
        else:
            rng = np.random.default_rng(seed)
            noise = rng.standard_normal(len(target)).astype(F32)
    else:
        noise = np.asarray(noise, F32).ravel()
        if len(noise) != len(target):
            raise ValueError(f"noise length {len(noise)} != target length {len(target)}")
    pn = _power(noise)
    gn = 0.0 if (math.isinf(snr_db) and snr_db > 0) or pn == 0.0 else _gain_for(pt, pn, snr_db)
    mixture = (
        target.astype(np.float64)
        + gi * interferer.astype(np.float64)
        + gn * noise.astype(np.float64)
    ).astype(F32)
    return mixture, gi, gn


# ---------------------------------------------------------------------------
# toy corpus

# fake speaker identities: disjoint passbands, Hz (at 8 kHz)
_SPEAKER_BANDS = {
    0: (200.0, 900.0),
    1: (1400.0, 3000.0),
}


def toy_utterance(speaker, duration_s, sample_rate, rng):
    """Band-limited noise with a slow random amplitude envelope."""
    if speaker not in _SPEAKER_BANDS:
        raise ValueError(f"unknown toy speaker {speaker}")
    lo, hi = _SPEAKER_BANDS[speaker]
    n = int(duration_s * sample_rate)
    sos = butter(6, [lo, hi], btype="bandpass", fs=sample_rate, output="sos")
    x = sosfilt(sos, rng.standard_normal(n))
    t = np.arange(n) / sample_rate
    rate = rng.uniform(2.0, 6.0)
    phase = rng.uniform(0, 2 * np.pi)
    env = 0.55 + 0.45 * np.sin(2 * np.pi * rate * t + phase)
    x = x * env
    rms = np.sqrt(np.mean(x * x))
    return (0.1 * x / max(rms, 1e-12)).astype(F32)


def make_toy_dataset(n_items, duration_s=0.5, sample_rate=8000, sir_db=0.0,
                     snr_db=20.0, heldout_fraction=0.1, seed=0):
    """Build (mixture, target, enrollment) triples with the target
    speaker randomized per item, split into train and held-out lists."""
    rng = np.random.default_rng(seed)
    items = []
    for i in range(n_items):
        spk = int(rng.integers(0, 2))
        other = 1 - spk
        target = toy_utterance(spk, duration_s, sample_rate, rng)
        interf = toy_utterance(other, duration_s, sample_rate, rng)
        enroll = toy_utterance(spk, duration_s, sample_rate, rng)
        mixture, _, _ = synthesize_mixture(
            target, interf, sir_db, snr_db, seed=int(rng.integers(0, 2**31))
        )
        items.append((mixture, target, enroll))
    return Dataset.split(items, heldout_fraction=heldout_fraction, seed=seed + 1)
