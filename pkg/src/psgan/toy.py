"""Synthetic corpora for smoke tests, demos and the toy training run."""

from __future__ import annotations

import numpy as np
from scipy.signal import lfilter

from .dsp import HOP, SAMPLE_RATE, GciMarks

# formant frequencies (Hz) and bandwidths of a neutral vowel
FORMANTS = ((500.0, 80.0), (1500.0, 100.0), (2500.0, 120.0), (3500.0, 150.0))


def vowel_filter(formants=FORMANTS, fs=SAMPLE_RATE):
    poles = []
    for f, bw in formants:
        r = np.exp(-np.pi * bw / fs)
        th = 2 * np.pi * f / fs
        poles += [r * np.exp(1j * th), r * np.exp(-1j * th)]
    return np.real(np.poly(poles))


def pulse_train(n, f0, decay=8.0, amp=1.0, start=None, jitter=0.0, rng=None):
    """Negative exponentially decaying pulses, one per period.

    Returns ``(signal, gci_positions)``; ``decay`` is the time constant in
    samples.
    """
    period = SAMPLE_RATE / f0
    t0 = period / 2 if start is None else start
    pos = []
    t = t0
    while t < n:
        pos.append(int(round(t)))
        t += period * (1.0 + (jitter * rng.standard_normal() if jitter else 0.0))
    pos = np.array(sorted(set(pos)), dtype=np.int64)
    x = np.zeros(n)
    tail = np.exp(-np.arange(int(10 * decay)) / decay)
    for m in pos:
        e = min(n, m + len(tail))
        x[m:e] -= amp * tail[: e - m]
    return x, pos


def synthetic_vowel(seconds, f0, rng=None, noise=1e-3, peak=0.5, decay=8.0):
    """Pulse train through a fixed vowel filter, with its true GCIs and F0 track.

    Returns ``(speech, excitation, marks, f0_track)``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    n = int(seconds * SAMPLE_RATE)
    exc, pos = pulse_train(n, f0, decay=decay)
    exc = exc + noise * rng.standard_normal(n)
    y = lfilter([1.0], vowel_filter(), exc)
    g = peak / np.max(np.abs(y))
    marks = GciMarks(pos, np.ones(len(pos), dtype=bool))
    f0_track = np.full(-(-n // HOP), float(f0))
    return y * g, exc * g, marks, f0_track


def toy_corpus(total_seconds=60.0, utt_seconds=2.0, f0s=(100.0, 125.0, 160.0), seed=0):
    """Constant-F0 synthetic vowels cycling through ``f0s``.

    Returns lists ``(signals, marks, f0_tracks)``.
    """
    rng = np.random.default_rng(seed)
    n_utt = int(round(total_seconds / utt_seconds))
    signals, marks, tracks = [], [], []
    for i in range(n_utt):
        y, _, m, f0 = synthetic_vowel(utt_seconds, f0s[i % len(f0s)], rng)
        signals.append(y)
        marks.append(m)
        tracks.append(f0)
    return signals, marks, tracks


def robustness_utterances(seed=0, seconds=1.0):
    """Ten varied signals for robustness checks, including silence and white noise."""
    rng = np.random.default_rng(seed)
    n = int(seconds * SAMPLE_RATE)
    out = [np.zeros(n), 0.3 * rng.standard_normal(n).clip(-3, 3) / 3]
    for f0 in (90.0, 110.0, 130.0, 150.0, 180.0, 220.0):
        out.append(synthetic_vowel(seconds, f0, rng)[0])
    # voiced/unvoiced alternation and a pitch glide
    v = synthetic_vowel(seconds, 120.0, rng)[0]
    v[n // 2:] = 0.05 * rng.standard_normal(n - n // 2)
    out.append(v)
    exc = np.zeros(n)
    t = 0.0
    while t < n:
        exc[int(t)] = -1.0
        t += SAMPLE_RATE / (100.0 + 100.0 * t / n)
    glide = lfilter([1.0], vowel_filter(), exc)
    out.append(0.5 * glide / np.max(np.abs(glide)))
    return out
