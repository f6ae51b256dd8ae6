"""Acoustic conditioning features at a 200 Hz frame rate.

Each frame is a 47-dimensional vector laid out as

    [0:30]   vocal tract LSFs (radians)
    [30:40]  glottal source envelope LSFs (radians)
    [40:45]  band harmonic-to-noise ratios (dB)
    [45]     F0 on the mel scale (interpolated through unvoiced frames)
    [46]     voicing flag
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from . import dsp
from .dsp import HOP, SAMPLE_RATE, AnalysisError

VT_ORDER = 30
GLOT_ORDER = 10
N_HNR = 5
DIM = VT_ORDER + GLOT_ORDER + N_HNR + 2
VT = slice(0, 30)
GLOT = slice(30, 40)
HNR = slice(40, 45)
F0_MEL = 45
VOICING = 46

WIN_LEN = 400  # 25 ms
PREEMPH = 0.0  # optional tilt removal before LPC, e.g. 0.97
HNR_BANDS = (0.0, 500.0, 1000.0, 2000.0, 4000.0, 8000.0)
DEFAULT_F0 = 100.0

FEATURE_MAGIC = b"PSGF"
FEATURE_VERSION = 1

COLUMNS = ([f"vt_lsf{i}" for i in range(VT_ORDER)] + [f"glot_lsf{i}" for i in range(GLOT_ORDER)]
           + [f"hnr{i}" for i in range(N_HNR)] + ["f0_mel", "voicing"])


def hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise ValueError("frequency must be non-negative")
    return 2595.0 * np.log10(1.0 + f / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def interpolate_f0(raw_f0, default=DEFAULT_F0):
    """Fill unvoiced (zero) frames by linear interpolation between voiced neighbors.

    Leading and trailing gaps hold the nearest voiced value; an all-unvoiced
    track becomes ``default``. Returns ``(f0, voicing)``.
    """
    raw = np.asarray(raw_f0, dtype=np.float64)
    voiced = raw > 0
    if not np.any(voiced):
        return np.full(raw.shape, float(default)), voiced
    idx = np.arange(len(raw))
    f0 = np.interp(idx, idx[voiced], raw[voiced])
    return f0, voiced


def estimate_f0(x, hop=HOP, fs=SAMPLE_RATE, fmin=dsp.F0_MIN, fmax=dsp.F0_MAX,
                threshold=0.5, win_len=WIN_LEN):
    """Frame-wise F0 by normalized cross-correlation; 0 marks unvoiced frames."""
    x = np.asarray(x, dtype=np.float64)
    n_frames = -(-len(x) // hop)
    lag_min, lag_max = int(fs // fmax), int(np.ceil(fs / fmin))
    pad = np.pad(x, (win_len, win_len + lag_max))
    f0 = np.zeros(n_frames)
    lags = np.arange(lag_min, lag_max + 1)
    energy_floor = 1e-8 * win_len
    for k in range(n_frames):
        s = k * hop + hop // 2 - win_len // 2 + win_len
        ref = pad[s: s + win_len]
        e0 = ref @ ref
        if e0 < energy_floor:
            continue
        ext = pad[s: s + win_len + lag_max]
        xc = np.correlate(ext, ref, "valid")
        sq = np.concatenate([[0.0], np.cumsum(ext * ext)])
        el = sq[win_len:] - sq[:-win_len]
        nccf = xc / np.sqrt(e0 * np.maximum(el, 1e-300))
        cand = nccf[lag_min: lag_max + 1]
        best = cand.max()
        if best < threshold:
            continue
        # smallest-lag local maximum close to the global best avoids octave drops
        peaks = np.nonzero((cand[1:-1] >= cand[:-2]) & (cand[1:-1] >= cand[2:]) & (cand[1:-1] >= 0.85 * best))[0] + 1
        i = int(peaks[0]) if len(peaks) else int(np.argmax(cand))
        lag = float(lags[i])
        if 0 < i < len(cand) - 1:
            y0, y1, y2 = cand[i - 1], cand[i], cand[i + 1]
            den = y0 - 2 * y1 + y2
            if den < 0:
                lag += 0.5 * (y0 - y2) / den
        f0[k] = fs / lag
    return f0


def f0_from_marks(marks, n_frames, hop=HOP, fs=SAMPLE_RATE):
    """Per-frame F0 from the spacing of voiced marks (0 where unvoiced)."""
    pos, voi = marks.positions, marks.voiced
    f0 = np.zeros(n_frames)
    if len(pos) < 2:
        return f0
    both = voi[:-1] & voi[1:]
    nearest = dsp.marks_for_frames(marks, n_frames, hop)
    centers = np.arange(n_frames) * hop + hop // 2
    for k in range(n_frames):
        j = nearest[k]
        if not voi[j]:
            continue
        # interval containing the frame center, else the one adjacent to the mark
        i = int(np.searchsorted(pos, centers[k], side="right")) - 1
        cands = [i, j - 1, j]
        for c in cands:
            if 0 <= c < len(both) and both[c]:
                f0[k] = fs / (pos[c + 1] - pos[c])
                break
    return f0


@dataclass
class FeatureTrack:
    frames: np.ndarray  # (n_frames, DIM) float32
    utt_id: str = ""
    n_samples: int = field(default=-1)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32).reshape(-1, DIM)
        if self.n_samples < 0:
            self.n_samples = len(self.frames) * HOP

    def __len__(self):
        return len(self.frames)

    @property
    def vt_lsf(self):
        return self.frames[:, VT].astype(np.float64)

    @property
    def glot_lsf(self):
        return self.frames[:, GLOT].astype(np.float64)

    @property
    def hnr(self):
        return self.frames[:, HNR].astype(np.float64)

    @property
    def f0_hz(self):
        return mel_to_hz(self.frames[:, F0_MEL].astype(np.float64))

    @property
    def voicing(self):
        return self.frames[:, VOICING] > 0.5


def _frame_segment(x, center, length):
    s = center - length // 2
    idx = np.arange(s, s + length)
    valid = (idx >= 0) & (idx < len(x))
    return np.where(valid, x[np.clip(idx, 0, len(x) - 1)], 0.0)


def _lpc(seg, order):
    r = np.correlate(seg, seg, "full")[len(seg) - 1: len(seg) + order]
    r[0] = r[0] * (1.0 + 1e-9) + 1e-10 * len(seg)
    return dsp.levinson(r, order)


def _safe_lsf(a):
    try:
        return dsp.lpc_to_lsf(a)
    except dsp.DomainError:
        p = len(a) - 1
        return np.arange(1, p + 1) * np.pi / (p + 1)


def _band_hnr(seg_a, seg_b, window, fs=SAMPLE_RATE, nfft=512):
    X = np.fft.rfft(seg_a * window, nfft)
    Y = np.fft.rfft(seg_b * window, nfft)
    harm = np.abs(0.5 * (X + Y)) ** 2
    noise = np.abs(0.5 * (X - Y)) ** 2
    freqs = np.fft.rfftfreq(nfft, 1.0 / fs)
    out = np.zeros(N_HNR)
    floor = 1e-12
    for b in range(N_HNR):
        sel = (freqs >= HNR_BANDS[b]) & (freqs < HNR_BANDS[b + 1] if b < N_HNR - 1 else freqs <= HNR_BANDS[b + 1])
        out[b] = 10.0 * np.log10((harm[sel].sum() + floor) / (noise[sel].sum() + floor))
    return np.clip(out, -40.0, 60.0)


def analysis_filters(x, hop=HOP, preemph=PREEMPH):
    """Order-30 vocal tract predictors, one per 5 ms frame (Hann-windowed LPC)."""
    x = np.asarray(x, dtype=np.float64)
    n_frames = -(-len(x) // hop)
    xp = lfilter([1.0, -preemph], [1.0], x) if preemph else x
    window = np.hanning(WIN_LEN)
    return [_lpc(_frame_segment(xp, k * hop + hop // 2, WIN_LEN) * window, VT_ORDER)
            for k in range(n_frames)]


def extract_features(x, marks=None, f0=None, utt_id="", hop=HOP, fs=SAMPLE_RATE):
    """Analyze a 16 kHz signal into a :class:`FeatureTrack`.

    F0 and voicing come from ``f0`` (Hz per frame, 0 = unvoiced) when given,
    otherwise from the spacing of voiced ``marks``, otherwise from
    :func:`estimate_f0`.
    """
    x = np.asarray(x, dtype=np.float64)
    if len(x) < WIN_LEN:
        raise AnalysisError(f"signal shorter than one {WIN_LEN}-sample analysis window")
    if not np.all(np.isfinite(x)):
        raise AnalysisError("signal contains non-finite samples")
    n_frames = -(-len(x) // hop)
    if f0 is not None:
        raw_f0 = np.asarray(f0, dtype=np.float64)[:n_frames]
        raw_f0 = np.pad(raw_f0, (0, n_frames - len(raw_f0)))
    elif marks is not None:
        raw_f0 = f0_from_marks(marks, n_frames, hop, fs)
    else:
        raw_f0 = estimate_f0(x, hop, fs)
    f0_cont, voiced = interpolate_f0(raw_f0)
    f0_cont = np.clip(f0_cont, dsp.F0_MIN, dsp.F0_MAX)

    window = np.hanning(WIN_LEN)
    vt_filters = analysis_filters(x, hop)
    out = np.zeros((n_frames, DIM))
    order = VT_ORDER
    for k in range(n_frames):
        c = k * hop + hop // 2
        a = vt_filters[k]
        out[k, VT] = _safe_lsf(a)
        raw = _frame_segment(x, c - order // 2, WIN_LEN + order)
        resid = lfilter(a, [1.0], raw)[order:]
        out[k, GLOT] = _safe_lsf(_lpc(resid * window, GLOT_ORDER))
        period = int(round(fs / f0_cont[k]))
        seg_a = _frame_segment(x, c, WIN_LEN)
        seg_b = _frame_segment(x, c + period, WIN_LEN)
        out[k, HNR] = _band_hnr(seg_a, seg_b, window, fs)
    out[:, F0_MEL] = hz_to_mel(f0_cont)
    out[:, VOICING] = voiced.astype(np.float64)
    return FeatureTrack(out.astype(np.float32), utt_id=utt_id, n_samples=len(x))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIII")


def serialize_features(track):
    frames = np.ascontiguousarray(track.frames, dtype="<f4")
    return _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, len(frames), DIM) + frames.tobytes()


def deserialize_features(data, utt_id=""):
    if len(data) < _HEADER.size:
        raise ValueError("feature file truncated: incomplete header")
    magic, version, count, dim = _HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise ValueError(f"not a feature file: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise ValueError(f"unsupported feature file version {version}")
    if dim != DIM:
        raise ValueError(f"feature dimension mismatch: file has {dim}, expected {DIM}")
    payload = data[_HEADER.size:]
    if len(payload) != count * dim * 4:
        raise ValueError(f"feature payload has {len(payload)} bytes, expected {count * dim * 4}")
    frames = np.frombuffer(payload, dtype="<f4").reshape(count, dim).astype(np.float32)
    return FeatureTrack(frames, utt_id=utt_id)


def save_features(path, track):
    with open(path, "wb") as f:
        f.write(serialize_features(track))


def load_features(path):
    from pathlib import Path

    with open(path, "rb") as f:
        return deserialize_features(f.read(), utt_id=Path(path).stem)


def export_csv(path, track):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(COLUMNS)
        for row in track.frames:
            w.writerow([repr(float(v)) for v in row])
