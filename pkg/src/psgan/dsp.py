"""Signal-processing kernels: LPC/LSF analysis, time-varying filtering,
GCI detection, GCI-centered framing, waveform pyramids and PSOLA assembly.

All computation is float64. Signals are plain 1-D numpy arrays sampled at
``SAMPLE_RATE``; LPC polynomials are arrays ``a`` with ``a[0] == 1``.
"""

from __future__ import annotations

import logging
import wave
from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter, lfiltic

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
HOP = 80  # 5 ms, 200 Hz frame rate
FRAME_LEN = 512
N_SCALES = 5
F0_MIN, F0_MAX = 50.0, 500.0


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation."""


class AnalysisError(ValueError):
    """Analysis could not be carried out on the given data."""


# ---------------------------------------------------------------------------
# LPC / LSF
# ---------------------------------------------------------------------------

def levinson(autocorr, order):
    """Levinson-Durbin recursion.

    Returns the predictor polynomial ``a`` (``a[0] = 1``) of length
    ``order + 1`` minimizing forward prediction error for the given
    autocorrelation sequence.
    """
    r = np.asarray(autocorr, dtype=np.float64)
    if len(r) < order + 1:
        raise AnalysisError(f"need {order + 1} autocorrelation lags, got {len(r)}")
    if not r[0] > 0:
        raise AnalysisError("zero-lag energy must be positive")
    a = np.zeros(order + 1)
    a[0] = 1.0
    err = r[0]
    for i in range(1, order + 1):
        acc = r[i] + np.dot(a[1:i], r[i - 1:0:-1])
        k = -acc / err
        if abs(k) >= 1.0:
            # numerically singular autocorrelation: truncate the recursion
            break
        a[1:i] = a[1:i] + k * a[i - 1:0:-1]
        a[i] = k
        err *= 1.0 - k * k
    return a


def is_minimum_phase(a, margin=0.0):
    a = np.asarray(a, dtype=np.float64)
    if len(a) <= 1:
        return True
    roots = np.roots(a)
    return bool(np.all(np.abs(roots) < 1.0 - margin))


def _cos_series(c, w, deriv=False):
    """Evaluate e^{jmw} C(e^{jw}) for a symmetric polynomial c of degree 2m."""
    m = (len(c) - 1) // 2
    k = np.arange(1, m + 1)
    coefs = 2.0 * c[m - k]
    kw = np.multiply.outer(w, k)
    if deriv:
        return -(np.sin(kw) @ (k * coefs))
    return c[m] + np.cos(kw) @ coefs


def _series_roots(c, n_roots, grid=1024):
    """Roots in (0, pi) of the cosine series of symmetric polynomial ``c``."""
    c64 = c.astype(np.float64)
    for n in (grid, grid * 8, grid * 64):
        w = np.linspace(0.0, np.pi, n + 1)
        f = _cos_series(c64, w)
        idx = np.nonzero(np.signbit(f[:-1]) != np.signbit(f[1:]))[0]
        if len(idx) == n_roots:
            break
    else:
        raise DomainError(f"expected {n_roots} unit-circle roots, found {len(idx)}")
    lo, hi = w[idx], w[idx + 1]
    g_lo, g_hi = lo.astype(np.longdouble), hi.astype(np.longdouble)
    flo = f[idx]
    for _ in range(16):
        mid = 0.5 * (lo + hi)
        fm = _cos_series(c64, mid)
        same = np.signbit(fm) == np.signbit(flo)
        lo = np.where(same, mid, lo)
        flo = np.where(same, fm, flo)
        hi = np.where(same, hi, mid)
    # Newton polish in extended precision; float64 evaluation noise limits
    # plain bisection to ~1e-10 for high orders
    cl = c.astype(np.longdouble)
    root = (0.5 * (lo + hi)).astype(np.longdouble)
    for _ in range(4):
        step = _cos_series(cl, root) / _cos_series(cl, root, deriv=True)
        cand = root - step
        root = np.where((cand >= g_lo) & (cand <= g_hi) & np.isfinite(cand), cand, root)
    # flat roots (tiny derivative) are limited by evaluation noise, flag them
    noise = 64 * np.finfo(np.longdouble).eps * np.sum(np.abs(cl))
    slope = np.abs(_cos_series(cl, root, deriv=True))
    return root.astype(np.float64), noise / np.maximum(slope, 1e-300)


def _polish(a, roots, err_est, part, tol=1e-12):
    """Refine poorly conditioned roots with multiprecision Newton steps.

    Roots of P (``part=0``) and Q (``part=1``) are the zeros of the real and
    imaginary parts of ``e^{j(p+1)w/2} A(e^{jw})``, evaluated straight from
    the predictor so no cancellation-prone intermediate polynomial is involved.
    """
    bad = np.nonzero(err_est > tol)[0]
    if len(bad) == 0:
        return roots
    import mpmath

    roots = roots.copy()
    with mpmath.workdps(40):
        coef = [mpmath.mpf(float(c)) for c in a]
        half = mpmath.mpf(len(a)) / 2

        def f(w):
            b = mpmath.expj(half * w) * mpmath.fsum(c * mpmath.expj(-k * w) for k, c in enumerate(coef))
            return b.imag if part else b.real

        for i in bad:
            w0 = mpmath.mpf(float(roots[i]))
            try:
                w = mpmath.findroot(f, (w0 - 1e-6, w0 + 1e-6), solver="anderson")
            except (ValueError, ZeroDivisionError):
                continue
            if abs(w - w0) < 1e-6:
                roots[i] = float(w)
    return roots


def _deflate(poly, roots_at):
    """Divide a descending-power polynomial by (x - r) for each r in ``roots_at``."""
    for r in roots_at:
        b = np.empty(len(poly) - 1, dtype=poly.dtype)
        acc = 0.0
        for i in range(len(b)):
            acc = poly[i] + r * acc
            b[i] = acc
        poly = b
    return poly


def _sum_difference_polys(a):
    """Symmetric parts of P(z) and Q(z) with the trivial roots at z = +-1 removed."""
    p = len(a) - 1
    ext = np.concatenate([a, np.zeros(1, dtype=a.dtype)])
    P = ext + ext[::-1]
    Q = ext - ext[::-1]
    if p % 2 == 0:
        P = _deflate(P, [-1.0])
        Q = _deflate(Q, [1.0])
    else:
        Q = _deflate(Q, [1.0, -1.0])
    return P, Q


def lpc_to_lsf(a):
    """Line spectral frequencies (radians, ascending) of a minimum-phase predictor."""
    a = np.asarray(a, dtype=np.float64)
    p = len(a) - 1
    if p < 1:
        return np.zeros(0)
    if a[0] != 1.0:
        raise DomainError("a[0] must be 1")
    if not is_minimum_phase(a):
        raise DomainError("predictor is not minimum phase")
    P, Q = _sum_difference_polys(a.astype(np.longdouble))
    wp, ep = _series_roots(P, (len(P) - 1) // 2)
    wq, eq = _series_roots(Q, (len(Q) - 1) // 2)
    wp = _polish(a, wp, ep, 0)
    wq = _polish(a, wq, eq, 1)
    lsf = np.sort(np.concatenate([wp, wq]))
    if not np.all(np.diff(lsf) > 0):
        raise DomainError("degenerate LSFs")
    return lsf


def _poly_from_freqs(w):
    poly = np.array([1.0], dtype=np.longdouble)
    for wi in np.asarray(w, dtype=np.longdouble):
        poly = np.convolve(poly, np.array([1.0, -2.0 * np.cos(wi), 1.0], dtype=np.longdouble))
    return poly


def lsf_to_lpc(lsf):
    """Predictor polynomial from strictly increasing LSFs in (0, pi)."""
    lsf = np.asarray(lsf, dtype=np.float64)
    p = len(lsf)
    if p == 0:
        return np.array([1.0])
    if not (np.all(lsf > 0) and np.all(lsf < np.pi) and np.all(np.diff(lsf) > 0)):
        raise DomainError("LSFs must be strictly increasing in (0, pi)")
    P = _poly_from_freqs(lsf[0::2])
    Q = _poly_from_freqs(lsf[1::2])
    if p % 2 == 0:
        P = np.convolve(P, [1.0, 1.0])
        Q = np.convolve(Q, [1.0, -1.0])
    else:
        Q = np.convolve(Q, [1.0, 0.0, -1.0])
    return (0.5 * (P + Q))[: p + 1].astype(np.float64)


# ---------------------------------------------------------------------------
# Filtering
# ---------------------------------------------------------------------------

def filter_time_varying(x, frames, mode="synthesis", hop=HOP, check_stability=True):
    """Filter ``x`` with per-frame LPC polynomials held over ``hop`` samples.

    ``mode="inverse"`` applies A(z), ``mode="synthesis"`` applies 1/A(z).
    Filter memory is the past input/output samples, so the state carries
    across frame boundaries regardless of the coefficient change.
    """
    x = np.asarray(x, dtype=np.float64)
    if mode not in ("synthesis", "inverse"):
        raise ValueError(f"unknown filter mode {mode!r}")
    frames = [np.asarray(a, dtype=np.float64) for a in frames]
    n_frames = -(-len(x) // hop)
    if len(frames) < n_frames:
        raise ValueError(f"{len(frames)} coefficient frames cannot cover {len(x)} samples")
    y = np.zeros_like(x)
    order = max((len(a) for a in frames), default=1) - 1
    for k in range(n_frames):
        a = frames[k]
        if check_stability and not is_minimum_phase(a):
            raise DomainError(f"unstable coefficients in frame {k}")
        s, e = k * hop, min((k + 1) * hop, len(x))
        lo = max(0, s - order)
        x_past = x[lo:s][::-1]
        y_past = y[lo:s][::-1]
        if mode == "inverse":
            b, den = a, [1.0]
        else:
            b, den = [1.0], a
        if s > 0 and order > 0:
            zi = lfiltic(b, den, y_past, x_past)
            y[s:e], _ = lfilter(b, den, x[s:e], zi=zi)
        else:
            y[s:e] = lfilter(b, den, x[s:e])
    return y


# ---------------------------------------------------------------------------
# GCI marks
# ---------------------------------------------------------------------------

@dataclass
class GciMarks:
    """Sample positions of glottal closure instants (or unvoiced pseudo-marks)."""

    positions: np.ndarray
    voiced: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64)
        self.voiced = np.asarray(self.voiced, dtype=bool)
        if self.positions.shape != self.voiced.shape:
            raise ValueError("positions and voiced flags differ in length")
        if len(self.positions) > 1 and np.any(np.diff(self.positions) <= 0):
            raise ValueError("mark positions must be strictly increasing")

    def __len__(self):
        return len(self.positions)


def write_marks(path, marks):
    with open(path, "w") as f:
        for m, v in zip(marks.positions, marks.voiced):
            f.write(f"{int(m)} {int(v)}\n")


def read_marks(path):
    pos, voi = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2 or parts[1] not in ("0", "1"):
                raise ValueError(f"{path}:{lineno}: expected 'sample_index voiced_flag(0|1)'")
            pos.append(int(parts[0]))
            voi.append(parts[1] == "1")
    return GciMarks(np.array(pos, dtype=np.int64), np.array(voi, dtype=bool))


def lp_residual(x, order=24, win_len=400, hop=HOP):
    """LP residual of ``x`` using frame-wise autocorrelation LPC (Hann, 25 ms)."""
    x = np.asarray(x, dtype=np.float64)
    n_frames = -(-len(x) // hop)
    window = np.hanning(win_len)
    pad = np.pad(x, (win_len, win_len))
    floor = 1e-10 * win_len
    frames = []
    for k in range(n_frames):
        c = k * hop + hop // 2 + win_len
        seg = pad[c - win_len // 2: c - win_len // 2 + win_len] * window
        r = np.correlate(seg, seg, "full")[win_len - 1: win_len + order]
        r[0] = r[0] * (1.0 + 1e-9) + floor
        frames.append(levinson(r, order))
    return filter_time_varying(x, frames, "inverse", hop=hop, check_stability=False)


def _clamp_f0(f0):
    f0 = np.asarray(f0, dtype=np.float64).copy()
    voiced = f0 > 0
    bad = voiced & ((f0 < F0_MIN) | (f0 > F0_MAX))
    if np.any(bad):
        log.warning("clamping %d F0 values to [%g, %g] Hz", int(bad.sum()), F0_MIN, F0_MAX)
        f0[bad] = np.clip(f0[bad], F0_MIN, F0_MAX)
    return f0


def detect_gci(x, f0_track, hop=HOP, polarity="auto", residual=None, fs=SAMPLE_RATE):
    """Place one mark per pitch period at LP-residual peaks, guided by F0.

    ``f0_track`` holds one value per ``hop`` samples, 0 marking unvoiced
    frames. The first mark of a voiced run is the residual extremum within
    one period of the run start; subsequent marks are searched within
    +-20 % of the expected period. Unvoiced stretches get pseudo-marks every
    ``hop`` samples. ``polarity`` selects negative ("neg") or positive
    ("pos") peaks; "auto" picks the dominant sign of the residual over voiced
    frames.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if n == 0:
        raise AnalysisError("empty signal")
    f0 = _clamp_f0(f0_track)
    n_frames = -(-n // hop)
    if len(f0) < n_frames:
        f0 = np.pad(f0, (0, n_frames - len(f0)))
    e = lp_residual(x) if residual is None else np.asarray(residual, dtype=np.float64)

    frame_of = lambda s: min(s // hop, n_frames - 1)  # noqa: E731
    vmask = np.repeat(f0[:n_frames] > 0, hop)[:n]
    if polarity == "auto":
        ev = e[vmask]
        polarity = "pos" if len(ev) and ev.max() > -ev.min() else "neg"
    score = e if polarity == "pos" else -e

    positions, voiced = [], []
    s = 0
    while s < n:
        k = frame_of(s)
        if f0[k] <= 0:
            positions.append(s)
            voiced.append(False)
            s += hop
            continue
        period = fs / f0[k]
        if voiced and voiced[-1]:
            prev = positions[-1]
            lo = max(prev + int(np.ceil(0.8 * period)), s)
            hi = min(prev + int(np.floor(1.2 * period)) + 1, n)
        else:
            lo, hi = s, min(s + int(round(period)), n)
        if hi <= lo:
            break
        m = lo + int(np.argmax(score[lo:hi]))
        if f0[frame_of(m)] <= 0:
            # run ended inside the search window: resume the unvoiced grid
            s = max(lo, (m // hop) * hop)
            if positions and s <= positions[-1]:
                s = positions[-1] + 1
            continue
        positions.append(m)
        voiced.append(True)
        s = m + 1
    return GciMarks(np.array(positions, dtype=np.int64), np.array(voiced, dtype=bool))


def marks_for_frames(marks, n_frames, hop=HOP):
    """Index of the mark nearest to each 200 Hz frame center."""
    pos = marks.positions
    if len(pos) == 0:
        raise ValueError("no marks")
    centers = np.arange(n_frames) * hop + hop // 2
    j = np.clip(np.searchsorted(pos, centers), 1, len(pos) - 1) if len(pos) > 1 else np.zeros(n_frames, int)
    if len(pos) > 1:
        left = pos[j - 1]
        right = pos[j]
        j = np.where(centers - left <= right - centers, j - 1, j)
    return j


# ---------------------------------------------------------------------------
# Framing, pyramids, PSOLA
# ---------------------------------------------------------------------------

def extract_frames(x, positions, frame_len=FRAME_LEN):
    """Rectangular frames ``x[m - L/2 : m + L/2]`` around each mark, zero-padded."""
    if frame_len % 2:
        raise ValueError("frame_len must be even")
    x = np.asarray(x, dtype=np.float64)
    positions = np.asarray(getattr(positions, "positions", positions), dtype=np.int64)
    idx = positions[:, None] - frame_len // 2 + np.arange(frame_len)[None, :]
    valid = (idx >= 0) & (idx < len(x))
    if len(x) == 0:
        return np.zeros(idx.shape)
    return np.where(valid, x[np.clip(idx, 0, len(x) - 1)], 0.0)


def build_pyramid(frame, n_scales=N_SCALES):
    """Mean-pool pyramid: level 0 is the input, each next level halves the length.

    Works on the last axis, so a stack of frames ``(..., 512)`` gives a list
    of arrays ``(..., 512 / 2**i)``.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape[-1] != FRAME_LEN:
        raise ValueError(f"frame length must be {FRAME_LEN}, got {frame.shape[-1]}")
    levels = [frame]
    for _ in range(n_scales - 1):
        prev = levels[-1]
        levels.append(0.5 * (prev[..., 0::2] + prev[..., 1::2]))
    return levels


def _fade(pos, start, length):
    """Weight of the earlier of two cross-fading frames at ``pos``."""
    if length <= 0:
        return (pos < start).astype(np.float64)
    t = np.clip((pos - start) / length, 0.0, 1.0)
    return np.cos(0.5 * np.pi * t) ** 2


def psola_windows(positions, frame_len=FRAME_LEN):
    """Synthesis windows (one per mark, length ``frame_len``) for PSOLA.

    Between neighboring marks at distance ``d`` the frames cross-fade with
    complementary Hann halves over ``min(d, frame_len - d)`` samples centered
    at the midpoint, so every window is 1 at its own mark and the windows sum
    to 1 between the first and the last mark. For ``d <= frame_len / 2`` the
    fade spans the full distance to the neighbor. Outer edges taper over
    ``min(d_inner, frame_len / 2)``.
    """
    pos = np.asarray(getattr(positions, "positions", positions), dtype=np.int64)
    half = frame_len // 2
    offs = np.arange(-half, half, dtype=np.float64)
    wins = np.zeros((len(pos), frame_len))
    for i, m in enumerate(pos):
        w = np.ones(frame_len)
        # right side
        if i + 1 < len(pos):
            d = float(pos[i + 1] - m)
            L = min(d, frame_len - d) if d <= frame_len else 0.0
            w[offs >= 0] *= _fade(offs[offs >= 0], d / 2 - L / 2, L)
        else:
            d = float(pos[i] - pos[i - 1]) if i > 0 else half
            L = min(d, half)
            w[offs >= 0] *= _fade(offs[offs >= 0], 0.0, L)
        # left side, mirrored
        if i > 0:
            d = float(m - pos[i - 1])
            L = min(d, frame_len - d) if d <= frame_len else 0.0
            w[offs < 0] *= 1.0 - _fade(offs[offs < 0], -d / 2 - L / 2, L)
        else:
            d = float(pos[i + 1] - m) if len(pos) > 1 else half
            L = min(d, half)
            w[offs < 0] *= 1.0 - _fade(offs[offs < 0], -L, L)
        wins[i] = w
    return wins


def psola_assemble(frames, positions, out_len, frame_len=FRAME_LEN):
    """Overlap-add windowed frames centered at their marks."""
    frames = np.asarray(frames, dtype=np.float64)
    pos = np.asarray(getattr(positions, "positions", positions), dtype=np.int64)
    if len(frames) < len(pos):
        raise ValueError(f"{len(frames)} frames for {len(pos)} marks")
    half = frame_len // 2
    wins = psola_windows(pos, frame_len)
    out = np.zeros(out_len + frame_len)
    for m, fr, w in zip(pos, frames, wins):
        s = m  # offset by half: out index m - half + half
        if s < 0 or s + frame_len > len(out):
            continue
        out[s: s + frame_len] += fr * w
    return out[half: half + out_len]


def fft_magnitude(frame):
    """Linear DFT magnitudes of an un-windowed frame, bins 0..N/2."""
    return np.abs(np.fft.rfft(np.asarray(frame, dtype=np.float64), axis=-1))


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

def read_wav(path):
    """Read a 16-bit PCM mono 16 kHz WAV file as float64 in [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as w:
            ch, width, fs, n = w.getnchannels(), w.getsampwidth(), w.getframerate(), w.getnframes()
            if ch != 1 or width != 2 or fs != SAMPLE_RATE:
                raise ValueError(
                    f"{path}: need 16-bit PCM mono {SAMPLE_RATE} Hz, "
                    f"got {8 * width}-bit, {ch} channel(s), {fs} Hz")
            raw = w.readframes(n)
    except wave.Error as exc:
        raise ValueError(f"{path}: not a PCM WAV file ({exc})") from exc
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0


def write_wav(path, x):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("refusing to write non-finite samples")
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(SAMPLE_RATE)
        w.writeframes(pcm.tobytes())
