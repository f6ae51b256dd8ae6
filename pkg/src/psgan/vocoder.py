"""End-to-end pipelines: dataset preparation, pitch-synchronous synthesis
from acoustic features, and objective evaluation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import dsp
from .dsp import HOP, SAMPLE_RATE, GciMarks
from .features import (FeatureTrack, estimate_f0, extract_features, save_features)
from .model import make_noise
from .training import TrainingData, Utterance, load_model, target_gain

log = logging.getLogger(__name__)

PEAK = 0.89
CHUNK_FRAMES = 150
CHUNK_OVERLAP = 35  # C reaches 30 frames each way, G's (3, 7) kernels add 5
MIN_LSF_GAP = 1e-4


def lsf_frames_to_lpc(lsf_frames):
    """Predictors from a (frames, order) LSF array, repairing ordering and spacing first."""
    out = []
    for lsf in np.asarray(lsf_frames, dtype=np.float64):
        w = np.clip(np.sort(lsf), MIN_LSF_GAP, np.pi - MIN_LSF_GAP)
        for i in range(1, len(w)):
            w[i] = max(w[i], w[i - 1] + MIN_LSF_GAP)
        if w[-1] >= np.pi:
            w = np.arange(1, len(w) + 1) * np.pi / (len(w) + 1)
        out.append(dsp.lsf_to_lpc(w))
    return out


# ---------------------------------------------------------------------------
# Dataset preparation
# ---------------------------------------------------------------------------

def prepare_utterance(x, mode="glottal", marks=None, f0=None, utt_id=""):
    """Features, marks and per-frame target waveforms for one signal.

    The target is the LPC residual of ``x`` (inverse-filtered with the
    frame's vocal tract predictor) in glottal mode and ``x`` itself in speech
    mode. Every 200 Hz frame takes the frame centered on its nearest mark.
    Returns ``(track, marks, frames, target_signal)``.
    """
    if mode not in ("glottal", "speech"):
        raise ValueError(f"mode must be glottal or speech, got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if f0 is None:
        f0 = estimate_f0(x)
    if marks is None:
        marks = dsp.detect_gci(x, f0)
    track = extract_features(x, marks=marks, f0=f0, utt_id=utt_id)
    if mode == "glottal":
        target = dsp.filter_time_varying(x, lsf_frames_to_lpc(track.vt_lsf), "inverse")
    else:
        target = x
    idx = dsp.marks_for_frames(marks, len(track))
    frames = dsp.extract_frames(target, marks.positions[idx]).astype(np.float32)
    return track, marks, frames, target


def prepare_dataset(wav_dir, out_dir, mode="glottal"):
    """Process every ``*.wav`` in ``wav_dir``; unreadable files are skipped and logged.

    Writes ``<id>.psgf``, ``<id>.marks``, ``<id>.npz`` (frames, f0) per
    utterance and ``manifest.txt`` listing the utterance ids.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = []
    for path in sorted(Path(wav_dir).glob("*.wav")):
        uid = path.stem
        try:
            x = dsp.read_wav(path)
            f0 = estimate_f0(x)
            track, marks, frames, _ = prepare_utterance(x, mode, f0=f0, utt_id=uid)
        except (ValueError, EOFError) as exc:
            log.warning("skipping %s: %s", path, exc)
            continue
        save_features(out / f"{uid}.psgf", track)
        dsp.write_marks(out / f"{uid}.marks", marks)
        np.savez(out / f"{uid}.npz", frames=frames, f0=f0.astype(np.float32))
        ids.append(uid)
    (out / "manifest.txt").write_text("".join(f"{i}\n" for i in ids))
    (out / "mode.txt").write_text(mode + "\n")
    return ids


def utterances_from_signals(signals, mode="glottal", marks=None, f0s=None):
    """In-memory counterpart of :func:`prepare_dataset`."""
    utts = []
    for i, x in enumerate(signals):
        m = None if marks is None else marks[i]
        f = None if f0s is None else f0s[i]
        track, _, frames, _ = prepare_utterance(x, mode, marks=m, f0=f, utt_id=f"utt{i:03d}")
        utts.append(Utterance(track.utt_id, track.frames, frames))
    return utts


# ---------------------------------------------------------------------------
# Synthesis
# ---------------------------------------------------------------------------

def derive_synthesis_marks(f0, voicing, length, hop=HOP, fs=SAMPLE_RATE):
    """Greedy mark placement: one period ``round(fs / F0)`` ahead when voiced, ``hop`` otherwise."""
    f0 = np.asarray(f0, dtype=np.float64)
    voicing = np.asarray(voicing, dtype=bool)
    pos, voi = [], []
    s = 0
    while s < length:
        k = min(s // hop, len(f0) - 1)
        if voicing[k] and f0[k] > 0:
            pos.append(s)
            voi.append(True)
            s += max(1, int(round(fs / np.clip(f0[k], dsp.F0_MIN, dsp.F0_MAX))))
        else:
            pos.append(s)
            voi.append(False)
            s += hop
    return GciMarks(np.array(pos, dtype=np.int64), np.array(voi, dtype=bool))


@torch.no_grad()
def generate_frames(nets, feats_norm, rng, chunk=CHUNK_FRAMES, overlap=CHUNK_OVERLAP):
    """Full-resolution generator output, one 512-sample frame per feature frame.

    Long inputs are processed in ``chunk``-frame windows whose outer
    ``overlap`` frames on each side are discarded (overlap-save).
    """
    n = len(feats_norm)
    core = chunk - 2 * overlap
    out = np.zeros((n, 512))
    dtype = next(nets.gen.parameters()).dtype
    for s in range(0, n, core):
        lo, hi = max(0, s - overlap), min(n, s + core + overlap)
        f = torch.from_numpy(np.ascontiguousarray(feats_norm[lo:hi])).to(dtype)[None]
        cond = nets.cond(f)
        x_hat = nets.gen(make_noise(1, hi - lo, rng, nets.cfg.seed_len, dtype), cond)[0]
        e = min(n, s + core)
        out[s:e] = x_hat[0, 0, s - lo: e - lo].double().numpy()
    return out


def synthesize(track, checkpoint=None, mode=None, rng=None, nets=None, norm=None):
    """Waveform from a :class:`FeatureTrack`.

    Either ``checkpoint`` (a path) or ``nets`` with ``norm = (mean, std)``
    or ``(mean, std, target_gain)`` must be given. Voiced marks take
    generated frames assembled by PSOLA; unvoiced frames become white noise
    at the local RMS of the generator's own output. In glottal mode the
    excitation is filtered through the vocal tract predictors from the
    features.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if checkpoint is not None:
        nets, mean, std, meta, tensors = load_model(checkpoint)
        gain = target_gain(tensors)
        ck_mode = meta.get("mode", "glottal")
        if mode is not None and mode != ck_mode:
            raise ValueError(f"checkpoint was trained in {ck_mode} mode, not {mode}")
        mode = ck_mode
    elif nets is None or norm is None:
        raise ValueError("need a checkpoint or networks with normalization statistics")
    else:
        mean, std, *rest = norm
        gain = rest[0] if rest else 1.0
    mode = mode or "glottal"
    if track.frames.shape[1] != nets.cfg.feature_dim:
        raise ValueError(f"features have {track.frames.shape[1]} dims, model expects {nets.cfg.feature_dim}")
    n_frames = len(track)
    length = n_frames * HOP
    if n_frames == 0:
        return np.zeros(0)
    feats = ((track.frames - mean) / std).astype(np.float32)
    gen = generate_frames(nets, feats, rng) / gain

    f0, voicing = track.f0_hz, track.voicing
    marks = derive_synthesis_marks(f0, voicing, length)
    frame_idx = np.minimum(marks.positions // HOP, n_frames - 1)
    exc = dsp.psola_assemble(gen[frame_idx], marks, length)

    for k in np.nonzero(~voicing)[0]:
        seg = slice(k * HOP, (k + 1) * HOP)
        rms = np.sqrt(np.mean(exc[seg] ** 2))
        exc[seg] = rms * rng.standard_normal(HOP)

    if mode == "glottal":
        y = dsp.filter_time_varying(exc, lsf_frames_to_lpc(track.vt_lsf), "synthesis")
    else:
        y = exc
    y = np.nan_to_num(y, nan=0.0, posinf=0.0, neginf=0.0)
    peak = np.max(np.abs(y)) if len(y) else 0.0
    if peak > PEAK:
        y = y * (PEAK / peak)
    return y


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    lsd_db: float = 0.0
    f0_rmse_hz: float = 0.0
    voicing_error_pct: float = 0.0
    per_utterance: list = field(default_factory=list)

    def as_dict(self):
        return {"lsd_db": self.lsd_db, "f0_rmse_hz": self.f0_rmse_hz,
                "voicing_error_pct": self.voicing_error_pct, "per_utterance": self.per_utterance}


def _log_spectra(x, n_fft=512, hop=HOP):
    x = np.asarray(x, dtype=np.float64)
    if len(x) < n_fft:
        x = np.pad(x, (0, n_fft - len(x)))
    n = 1 + (len(x) - n_fft) // hop
    idx = np.arange(n)[:, None] * hop + np.arange(n_fft)[None, :]
    mag = np.abs(np.fft.rfft(x[idx] * np.hanning(n_fft), axis=-1))
    return 20.0 * np.log10(np.maximum(mag, 1e-5))  # -100 dB floor


def log_spectral_distance(ref, syn):
    d = _log_spectra(ref) - _log_spectra(syn)
    return float(np.mean(np.sqrt(np.mean(d ** 2, axis=1))))


def evaluate_signals(ref, syn):
    n = min(len(ref), len(syn))
    ref, syn = np.asarray(ref[:n], float), np.asarray(syn[:n], float)
    f_ref, f_syn = estimate_f0(ref), estimate_f0(syn)
    v_ref, v_syn = f_ref > 0, f_syn > 0
    both = v_ref & v_syn
    rmse = float(np.sqrt(np.mean((f_ref[both] - f_syn[both]) ** 2))) if both.any() else 0.0
    verr = float(100.0 * np.mean(v_ref != v_syn)) if len(v_ref) else 0.0
    return {"lsd_db": log_spectral_distance(ref, syn), "f0_rmse_hz": rmse, "voicing_error_pct": verr}


def evaluate(reference, synthesized):
    """Pair reference and synthesized signals (arrays or WAV paths) and aggregate metrics."""
    if len(reference) != len(synthesized):
        raise ValueError(f"{len(reference)} references but {len(synthesized)} synthesized files")
    rows = []
    for r, s in zip(reference, synthesized):
        name = str(r) if isinstance(r, (str, Path)) else f"utt{len(rows):03d}"
        r = dsp.read_wav(r) if isinstance(r, (str, Path)) else r
        s = dsp.read_wav(s) if isinstance(s, (str, Path)) else s
        row = evaluate_signals(r, s)
        row["utterance"] = name
        rows.append(row)
    if not rows:
        return EvalReport()
    mean = lambda k: float(np.mean([r[k] for r in rows]))  # noqa: E731
    return EvalReport(mean("lsd_db"), mean("f0_rmse_hz"), mean("voicing_error_pct"), rows)


def pair_files(ref_dir, syn_dir):
    """Match ``*.wav`` files by name; unmatched files are an error."""
    refs = {p.name: p for p in Path(ref_dir).glob("*.wav")}
    syns = {p.name: p for p in Path(syn_dir).glob("*.wav")}
    if set(refs) != set(syns):
        missing = sorted(set(refs) ^ set(syns))
        raise ValueError(f"unpaired files: {', '.join(missing)}")
    names = sorted(refs)
    return [refs[n] for n in names], [syns[n] for n in names]
