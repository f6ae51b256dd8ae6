"""
Acoustic features and their file format
=======================================

Extract the 47-dimensional conditioning features, write the binary
``.psgf`` file, read it back and dump a CSV for inspection.
"""

import tempfile
from pathlib import Path

import numpy as np

from psgan import features
from psgan.toy import synthetic_vowel

speech, _, marks, _ = synthetic_vowel(0.5, 160.0)
track = features.extract_features(speech, marks=marks, utt_id="vowel160")
print(f"{len(track)} frames x {track.frames.shape[1]} dims")

# vocal tract LSFs, glottal LSFs, band HNRs, mel F0 and the voicing flag
k = len(track) // 2
print("vt LSF[:5]   ", np.round(track.vt_lsf[k, :5], 3))
print("glottal LSF  ", np.round(track.glot_lsf[k, :3], 3), "...")
print("HNR (dB)     ", np.round(track.hnr[k], 1))
print("F0 (Hz)      ", round(float(track.f0_hz[k]), 2), " voiced:", bool(track.voicing[k]))

out = Path(tempfile.mkdtemp())
features.save_features(out / "vowel160.psgf", track)
back = features.load_features(out / "vowel160.psgf")
print("bit-exact reload:", back.frames.tobytes() == track.frames.tobytes())
features.export_csv(out / "vowel160.csv", track)
print("csv header:", (out / "vowel160.csv").read_text().splitlines()[0][:60], "...")
