"""
Pitch-synchronous analysis and resynthesis
==========================================

Walk through the DSP front end on a synthetic vowel: LPC and line spectral
frequencies, glottal closure instants, GCI-centered frames and PSOLA
reassembly.
"""

import numpy as np

from psgan import dsp
from psgan.toy import synthetic_vowel, vowel_filter

# a 1 s vowel at 125 Hz: decaying pulses through four formant resonators
rng = np.random.default_rng(0)
speech, excitation, true_marks, f0_track = synthetic_vowel(1.0, 125.0, rng)
print(f"{len(speech)} samples, peak {np.max(np.abs(speech)):.2f}")

# the vowel filter as LSFs; pairs of LSFs straddle each formant
a = vowel_filter()
lsf = dsp.lpc_to_lsf(a)
print("LSFs (Hz):", np.round(lsf * dsp.SAMPLE_RATE / (2 * np.pi)).astype(int))
print("round trip error:", np.max(np.abs(dsp.lsf_to_lpc(lsf) - a)))

# glottal closure instants from the LP residual, guided by the F0 track
marks = dsp.detect_gci(speech, f0_track)
voiced = marks.positions[marks.voiced]
print(f"{len(voiced)} voiced marks, mean spacing {np.mean(np.diff(voiced)):.1f} samples (expect 128)")

# 512-sample frames centered on each mark, then PSOLA back to a signal
frames = dsp.extract_frames(speech, marks.positions)
rebuilt = dsp.psola_assemble(frames, marks, len(speech))
inner = slice(marks.positions[0], marks.positions[-1])
err = speech[inner] - rebuilt[inner]
print(f"copy-synthesis SNR: {10 * np.log10(np.sum(speech[inner] ** 2) / max(np.sum(err ** 2), 1e-300)):.1f} dB")

# every frame also comes as a 5-level pyramid, 512 down to 32 samples
print("pyramid lengths:", [len(level) for level in dsp.build_pyramid(frames[10])])
