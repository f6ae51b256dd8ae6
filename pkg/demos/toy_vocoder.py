"""
Training a toy vocoder and steering its pitch
=============================================

Train the tiny configuration on synthetic pulse-train vowels, then
synthesize the same features at two target F0 values. Pass an iteration
count on the command line (default 300; the acceptance run uses 2000).

At these budgets the generator has not yet learned GCI-centered pulses, so
the detected F0 does not reliably follow the target (see the README).
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from psgan import dsp, features, toy, training, vocoder
from psgan.model import NetConfig

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 300
out = Path(tempfile.mkdtemp())

# 60 s of constant-F0 vowels at 100, 125 and 160 Hz with their true marks
signals, marks, f0s = toy.toy_corpus(total_seconds=60.0, seed=0)
utts = vocoder.utterances_from_signals(signals, "glottal", marks, f0s)
data = training.TrainingData(utts)

cfg = training.TrainConfig(out_dir=str(out), iterations=iterations, segment_frames=16, seed=7,
                           deterministic=True, checkpoint_every=iterations, net=NetConfig.tiny(32))


def report(it, m):
    if it % max(1, iterations // 10) == 0:
        print(f"iter {it:5d}  L_FFT {m['L_FFT']:.4f}  L_D^W {m['L_D_W']:+.4f}  GP {m['GP']:.4f}")


training.train(cfg, data, progress=report)
ckpt = out / f"ckpt_{iterations:07d}.psgc"

# features of an unseen 125 Hz vowel, re-targeted to 100 and 160 Hz
speech, _, m, f0 = toy.synthetic_vowel(1.0, 125.0, np.random.default_rng(99))
track = features.extract_features(speech, marks=m, f0=f0)
for target in (100.0, 160.0):
    shifted = features.FeatureTrack(track.frames.copy())
    shifted.frames[:, features.F0_MEL] = features.hz_to_mel(target)
    y = vocoder.synthesize(shifted, checkpoint=ckpt, rng=np.random.default_rng(1))
    est = features.estimate_f0(y)
    dsp.write_wav(out / f"toy_{int(target)}hz.wav", y)
    print(f"target {target:.0f} Hz -> detected {est[est > 0].mean():.1f} Hz")
print("outputs in", out)
