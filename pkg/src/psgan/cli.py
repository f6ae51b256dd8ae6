"""Command-line entry point: ``psgan <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("psgan")


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="INI config file (see configs/toy.cfg)")
    p.add_argument("--seed", type=int, help="random seed (unsigned 64-bit)")
    p.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible execution")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser():
    common = _common()
    parser = argparse.ArgumentParser(prog="psgan", description="Pitch-synchronous GAN vocoder tools.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("extract-features", parents=[common], help="analyze one WAV into a .psgf feature file")
    p.add_argument("--wav", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--marks", help="external GCI mark file to use instead of detection")
    p.add_argument("--csv", help="also write a CSV dump of the features")

    p = sub.add_parser("prepare-dataset", parents=[common], help="features, marks and target frames for a WAV directory")
    p.add_argument("--wav-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--mode", choices=("glottal", "speech"))

    p = sub.add_parser("train", parents=[common], help="train from a prepared dataset")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--iterations", type=int, help="override the configured iteration count")
    p.add_argument("--dataset", help="override the configured dataset directory")
    p.add_argument("--out-dir", help="override the configured output directory")

    p = sub.add_parser("synthesize", parents=[common], help="waveform from a feature file and a checkpoint")
    p.add_argument("--features", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("glottal", "speech"))
    p.add_argument("--f0-scale", type=float, default=1.0, help="multiply the F0 track before synthesis")

    p = sub.add_parser("evaluate", parents=[common], help="objective metrics for paired WAV directories")
    p.add_argument("--ref-dir", required=True)
    p.add_argument("--syn-dir", required=True)
    p.add_argument("--json", help="write the full report here")

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference checks of every differentiable op")
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def _config_mode(path):
    if not path:
        return None
    from .training import TrainConfig

    return TrainConfig.from_file(path).mode


def cmd_extract_features(args):
    from . import dsp, features

    x = dsp.read_wav(args.wav)
    marks = dsp.read_marks(args.marks) if args.marks else None
    track = features.extract_features(x, marks=marks, utt_id=Path(args.wav).stem)
    features.save_features(args.out, track)
    if args.csv:
        features.export_csv(args.csv, track)
    print(f"{args.out}: {len(track)} frames")
    return 0


def cmd_prepare_dataset(args):
    from . import vocoder

    mode = args.mode or _config_mode(args.config) or "glottal"
    ids = vocoder.prepare_dataset(args.wav_dir, args.out_dir, mode)
    print(f"prepared {len(ids)} utterances ({mode} mode) in {args.out_dir}")
    return 0 if ids else 1


def cmd_train(args):
    from .training import TrainConfig, train

    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.deterministic:
        cfg.deterministic = True
    if args.iterations is not None:
        cfg.iterations = args.iterations
    if args.dataset:
        cfg.dataset = args.dataset
    if args.out_dir:
        cfg.out_dir = args.out_dir
    if not cfg.dataset:
        raise ValueError("no dataset given (config [data] dataset or --dataset)")
    every = max(1, cfg.iterations // 20)

    def progress(it, m):
        if it % every == 0:
            log.info("iter %d  %s", it, "  ".join(f"{k}={v:.4g}" for k, v in m.items()))

    train(cfg, resume=args.resume, progress=progress)
    print(f"trained {cfg.iterations} iterations, outputs in {cfg.out_dir}")
    return 0


def cmd_synthesize(args):
    from . import dsp, features, nn, vocoder

    if args.deterministic:
        nn.set_deterministic()
    track = features.load_features(args.features)
    if args.f0_scale != 1.0:
        f0 = np.clip(track.f0_hz * args.f0_scale, dsp.F0_MIN, dsp.F0_MAX)
        track.frames[:, features.F0_MEL] = features.hz_to_mel(f0)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    y = vocoder.synthesize(track, checkpoint=args.checkpoint, mode=args.mode, rng=rng)
    dsp.write_wav(args.out, y)
    print(f"{args.out}: {len(y) / dsp.SAMPLE_RATE:.2f} s")
    return 0


def cmd_evaluate(args):
    from . import vocoder

    refs, syns = vocoder.pair_files(args.ref_dir, args.syn_dir)
    report = vocoder.evaluate(refs, syns)
    print(f"LSD {report.lsd_db:.3f} dB   F0 RMSE {report.f0_rmse_hz:.3f} Hz   "
          f"voicing error {report.voicing_error_pct:.2f} %   ({len(refs)} utterances)")
    if args.json:
        Path(args.json).write_text(json.dumps(report.as_dict(), indent=2, default=str))
    return 0


def cmd_grad_check(args):
    from .gradcheck import run_checks

    worst_fail = 0
    for name, err, tol in run_checks(seed=args.seed or 0):
        tol = args.tolerance if tol is None else tol
        ok = err < tol
        worst_fail += not ok
        print(f"{'ok  ' if ok else 'FAIL'} {name:<34} {err:.3e} (tol {tol:.0e})")
    return 1 if worst_fail else 0


COMMANDS = {
    "extract-features": cmd_extract_features,
    "prepare-dataset": cmd_prepare_dataset,
    "train": cmd_train,
    "synthesize": cmd_synthesize,
    "evaluate": cmd_evaluate,
    "grad-check": cmd_grad_check,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("psgan: error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 2
    if args.deterministic:
        from .nn import set_deterministic

        set_deterministic()
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"psgan {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
