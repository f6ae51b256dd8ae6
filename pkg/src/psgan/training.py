"""Adversarial objectives and the alternating training loop.

The discriminator minimizes ``L_D = L_D^W + lambda_gp * GP + lambda_r1 * R1``;
the generator and conditioning model jointly minimize
``L_GC = L_G^W + lambda_fft * L_FFT``. One iteration is one D update
followed by one G+C update.
"""

from __future__ import annotations

import configparser
import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import dsp, nn
from .features import DIM, FeatureTrack, load_features
from .model import (NetConfig, Networks, SCALE_LENGTHS, config_from_dict, config_to_dict,
                    load_checkpoint, load_network_tensors, make_noise, network_tensors,
                    save_checkpoint)

log = logging.getLogger(__name__)

MAG_EPS = 1e-20
# training targets are scaled by one global gain so their largest sample sits
# here, well inside the generator's tanh range; synthesis divides it back out
TARGET_PEAK = 0.5
METRIC_COLUMNS = ("iter", "L_D_W", "GP", "R1", "L_G_W", "L_FFT")


class TrainingError(RuntimeError):
    pass


@dataclass
class LossWeights:
    fft: float = 1.0
    gp: float = 10.0
    r1: float = 1.0

    def __post_init__(self):
        if min(self.fft, self.gp, self.r1) < 0:
            raise ValueError("loss weights must be non-negative")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def wgan_d_loss(score_real, score_fake):
    if score_real.shape != score_fake.shape:
        raise ValueError("real and fake scores differ in shape")
    return score_fake.mean() - score_real.mean()


def wgan_g_loss(score_fake, score_real=None):
    """Generator Wasserstein loss.

    Without ``score_real`` the real-data term (constant w.r.t. G) is dropped;
    with it the result is exactly ``-wgan_d_loss(score_real, score_fake)``.
    """
    if score_real is None:
        return -score_fake.mean()
    return -wgan_d_loss(score_real, score_fake)


def _input_grad_norms(disc, pyramid, cond):
    """Per-item Euclidean norm of dD/dx over all scales jointly (graph kept)."""
    pyramid = [x if x.requires_grad else x.detach().requires_grad_(True) for x in pyramid]
    score = disc(pyramid, cond)
    grads = torch.autograd.grad(score.sum(), pyramid, create_graph=True, allow_unused=True)
    sq = 0
    for x, g in zip(pyramid, grads):
        if g is not None:
            sq = sq + (g ** 2).flatten(1).sum(1)
    if not torch.is_tensor(sq):
        sq = torch.zeros(pyramid[0].shape[0], dtype=pyramid[0].dtype)
    if not bool(torch.isfinite(sq).all()):
        raise TrainingError("non-finite discriminator input gradient")
    return sq, score


def interpolate(x, x_hat, eps):
    """Points on the segment between real and fake pyramids; one eps per item shared by all scales."""
    e = eps.reshape(-1, 1, 1, 1)
    return [e * a + (1.0 - e) * b for a, b in zip(x, x_hat)]


def gradient_penalty(disc, x, x_hat, cond, eps):
    """One-sided penalty ``mean(max(0, |grad D(x_tilde)| - 1)^2)``."""
    x_tilde = [t.detach().requires_grad_(True) for t in interpolate(x, x_hat, eps)]
    sq, _ = _input_grad_norms(disc, x_tilde, cond)
    # sqrt at zero has an infinite derivative; the clamp below masks that region anyway
    norm = torch.sqrt(torch.where(sq > 0, sq, torch.ones_like(sq))) * (sq > 0)
    return (torch.clamp(norm - 1.0, min=0.0) ** 2).mean()


def r1_penalty(disc, x, cond, return_score=False):
    """``mean(|grad_x D(x)|^2)`` at real samples."""
    sq, score = _input_grad_norms(disc, x, cond)
    return (sq.mean(), score) if return_score else sq.mean()


def fft_magnitude(x):
    """|rfft| along the sample axis, differentiable with a zero-safe square root."""
    X = torch.fft.rfft(x, dim=-1)
    return torch.sqrt(X.real ** 2 + X.imag ** 2 + MAG_EPS)


def fft_loss(x_hat_full, x_full):
    """Mean squared difference of full-resolution FFT magnitudes."""
    if x_hat_full.shape[-1] != SCALE_LENGTHS[0] or x_full.shape != x_hat_full.shape:
        raise ValueError("FFT loss applies to matching full-resolution frames only")
    return ((fft_magnitude(x_full) - fft_magnitude(x_hat_full)) ** 2).mean()


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

@dataclass
class Utterance:
    utt_id: str
    features: np.ndarray  # (F, DIM) float32, raw
    frames: np.ndarray  # (F, 512) float32 target frames, one per 200 Hz frame


@dataclass
class TrainBatch:
    features: torch.Tensor  # (B, T, DIM) normalized
    real: list  # pyramid levels, each (B, 1, T, L_i)

    @property
    def frames(self):
        return self.features.shape[1]


class TrainingData:
    """Utterances with aligned features and target frames, plus z-score statistics."""

    def __init__(self, utterances, mean=None, std=None, gain=None):
        self.utterances = [u for u in utterances if len(u.features)]
        if not self.utterances:
            raise TrainingError("empty dataset")
        for u in self.utterances:
            if u.features.shape != (len(u.frames), DIM) or u.frames.shape[1:] != (SCALE_LENGTHS[0],):
                raise TrainingError(f"utterance {u.utt_id}: features and frames are misaligned")
        if mean is None:
            allf = np.concatenate([u.features for u in self.utterances]).astype(np.float64)
            mean = allf.mean(0)
            std = allf.std(0)
            std = np.where(std > 1e-6, std, 1.0)
        self.mean = np.asarray(mean, dtype=np.float32)
        self.std = np.asarray(std, dtype=np.float32)
        if gain is None:
            peak = max(float(np.max(np.abs(u.frames))) if u.frames.size else 0.0 for u in self.utterances)
            gain = TARGET_PEAK / peak if peak > 0 else 1.0
        self.gain = float(np.float32(gain))
        self._pyr = [[(self.gain * lvl).astype(np.float32)
                      for lvl in dsp.build_pyramid(u.frames.astype(np.float64))]
                     for u in self.utterances]

    def set_gain(self, gain):
        """Rescale the stored targets to a new global gain (used on resume)."""
        gain = float(np.float32(gain))
        if gain != self.gain:
            k = gain / self.gain
            self._pyr = [[(k * lvl).astype(np.float32) for lvl in levels] for levels in self._pyr]
            self.gain = gain

    def normalize(self, feats):
        return ((np.asarray(feats, dtype=np.float32) - self.mean) / self.std).astype(np.float32)

    @classmethod
    def load(cls, dataset_dir):
        d = Path(dataset_dir)
        ids = [ln.strip() for ln in (d / "manifest.txt").read_text().splitlines() if ln.strip()]
        utts = []
        for uid in ids:
            feats = load_features(d / f"{uid}.psgf").frames
            with np.load(d / f"{uid}.npz") as z:
                frames = z["frames"].astype(np.float32)
            utts.append(Utterance(uid, feats, frames))
        return cls(utts)

    def sample(self, rng, segment_frames, batch_size=1):
        starts = [len(u.features) - segment_frames + 1 for u in self.utterances]
        total = sum(max(s, 0) for s in starts)
        if total <= 0:
            raise TrainingError(f"no utterance has {segment_frames} frames")
        feats, levels = [], [[] for _ in SCALE_LENGTHS]
        for _ in range(batch_size):
            r = int(rng.integers(total))
            for i, s in enumerate(starts):
                if s <= 0:
                    continue
                if r < s:
                    break
                r -= s
            sl = slice(r, r + segment_frames)
            feats.append(self.normalize(self.utterances[i].features[sl]))
            for k, lvl in enumerate(self._pyr[i]):
                levels[k].append(lvl[sl])
        real = [torch.from_numpy(np.stack(lv)[:, None]) for lv in levels]
        return TrainBatch(torch.from_numpy(np.stack(feats)), real)


# ---------------------------------------------------------------------------
# Training step and loop
# ---------------------------------------------------------------------------

@dataclass
class Optimizers:
    d: nn.AdamState
    gc: nn.AdamState

    @classmethod
    def create(cls, nets, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        kw = dict(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        return cls(nn.AdamState.for_params(nets.d_params(), **kw),
                   nn.AdamState.for_params(nets.gc_params(), **kw))


def _finite(*vals):
    return all(math.isfinite(float(v)) for v in vals)


def train_step(nets, batch, opts, weights, rng):
    """One D update followed by one joint G+C update. Returns the loss components."""
    B, T = batch.features.shape[:2]
    dtype = batch.features.dtype
    seed_len = nets.cfg.seed_len

    # discriminator phase
    with torch.no_grad():
        cond = nets.cond(batch.features)
        fake = nets.gen(make_noise(B, T, rng, seed_len, dtype), cond)
    eps = torch.from_numpy(rng.uniform(0.0, 1.0, B)).to(dtype)
    real = [x.detach().requires_grad_(True) for x in batch.real]
    try:
        r1, s_real = r1_penalty(nets.disc, real, cond, return_score=True)
        s_fake = nets.disc(fake, cond)
        d_w = wgan_d_loss(s_real, s_fake)
        gp = gradient_penalty(nets.disc, batch.real, fake, cond, eps)
        loss_d = d_w + weights.gp * gp + weights.r1 * r1
        metrics = {"L_D_W": d_w.item(), "GP": gp.item(), "R1": r1.item()}
    except TrainingError as exc:
        log.warning("discriminator step aborted: %s", exc)
        loss_d = None
        metrics = {"L_D_W": math.nan, "GP": math.nan, "R1": math.nan}
    if loss_d is None:
        pass
    elif _finite(loss_d.item()):
        grads = torch.autograd.grad(loss_d, nets.d_params(), allow_unused=True)
        nn.adam_step(nets.d_params(), list(grads), opts.d)
    else:
        log.warning("non-finite discriminator loss, step aborted")

    # generator + conditioning phase
    cond = nets.cond(batch.features)
    fake = nets.gen(make_noise(B, T, rng, seed_len, dtype), cond)
    g_w = wgan_g_loss(nets.disc(fake, cond))
    l_fft = fft_loss(fake[0], batch.real[0])
    loss_gc = g_w + weights.fft * l_fft
    metrics.update({"L_G_W": g_w.item(), "L_FFT": l_fft.item()})
    if _finite(loss_gc.item()):
        grads = torch.autograd.grad(loss_gc, nets.gc_params(), allow_unused=True)
        nn.adam_step(nets.gc_params(), list(grads), opts.gc)
    else:
        log.warning("non-finite generator loss, step aborted")
    return metrics


@dataclass
class TrainConfig:
    dataset: str = ""
    out_dir: str = "run"
    mode: str = "glottal"
    iterations: int = 100_000
    segment_frames: int = 150
    batch_size: int = 1
    seed: int = 0
    deterministic: bool = False
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    lambda_fft: float = 1.0
    lambda_gp: float = 10.0
    lambda_r1: float = 1.0
    checkpoint_every: int = 1000
    net: NetConfig = field(default_factory=NetConfig)

    @property
    def weights(self):
        return LossWeights(self.lambda_fft, self.lambda_gp, self.lambda_r1)

    @classmethod
    def from_file(cls, path):
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        if not parser.read(path):
            raise FileNotFoundError(path)
        base = Path(path).resolve().parent
        cfg = cls()
        known = {f.name: f.type for f in fields(cls) if f.name != "net"}
        for section in parser.sections():
            if section == "model":
                items = dict(parser.items(section))
                merged = config_to_dict(cfg.net)
                # the width shorthand goes first so explicit keys override it
                if "channels" in items:
                    ch = int(items.pop("channels"))
                    merged.update(cond_channels=ch, cond_out=ch, gen_channels=ch, disc_channels=ch)
                for key, val in items.items():
                    if key not in merged:
                        raise ValueError(f"{path}: unknown option {key!r} in [model]")
                    if key in ("dilations", "kernel"):
                        merged[key] = tuple(int(v) for v in val.replace(",", " ").split())
                    else:
                        merged[key] = int(val)
                cfg.net = NetConfig(**merged)
                continue
            for key, val in parser.items(section):
                if key not in known:
                    raise ValueError(f"{path}: unknown option {key!r} in [{section}]")
                cur = getattr(cfg, key)
                if isinstance(cur, bool):
                    val = parser.getboolean(section, key)
                elif isinstance(cur, int):
                    val = int(val)
                elif isinstance(cur, float):
                    val = float(val)
                setattr(cfg, key, val)
        for key in ("dataset", "out_dir"):
            v = getattr(cfg, key)
            if v and not Path(v).is_absolute():
                setattr(cfg, key, str(base / v))
        if cfg.mode not in ("glottal", "speech"):
            raise ValueError(f"mode must be glottal or speech, got {cfg.mode!r}")
        return cfg

    def to_dict(self):
        d = asdict(self)
        d["net"] = config_to_dict(self.net)
        return d


def _adam_tensors(prefix, names, state):
    out = {}
    for n, m, v in zip(names, state.m, state.v):
        out[f"{prefix}.m.{n}"] = m.detach().cpu().numpy().astype(np.float32)
        out[f"{prefix}.v.{n}"] = v.detach().cpu().numpy().astype(np.float32)
    return out


def _param_names(nets):
    d = [f"disc.{n}" for n, _ in nets.disc.named_parameters()]
    gc = [f"cond.{n}" for n, _ in nets.cond.named_parameters()] + [f"gen.{n}" for n, _ in nets.gen.named_parameters()]
    return d, gc


def save_training_state(path, nets, opts, data, cfg, iteration, rng):
    tensors = network_tensors(nets)
    tensors["norm.mean"] = data.mean
    tensors["norm.std"] = data.std
    tensors["norm.gain"] = np.array([data.gain], dtype=np.float32)
    d_names, gc_names = _param_names(nets)
    tensors.update(_adam_tensors("opt.d", d_names, opts.d))
    tensors.update(_adam_tensors("opt.gc", gc_names, opts.gc))
    meta = {
        "net": config_to_dict(nets.cfg),
        "mode": cfg.mode,
        "train": cfg.to_dict(),
        "iteration": int(iteration),
        "rng": rng.bit_generator.state,
        "opt": {k: {"step": s.step, "skipped": s.skipped} for k, s in (("d", opts.d), ("gc", opts.gc))},
    }
    save_checkpoint(path, tensors, meta)


def load_model(path, dtype=torch.float32):
    """Networks plus normalization statistics and metadata from a checkpoint."""
    tensors, meta = load_checkpoint(path)
    nets = Networks.create(config_from_dict(meta["net"]), dtype=dtype)
    load_network_tensors(nets, tensors)
    return nets, tensors["norm.mean"], tensors["norm.std"], meta, tensors


def target_gain(tensors):
    """The training-target gain stored in a checkpoint (1 for older files)."""
    g = tensors.get("norm.gain")
    return float(g[0]) if g is not None else 1.0


def _restore_opts(opts, tensors, meta, nets):
    d_names, gc_names = _param_names(nets)
    for key, names, st in (("d", d_names, opts.d), ("gc", gc_names, opts.gc)):
        for i, n in enumerate(names):
            st.m[i].copy_(torch.from_numpy(tensors[f"opt.{key}.m.{n}"]))
            st.v[i].copy_(torch.from_numpy(tensors[f"opt.{key}.v.{n}"]))
        st.step = meta["opt"][key]["step"]
        st.skipped = meta["opt"][key]["skipped"]


def _fmt(v):
    return repr(float(v))


def train(cfg, data=None, resume=None, progress=None):
    """Run the alternating loop; writes ``metrics.csv`` and checkpoints into ``cfg.out_dir``.

    Returns the trained networks. ``resume`` is a checkpoint path; training
    continues after the iteration stored there.
    """
    if cfg.deterministic:
        nn.set_deterministic(cfg.seed)
    if data is None:
        data = TrainingData.load(cfg.dataset)
    if max(len(u.features) for u in data.utterances) < cfg.segment_frames:
        raise TrainingError(f"dataset has no utterance of {cfg.segment_frames} frames")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    nets = Networks.create(cfg.net, seed=cfg.seed)
    opts = Optimizers.create(nets, cfg.lr, cfg.beta1, cfg.beta2)
    start = 0
    metrics_path = out / "metrics.csv"
    if resume is not None:
        nets, mean, std, meta, tensors = load_model(resume)
        opts = Optimizers.create(nets, cfg.lr, cfg.beta1, cfg.beta2)
        with torch.no_grad():
            _restore_opts(opts, tensors, meta, nets)
        data.mean, data.std = mean, std
        data.set_gain(target_gain(tensors))
        rng.bit_generator.state = meta["rng"]
        start = meta["iteration"]
        mode = "a"
        if metrics_path.exists():
            # drop rows logged after the checkpoint so the log stays one row per iteration
            with open(metrics_path, newline="") as f:
                rows = [r for r in csv.reader(f)]
            keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) <= start]
            with open(metrics_path, "w", newline="") as f:
                csv.writer(f, lineterminator="\n").writerows(keep)
        else:
            mode = "w"
    else:
        mode = "w"
    weights = cfg.weights
    with open(metrics_path, mode, newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        if mode == "w":
            writer.writerow(METRIC_COLUMNS)
        for it in range(start + 1, cfg.iterations + 1):
            batch = data.sample(rng, cfg.segment_frames, cfg.batch_size)
            m = train_step(nets, batch, opts, weights, rng)
            writer.writerow([it] + [_fmt(m[c]) for c in METRIC_COLUMNS[1:]])
            f.flush()
            if progress is not None:
                progress(it, m)
            if it % cfg.checkpoint_every == 0 or it == cfg.iterations:
                save_training_state(out / f"ckpt_{it:07d}.psgc", nets, opts, data, cfg, it, rng)
    return nets


def read_metrics(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return {c: np.array([float(r[c]) for r in rows]) for c in METRIC_COLUMNS}
