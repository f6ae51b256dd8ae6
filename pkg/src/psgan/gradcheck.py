"""Finite-difference verification of every differentiable path, in float64.

Small ops are checked element by element with :func:`psgan.nn.grad_check`.
Whole networks have too many parameters for that, so they get a few tensors
element-wise plus random directional derivatives over all parameters.
"""

from __future__ import annotations

import numpy as np
import torch

from . import nn
from .model import NetConfig, Networks, SCALE_LENGTHS, make_noise
from .training import _input_grad_norms, fft_loss, gradient_penalty, interpolate, r1_penalty, wgan_d_loss

D64 = torch.float64
OP_TOL = 1e-4
PENALTY_TOL = 1e-3


def directional_check(fn, params, n_dirs=3, h=1e-6, seed=0):
    """Worst relative error of autograd directional derivatives vs central differences."""
    params = list(params)
    grads = torch.autograd.grad(fn(), params, allow_unused=True)
    g = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [torch.randn(p.shape, generator=g, dtype=p.dtype) for p in params]
        auto = sum(float((gr * d).sum()) for gr, d in zip(grads, dirs) if gr is not None)
        with torch.no_grad():
            for p, d in zip(params, dirs):
                p.add_(h * d)
        fp = float(fn().detach())
        with torch.no_grad():
            for p, d in zip(params, dirs):
                p.sub_(2 * h * d)
        fm = float(fn().detach())
        with torch.no_grad():
            for p, d in zip(params, dirs):
                p.add_(h * d)
        num = (fp - fm) / (2 * h)
        worst = max(worst, abs(auto - num) / max(abs(auto), abs(num), 1e-300))
    return worst


def _rand(gen, *shape):
    return torch.randn(*shape, generator=gen, dtype=D64)


def op_checks(seed=0):
    g = torch.Generator().manual_seed(seed)
    x, w, b = _rand(g, 2, 2, 4, 8), _rand(g, 3, 2, 3, 7), _rand(g, 3)
    wts = _rand(g, 2, 3, 4, 8)
    yield "conv2d", nn.grad_check(lambda: (nn.conv2d(x, w, b) * wts).sum(), [x, w, b])
    yield "conv2d strided", nn.grad_check(
        lambda: (nn.conv2d(x, w, b, stride=(1, 2)) * wts[..., :4]).sum(), [x, w, b])
    wd = _rand(g, 3, 2, 3, 1)
    yield "conv2d dilated", nn.grad_check(
        lambda: (nn.conv2d(x, wd, b, dilation=(2, 1)) * wts).sum(), [x, wd, b])
    a, c = _rand(g, 2, 3, 2, 5), _rand(g, 2, 3, 2, 5)
    wa = _rand(g, 2, 3, 2, 5)
    yield "gated_activation", nn.grad_check(lambda: (nn.gated_activation(a, c) * wa).sum(), [a, c])
    u = _rand(g, 1, 2, 3, 8)
    wu = _rand(g, 1, 2, 3, 16)
    yield "upsample_linear", nn.grad_check(lambda: (nn.upsample_linear(u) * wu).sum(), [u])
    yield "downsample_mean", nn.grad_check(lambda: (nn.downsample_mean(u) * wu[..., :4]).sum(), [u])
    s = _rand(g, 3, 2, 2, 4)
    ws = _rand(g, 3, 3, 2, 4)
    yield "batch_stddev_feature", nn.grad_check(lambda: (nn.batch_stddev_feature(s) * ws).sum(), [s])
    f1, f2 = _rand(g, 1, 1, 2, 512), _rand(g, 1, 1, 2, 512)
    yield "fft_loss", nn.grad_check(lambda: fft_loss(f1, f2), [f1])


def _net_inputs(nets, frames, seed):
    rng = np.random.default_rng(seed)
    feats = torch.from_numpy(rng.standard_normal((2, frames, nets.cfg.feature_dim)))
    real = [torch.from_numpy(0.3 * rng.standard_normal((2, 1, frames, L))) for L in SCALE_LENGTHS]
    return feats, real, make_noise(2, frames, rng, nets.cfg.seed_len, D64)


def network_checks(seed=0, channels=4, frames=3):
    nets = Networks.create(NetConfig.tiny(channels), seed=seed, dtype=D64)
    feats, real, noise = _net_inputs(nets, frames, seed)

    def gc_loss():
        cond = nets.cond(feats)
        fake = nets.gen(noise, cond)
        return fft_loss(fake[0], real[0]) - nets.disc(fake, cond).mean()

    gc = nets.gc_params()
    yield "C->G->losses (elementwise)", nn.grad_check(
        gc_loss, [nets.gen.heads[-1].weight, nets.gen.seed.bias, nets.cond.heads[0].bias]), OP_TOL
    yield "C->G->losses (directional)", directional_check(gc_loss, gc, seed=seed), OP_TOL

    with torch.no_grad():
        cond = [c.detach() for c in nets.cond(feats)]
        fake = [f.detach() for f in nets.gen(noise, cond)]

    def d_score():
        return wgan_d_loss(nets.disc(real, cond), nets.disc(fake, cond))

    dp = nets.d_params()
    yield "D score (elementwise)", nn.grad_check(d_score, [nets.disc.head.weight, nets.disc.blocks[8].bias]), OP_TOL
    yield "D score (directional)", directional_check(d_score, dp, seed=seed), OP_TOL

    # a fresh critic's input gradients are tiny; rescale its head so the
    # one-sided penalty is active and clear of its kink at norm 1
    eps = torch.tensor([0.3, 0.7], dtype=D64)
    sq, _ = _input_grad_norms(nets.disc, [t.detach() for t in interpolate(real, fake, eps)], cond)
    with torch.no_grad():
        nets.disc.head.weight.mul_(2.0 / float(sq.sqrt().mean()))
    gp = lambda: gradient_penalty(nets.disc, real, fake, cond, eps)  # noqa: E731
    r1 = lambda: r1_penalty(nets.disc, real, cond)  # noqa: E731
    yield "GP inactive (must be 0)", float(gp().detach() == 0.0), 0.5
    yield "GP second order (elementwise)", nn.grad_check(gp, [nets.disc.head.weight], h=1e-6), PENALTY_TOL
    yield "GP second order (directional)", directional_check(gp, dp, seed=seed), PENALTY_TOL
    yield "R1 second order (elementwise)", nn.grad_check(r1, [nets.disc.head.weight], h=1e-6), PENALTY_TOL
    yield "R1 second order (directional)", directional_check(r1, dp, seed=seed), PENALTY_TOL


def run_checks(seed=0):
    """Yield ``(name, relative_error, tolerance)``; tolerance None means the caller's default."""
    for name, err in op_checks(seed):
        yield name, err, None
    yield from network_checks(seed)
