"""Differentiable kernels used by the three networks, plus Adam and a
finite-difference gradient checker.

Tensors are ``(batch, channels, frames, samples)``. Reverse-mode (and
second-order) differentiation is delegated to torch autograd; every op here
is composed from primitives whose backward pass is itself differentiable,
which the gradient penalties rely on.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)


def set_deterministic(seed=None):
    """Single-threaded, deterministic torch execution."""
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)
    if seed is not None:
        torch.manual_seed(seed)


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------

def conv2d(x, weight, bias=None, stride=(1, 1), padding="same", dilation=(1, 1)):
    """2-D cross-correlation over (frames, samples) with zero padding.

    ``padding="same"`` pads ``dilation * (k - 1) // 2`` on each side, so
    with stride ``s`` the output length is ``ceil(L / s)``; ``"valid"`` pads
    nothing.
    """
    if x.dim() != 4 or weight.dim() != 4:
        raise ValueError(f"expected 4-D input and kernel, got {tuple(x.shape)} and {tuple(weight.shape)}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"bias shape {tuple(bias.shape)} does not match {weight.shape[0]} output channels")
    kh, kw = weight.shape[2:]
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("same padding needs odd kernel sizes")
        pad = (dilation[0] * (kh - 1) // 2, dilation[1] * (kw - 1) // 2)
    elif padding == "valid":
        pad = (0, 0)
    else:
        raise ValueError(f"unknown padding {padding!r}")
    return F.conv2d(x, weight, bias, stride=stride, padding=pad, dilation=dilation)


def gated_activation(a, b):
    """tanh(a) * sigmoid(b)."""
    if a.shape != b.shape:
        raise ValueError(f"gate shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return torch.tanh(a) * torch.sigmoid(b)


def upsample_linear(x, factor=2):
    """Double the sample axis by linear interpolation.

    Even outputs copy the input, odd outputs average neighbors; the last odd
    output repeats the final sample.
    """
    if factor != 2:
        raise ValueError("only factor 2 is supported")
    if x.shape[-1] < 2:
        raise ValueError("need at least two samples to interpolate")
    nxt = torch.cat([x[..., 1:], x[..., -1:]], dim=-1)
    mid = 0.5 * (x + nxt)
    return torch.stack([x, mid], dim=-1).flatten(-2)


def downsample_mean(x, factor=2):
    """Mean-pool the sample axis."""
    return x.unflatten(-1, (x.shape[-1] // factor, factor)).mean(-1)


def batch_stddev_feature(x, eps=1e-8):
    """Append the mean cross-batch standard deviation as one constant channel.

    Population std per position, averaged over channels and positions.
    ``eps`` keeps the square root differentiable for identical items.
    """
    var = x.var(dim=0, unbiased=False)
    std = torch.sqrt(var + eps).mean()
    extra = std.expand(x.shape[0], 1, *x.shape[2:])
    return torch.cat([x, extra], dim=1)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    skipped: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **kw):
        st = cls(**kw)
        st.m = [torch.zeros_like(p) for p in params]
        st.v = [torch.zeros_like(p) for p in params]
        return st


@torch.no_grad()
def adam_step(params, grads, state):
    """Bias-corrected Adam update, in place. Returns ``params``.

    A non-finite gradient skips the whole update and bumps ``state.skipped``.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree in length")
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
    if not all(bool(torch.isfinite(g).all()) for g in grads):
        state.skipped += 1
        log.warning("non-finite gradient, skipping Adam step (%d skipped so far)", state.skipped)
        return params
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        denom = (v / c2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-state.lr / c1)
    return params


# ---------------------------------------------------------------------------
# Finite-difference checks
# ---------------------------------------------------------------------------

def _scalar(v):
    return float(v.detach()) if torch.is_tensor(v) else float(v)


def numeric_grad(fn, params, h=1e-5):
    """Central-difference gradient of scalar ``fn()`` w.r.t. each tensor in ``params``.

    The tensors are perturbed in place and restored. Also usable as a slow
    stand-in for second-order penalty gradients when debugging.
    """
    out = []
    for p in params:
        g = torch.zeros_like(p)
        flat, gflat = p.data.view(-1), g.view(-1)
        # fn runs with grad enabled so penalties can differentiate internally
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = _scalar(fn())
            flat[i] = orig - h
            fm = _scalar(fn())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        out.append(g)
    return out


def grad_check(fn, params, h=1e-5):
    """Max relative error between autograd and central-difference gradients.

    For each tensor the error is ``max|g_auto - g_num| / max(|g_auto|_inf,
    |g_num|_inf)``; the worst tensor is reported. ``fn`` must return a scalar
    and should be evaluated in float64.
    """
    params = list(params)
    for p in params:
        p.requires_grad_(True)
    val = fn()
    auto = torch.autograd.grad(val, params, allow_unused=True)
    auto = [torch.zeros_like(p) if a is None else a.detach() for p, a in zip(params, auto)]
    num = numeric_grad(fn, params, h)
    worst = 0.0
    for a, n in zip(auto, num):
        scale = max(a.abs().max().item(), n.abs().max().item())
        if scale == 0.0:
            continue
        worst = max(worst, (a - n).abs().max().item() / scale)
    return worst


def init_weight(shape, generator=None, dtype=torch.float32, gain=1.0):
    """Gaussian init with std gain/sqrt(fan_in)."""
    fan_in = math.prod(shape[1:])
    return torch.randn(shape, generator=generator, dtype=dtype) * (gain / math.sqrt(fan_in))
