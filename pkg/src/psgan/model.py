"""Conditioning model, progressive-upsampling generator and multi-scale
discriminator, plus the checkpoint format.

Waveform pyramids are lists indexed by level: level 0 is the 512-sample
full-resolution frame, level 4 the 32-sample one. Every tensor is
``(batch, channels, frames, samples)``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import nn
from .features import DIM as FEATURE_DIM

N_SCALES = 5
FRAME_LEN = 512
SCALE_LENGTHS = tuple(FRAME_LEN >> i for i in range(N_SCALES))  # level order


@dataclass
class NetConfig:
    feature_dim: int = FEATURE_DIM
    cond_channels: int = 64
    cond_out: int = 64
    dilations: tuple = (1, 2, 4, 8, 1, 2, 4, 8)
    gen_channels: int = 128
    disc_channels: int = 128
    kernel: tuple = (3, 7)
    seed_len: int = 16
    disc_blocks: int = 9

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        self.kernel = tuple(int(k) for k in self.kernel)

    @classmethod
    def tiny(cls, channels=32):
        return cls(cond_channels=channels, cond_out=channels, gen_channels=channels, disc_channels=channels)

    @property
    def receptive_field(self):
        """Frame-axis receptive field of the conditioning model."""
        return 1 + 2 * sum(self.dilations)


# tanh(a) * sigmoid(b) keeps about a quarter of var(a) near zero; without
# this gain a 9-block critic starts out nearly blind to its input
GATE_GAIN = 2.0
HEAD_GAIN = 0.1  # generator output heads


class Conv(torch.nn.Module):
    def __init__(self, c_in, c_out, kernel=(1, 1), stride=(1, 1), dilation=(1, 1), generator=None, gain=1.0):
        super().__init__()
        self.weight = torch.nn.Parameter(nn.init_weight((c_out, c_in, *kernel), generator, gain=gain))
        self.bias = torch.nn.Parameter(torch.zeros(c_out))
        self.stride, self.dilation = tuple(stride), tuple(dilation)

    def forward(self, x):
        return nn.conv2d(x, self.weight, self.bias, self.stride, "same", self.dilation)


class GatedConv(Conv):
    """Convolution to 2C channels followed by tanh/sigmoid gating."""

    def __init__(self, c_in, c_out, **kw):
        kw.setdefault("gain", GATE_GAIN)
        super().__init__(c_in, 2 * c_out, **kw)

    def forward(self, x):
        a, b = super().forward(x).chunk(2, dim=1)
        return nn.gated_activation(a, b)


class ConditioningNet(torch.nn.Module):
    """Non-causal dilated residual stack over the frame axis.

    Each scale head maps the skip sum to ``cond_out`` channels and
    broadcasts it along that scale's sample axis.
    """

    def __init__(self, cfg, generator=None):
        super().__init__()
        self.cfg = cfg
        ch = cfg.cond_channels
        self.in_proj = Conv(cfg.feature_dim, ch, generator=generator)
        self.gates = torch.nn.ModuleList(
            GatedConv(ch, ch, kernel=(3, 1), dilation=(d, 1), generator=generator) for d in cfg.dilations)
        # the last block feeds only the skip sum
        self.res = torch.nn.ModuleList(Conv(ch, ch, generator=generator) for _ in cfg.dilations[:-1])
        self.skip = torch.nn.ModuleList(Conv(ch, ch, generator=generator) for _ in cfg.dilations)
        self.heads = torch.nn.ModuleList(Conv(ch, cfg.cond_out, generator=generator) for _ in range(N_SCALES))

    def forward(self, feats):
        """``feats``: normalized features ``(batch, frames, feature_dim)``."""
        if feats.dim() != 3 or feats.shape[-1] != self.cfg.feature_dim:
            raise ValueError(f"expected (batch, frames, {self.cfg.feature_dim}) features, got {tuple(feats.shape)}")
        h = self.in_proj(feats.transpose(1, 2).unsqueeze(-1))
        skip = 0
        for i, (gate, sk) in enumerate(zip(self.gates, self.skip)):
            g = gate(h)
            skip = skip + sk(g)
            if i < len(self.res):
                h = h + self.res[i](g)
        post = torch.relu(skip)
        return [head(post).expand(-1, -1, -1, L) for head, L in zip(self.heads, SCALE_LENGTHS)]


def make_noise(batch, frames, rng, seed_len=16, dtype=torch.float32):
    """Unit-variance Gaussian noise: seed noise plus one channel per generator block.

    Returns ``{"seed": ..., "z": [z_level0, ..., z_level4]}``; ``rng`` is a
    ``numpy.random.Generator``.
    """
    def draw(L):
        return torch.from_numpy(rng.standard_normal((batch, 1, frames, L))).to(dtype)

    seed = draw(seed_len)
    z_coarse_first = [draw(L) for L in reversed(SCALE_LENGTHS)]
    return {"seed": seed, "z": z_coarse_first[::-1]}


class Generator(torch.nn.Module):
    """Five gated residual upsampling blocks, 16 -> 32 -> ... -> 512 samples."""

    def __init__(self, cfg, generator=None):
        super().__init__()
        self.cfg = cfg
        ch, co = cfg.gen_channels, cfg.cond_out
        self.seed = Conv(co + 1, ch, generator=generator)
        # learned per-position seed offset; conditioning and noise are
        # stationary along the sample axis, so this is G's only cue for where
        # the frame center (the GCI) is
        self.pos = torch.nn.Parameter(torch.randn((1, ch, 1, cfg.seed_len), generator=generator))
        # the final block's hidden state is not consumed, so it has no residual path
        self.res = torch.nn.ModuleList(Conv(ch, ch, generator=generator) for _ in range(N_SCALES - 1))
        self.gates = torch.nn.ModuleList(
            GatedConv(ch + 1 + co, ch, kernel=cfg.kernel, generator=generator) for _ in range(N_SCALES))
        # quiet start: a full-scale random output takes thousands of Adam
        # steps just to shrink to the level of the targets
        self.heads = torch.nn.ModuleList(Conv(ch, 1, generator=generator, gain=HEAD_GAIN) for _ in range(N_SCALES))

    def forward(self, noise, cond):
        """Returns the synthetic pyramid, level 0 (512 samples) first."""
        if len(cond) != N_SCALES:
            raise ValueError(f"need {N_SCALES} conditioning scales, got {len(cond)}")
        c_coarse = cond[-1]
        while c_coarse.shape[-1] > self.cfg.seed_len:
            c_coarse = nn.downsample_mean(c_coarse)
        h = self.seed(torch.cat([c_coarse, noise["seed"]], dim=1)) + self.pos
        outs = []
        # coarse to fine: block k works at level N_SCALES - 1 - k
        for k in range(N_SCALES):
            level = N_SCALES - 1 - k
            up = nn.upsample_linear(h)
            c, z = cond[level], noise["z"][level]
            if c.shape[-1] != up.shape[-1] or z.shape[-1] != up.shape[-1]:
                raise ValueError(f"scale {level}: expected length {up.shape[-1]}")
            g = self.gates[k](torch.cat([up, z, c], dim=1))
            if k < N_SCALES - 1:
                h = self.res[k](up) + g
            outs.append(torch.tanh(self.heads[k](g)))
        return outs[::-1]


class Discriminator(torch.nn.Module):
    """Strided gated blocks halving 512 -> 1, consuming all scales on the way down."""

    def __init__(self, cfg, generator=None):
        super().__init__()
        self.cfg = cfg
        ch, co = cfg.disc_channels, cfg.cond_out
        blocks = []
        for j in range(cfg.disc_blocks):
            c_in = 0 if j == 0 else ch
            if j < N_SCALES:
                c_in += 1 + co
            if j == cfg.disc_blocks - 1:
                c_in += 1  # batch stddev channel
            blocks.append(GatedConv(c_in, ch, kernel=cfg.kernel, stride=(1, 2), generator=generator))
        self.blocks = torch.nn.ModuleList(blocks)
        self.head = Conv(ch, 1, generator=generator)

    def forward(self, pyramid, cond):
        if len(pyramid) != N_SCALES or len(cond) != N_SCALES:
            raise ValueError(f"need {N_SCALES} signal and conditioning scales")
        h = None
        for j, block in enumerate(self.blocks):
            if j < N_SCALES:
                x, c = pyramid[j], cond[j]
                if x.shape[-1] != SCALE_LENGTHS[j]:
                    raise ValueError(f"scale {j}: expected length {SCALE_LENGTHS[j]}, got {x.shape[-1]}")
                parts = [x, c] if h is None else [h, x, c]
                h = torch.cat(parts, dim=1)
            if j == len(self.blocks) - 1:
                h = nn.batch_stddev_feature(h)
            h = block(h)
        return self.head(h).mean(dim=(2, 3))


@dataclass
class Networks:
    cond: ConditioningNet
    gen: Generator
    disc: Discriminator
    cfg: NetConfig = field(default_factory=NetConfig)

    @classmethod
    def create(cls, cfg, seed=0, dtype=torch.float32):
        g = torch.Generator().manual_seed(int(seed))
        nets = cls(ConditioningNet(cfg, g), Generator(cfg, g), Discriminator(cfg, g), cfg)
        for m in nets.modules():
            m.to(dtype)
        return nets

    def modules(self):
        return {"cond": self.cond, "gen": self.gen, "disc": self.disc}.values()

    def named_modules(self):
        return {"cond": self.cond, "gen": self.gen, "disc": self.disc}

    def gc_params(self):
        return list(self.cond.parameters()) + list(self.gen.parameters())

    def d_params(self):
        return list(self.disc.parameters())


def count_parameters(module):
    if isinstance(module, Networks):
        return sum(count_parameters(m) for m in module.modules())
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"PSGC"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def network_tensors(nets):
    """Name -> float32 numpy array for every parameter of C, G and D."""
    out = {}
    for prefix, mod in nets.named_modules().items():
        for name, p in mod.named_parameters():
            out[f"{prefix}.{name}"] = p.detach().cpu().numpy().astype(np.float32)
    return out


def load_network_tensors(nets, tensors):
    for prefix, mod in nets.named_modules().items():
        for name, p in mod.named_parameters():
            key = f"{prefix}.{name}"
            if key not in tensors:
                raise CheckpointError(f"checkpoint is missing layer {key}")
            arr = tensors[key]
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(
                    f"layer {key}: checkpoint shape {tuple(arr.shape)} != model shape {tuple(p.shape)}")
            with torch.no_grad():
                p.copy_(torch.from_numpy(np.array(arr)).to(p.dtype))


def save_checkpoint(path, tensors, meta):
    """Write ``tensors`` (name -> float32 array) and a JSON-serializable ``meta``.

    Layout: magic, version u32, header length u32, UTF-8 JSON header (meta
    plus the layer table of names and shapes), then each layer's float32
    little-endian payload in table order.
    """
    names = list(tensors)
    header = {"meta": meta, "layers": [{"name": n, "shape": list(np.shape(tensors[n]))} for n in names]}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(tensors[n], dtype="<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {data[:4]!r})")
    if len(data) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(data[12: 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    off = 12 + hlen
    tensors = {}
    for entry in header["layers"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * 4
        if off + n > len(data):
            raise CheckpointError(f"{path}: truncated payload in layer {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(data, dtype="<f4", count=n // 4, offset=off).reshape(shape).copy()
        off += n
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return tensors, header["meta"]


def config_to_dict(cfg):
    d = asdict(cfg)
    d["dilations"] = list(cfg.dilations)
    d["kernel"] = list(cfg.kernel)
    return d


def config_from_dict(d):
    return NetConfig(**d)
