import numpy as np
import pytest
import torch

from psgan import model
from psgan.model import NetConfig, Networks, SCALE_LENGTHS, make_noise


@pytest.fixture(scope="module")
def nets():
    return Networks.create(NetConfig.tiny(8), seed=11)


def feats(frames, batch=1, seed=0):
    return torch.from_numpy(np.random.default_rng(seed).standard_normal((batch, frames, 47)).astype(np.float32))


def test_receptive_field_constant():
    assert NetConfig().receptive_field == 61


@pytest.mark.parametrize("frames", [1, 3, 17])
def test_shape_contract(nets, frames):
    f = feats(frames, batch=2)
    cond = nets.cond(f)
    assert [c.shape for c in cond] == [(2, 8, frames, L) for L in SCALE_LENGTHS]
    out = nets.gen(make_noise(2, frames, np.random.default_rng(0)), cond)
    assert [o.shape for o in out] == [(2, 1, frames, L) for L in SCALE_LENGTHS]
    assert all(bool((o.abs() < 1).all()) for o in out)
    assert nets.disc(out, cond).shape == (2, 1)


def test_wrong_feature_dim(nets):
    with pytest.raises(ValueError, match="47"):
        nets.cond(torch.zeros(1, 5, 40))


def test_wrong_scale_length(nets):
    cond = nets.cond(feats(2))
    bad = [torch.zeros(1, 1, 2, L) for L in SCALE_LENGTHS]
    bad[2] = torch.zeros(1, 1, 2, 100)
    with pytest.raises(ValueError, match="scale 2"):
        nets.disc(bad, cond)


def test_zero_heads_give_zero_conditioning():
    n = Networks.create(NetConfig.tiny(8), seed=1)
    with torch.no_grad():
        for h in n.cond.heads:
            h.weight.zero_()
    assert all(bool((c == 0).all()) for c in n.cond(torch.zeros(1, 4, 47)))


def test_zero_final_head_and_head_linearity():
    n = Networks.create(NetConfig.tiny(8), seed=2)
    f = feats(3)
    cond = n.cond(f)
    x = n.gen(make_noise(1, 3, np.random.default_rng(1)), cond)
    s = n.disc(x, cond)
    with torch.no_grad():
        n.disc.head.weight.mul_(2.0)
    assert torch.allclose(n.disc(x, cond), 2 * s, rtol=1e-6, atol=0)
    with torch.no_grad():
        n.disc.head.weight.zero_()
    assert bool((n.disc(x, cond) == 0).all())


def test_generator_deterministic():
    outs = []
    for _ in range(2):
        n = Networks.create(NetConfig.tiny(8), seed=5)
        cond = n.cond(feats(4))
        outs.append(n.gen(make_noise(1, 4, np.random.default_rng(9)), cond))
    assert all(torch.equal(a, b) for a, b in zip(*outs))


def test_noise_bundle():
    noise = make_noise(3, 20, np.random.default_rng(0))
    assert noise["seed"].shape == (3, 1, 20, 16)
    assert [z.shape[-1] for z in noise["z"]] == list(SCALE_LENGTHS)
    allz = torch.cat([z.flatten() for z in noise["z"]])
    assert abs(allz.mean().item()) < 0.01 and abs(allz.std().item() - 1) < 0.01


def _reachable_taps(in_len, k=7, stride=2):
    """Sample-axis kernel taps that touch real data (not only zero padding)."""
    pad = (k - 1) // 2
    out_len = -(-in_len // stride)
    idx = np.arange(out_len)[:, None] * stride - pad + np.arange(k)[None, :]
    return ((idx >= 0) & (idx < in_len)).any(axis=0)


def test_gradient_flow():
    n = Networks.create(NetConfig.tiny(8), seed=4)
    f = feats(20, batch=2)
    cond = n.cond(f)
    score = n.disc(n.gen(make_noise(2, 20, np.random.default_rng(0)), cond), cond).sum()
    named = [(f"{k}.{a}", p) for k, m in n.named_modules().items() for a, p in m.named_parameters()]
    grads = torch.autograd.grad(score, [p for _, p in named])
    zero = total = 0
    for (name, _), g in zip(named, grads):
        if name.startswith("disc.blocks.") and name.endswith("weight"):
            j = int(name.split(".")[2])
            g = g[..., torch.from_numpy(_reachable_taps(512 >> j))]
        zero += int((g == 0).sum())
        total += g.numel()
    assert zero / total < 0.01


def _sensitivity(fn, frames=150, at=75):
    f = feats(frames, seed=3)
    g = f.clone()
    g[0, at] += 1.0
    with torch.no_grad():
        d = (fn(f) - fn(g)).abs().amax(dim=(0, 1, 3))
    return torch.nonzero(d > 0).flatten()


def test_conditioning_receptive_field():
    n = Networks.create(NetConfig(), seed=0)
    changed = _sensitivity(lambda f: n.cond(f)[0])
    assert changed.min() == 75 - 30 and changed.max() == 75 + 30


def test_generator_receptive_field():
    # the generator's own (3, 7) kernels add one frame per block on each side
    n = Networks.create(NetConfig.tiny(16), seed=0)
    noise = make_noise(1, 150, np.random.default_rng(0))
    changed = _sensitivity(lambda f: n.gen(noise, n.cond(f))[0])
    assert changed.min() >= 75 - 35 and changed.max() <= 75 + 35
    assert changed.min() < 75 - 30  # wider than the conditioning stack alone


def _expected_count(cfg):
    """Parameter count from the declared layer shapes, written out independently."""
    def conv(cin, cout, kh=1, kw=1):
        return cout * cin * kh * kw + cout

    ch, co, F = cfg.cond_channels, cfg.cond_out, cfg.feature_dim
    nd = len(cfg.dilations)
    kh, kw = cfg.kernel
    c = conv(F, ch) + nd * conv(ch, 2 * ch, 3, 1) + (nd - 1) * conv(ch, ch) + nd * conv(ch, ch) + 5 * conv(ch, co)
    gch = cfg.gen_channels
    g = conv(co + 1, gch) + gch * cfg.seed_len + 4 * conv(gch, gch) + 5 * conv(gch + 1 + co, 2 * gch, kh, kw) + 5 * conv(gch, 1)
    dch = cfg.disc_channels
    d = conv(ch * 0 + 1 + co, 2 * dch, kh, kw) + 4 * conv(dch + 1 + co, 2 * dch, kh, kw)
    d += (cfg.disc_blocks - 6) * conv(dch, 2 * dch, kh, kw) + conv(dch + 1, 2 * dch, kh, kw) + conv(dch, 1)
    return c, g, d


@pytest.mark.parametrize("cfg", [NetConfig(), NetConfig.tiny(32)])
def test_parameter_count(cfg):
    n = Networks.create(cfg)
    c, g, d = _expected_count(cfg)
    assert model.count_parameters(n.cond) == c
    assert model.count_parameters(n.gen) == g
    assert model.count_parameters(n.disc) == d
    assert model.count_parameters(n) == c + g + d


def test_checkpoint_round_trip_bytes(nets, tmp_path):
    meta = {"net": model.config_to_dict(nets.cfg), "note": "x"}
    model.save_checkpoint(tmp_path / "a.psgc", model.network_tensors(nets), meta)
    tensors, meta2 = model.load_checkpoint(tmp_path / "a.psgc")
    assert meta2 == meta
    fresh = Networks.create(model.config_from_dict(meta2["net"]), seed=99)
    model.load_network_tensors(fresh, tensors)
    model.save_checkpoint(tmp_path / "b.psgc", model.network_tensors(fresh), meta2)
    assert (tmp_path / "a.psgc").read_bytes() == (tmp_path / "b.psgc").read_bytes()


def test_checkpoint_wrong_dims_names_layer(nets, tmp_path):
    tensors = model.network_tensors(nets)
    tensors["gen.heads.2.weight"] = np.zeros((1, 3, 1, 1), np.float32)
    with pytest.raises(model.CheckpointError, match="gen.heads.2.weight"):
        model.load_network_tensors(Networks.create(nets.cfg), tensors)


def test_checkpoint_corruption(nets, tmp_path):
    p = tmp_path / "c.psgc"
    model.save_checkpoint(p, model.network_tensors(nets), {})
    data = p.read_bytes()
    (tmp_path / "bad1").write_bytes(b"NOPE" + data[4:])
    (tmp_path / "bad2").write_bytes(data[:4] + (7).to_bytes(4, "little") + data[8:])
    (tmp_path / "bad3").write_bytes(data[:-10])
    for name, msg in (("bad1", "magic"), ("bad2", "version"), ("bad3", "truncated")):
        with pytest.raises(model.CheckpointError, match=msg):
            model.load_checkpoint(tmp_path / name)


def test_generator_knows_sample_position():
    # with stationary conditioning and no noise, only the learned seed offset
    # can make the frame interior differ from one position to the next
    n = Networks.create(NetConfig.tiny(8), seed=2)
    noise = make_noise(1, 4, np.random.default_rng(0))
    noise = {"seed": torch.zeros_like(noise["seed"]), "z": [torch.zeros_like(z) for z in noise["z"]]}
    with torch.no_grad():
        cond = n.cond(torch.zeros(1, 4, 47))
        interior = n.gen(noise, cond)[0][0, 0, :, 128:384]
        assert float(interior.std(dim=-1).min()) > 1e-4
        n.gen.pos.zero_()
        flat = n.gen(noise, cond)[0][0, 0, :, 128:384]
    assert float(flat.std(dim=-1).max()) < 1e-6


def test_fresh_critic_signal_survives_depth():
    # gated units shrink their input; the init gain keeps the deepest block
    # within an order of magnitude of the first
    n = Networks.create(NetConfig.tiny(32), seed=0)
    g = torch.Generator().manual_seed(0)
    x = [0.5 * torch.randn(1, 1, 16, L, generator=g) for L in SCALE_LENGTHS]
    acts = []
    hooks = [b.register_forward_hook(lambda m, i, o: acts.append(float(o.std()))) for b in n.disc.blocks]
    with torch.no_grad():
        n.disc(x, n.cond(feats(16)))
    for h in hooks:
        h.remove()
    assert acts[-1] / acts[0] > 0.1
