import numpy as np
import pytest
import torch

from psgan import nn, training
from psgan.model import NetConfig, Networks, SCALE_LENGTHS, load_checkpoint, make_noise
from psgan.training import (LossWeights, TrainConfig, TrainingData, Utterance, fft_loss,
                            gradient_penalty, interpolate, r1_penalty, wgan_d_loss, wgan_g_loss)

D64 = torch.float64


class LinearCritic(torch.nn.Module):
    """D(x) = w . x over all scales jointly, plus a bias."""

    def __init__(self, norm, bias=0.0, seed=0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        ws = [torch.randn(L, generator=g, dtype=D64) for L in SCALE_LENGTHS]
        scale = norm / torch.sqrt(sum((w ** 2).sum() for w in ws))
        self.ws = torch.nn.ParameterList(torch.nn.Parameter(w * scale) for w in ws)
        self.bias = torch.nn.Parameter(torch.tensor(float(bias), dtype=D64))

    def forward(self, pyramid, cond):
        s = sum((x * w).sum(dim=(1, 2, 3)) for x, w in zip(pyramid, self.ws))
        return (s + self.bias).unsqueeze(1)


class ConstantCritic(torch.nn.Module):
    def forward(self, pyramid, cond):
        return torch.full((pyramid[0].shape[0], 1), 3.0, dtype=D64) + 0 * pyramid[0].sum()


def pyr(batch=2, seed=0, scale=1.0):
    g = torch.Generator().manual_seed(seed)
    return [scale * torch.randn(batch, 1, 1, L, generator=g, dtype=D64) for L in SCALE_LENGTHS]


# --- Wasserstein terms ------------------------------------------------------------

def test_wgan_examples():
    real, fake = torch.tensor([[5.0]]), torch.tensor([[3.0]])
    assert wgan_d_loss(real, fake).item() == -2.0
    assert wgan_d_loss(fake, fake).item() == 0.0


def test_wgan_negation_identity():
    g = torch.Generator().manual_seed(1)
    for _ in range(10):
        r, f = torch.randn(4, 1, generator=g), torch.randn(4, 1, generator=g)
        assert wgan_g_loss(f, r).item() == -wgan_d_loss(r, f).item()
    assert wgan_g_loss(f).item() == -f.mean().item()


# --- gradient penalty --------------------------------------------------------------

def test_gp_linear_critic_norm_two():
    gp = gradient_penalty(LinearCritic(2.0), pyr(seed=1), pyr(seed=2), None, torch.tensor([0.3, 0.8], dtype=D64))
    assert abs(gp.item() - 1.0) < 1e-12


def test_gp_masked_below_one():
    critic = LinearCritic(0.5)
    gp = gradient_penalty(critic, pyr(seed=1), pyr(seed=2), None, torch.tensor([0.3, 0.8], dtype=D64))
    assert gp.item() == 0.0
    grads = torch.autograd.grad(gp, list(critic.parameters()), allow_unused=True)
    assert all(g is None or bool((g == 0).all()) for g in grads)


def test_gp_exact_zero_with_zero_gradient():
    critic = LinearCritic(0.0)
    gp = gradient_penalty(critic, pyr(seed=1), pyr(seed=2), None, torch.tensor([0.5, 0.5], dtype=D64))
    assert gp.item() == 0.0
    grads = torch.autograd.grad(gp, list(critic.parameters()), allow_unused=True)
    assert all(g is None or bool(torch.isfinite(g).all() and (g == 0).all()) for g in grads)


def test_interpolation_endpoints():
    x, xh = pyr(seed=1), pyr(seed=2)
    for a, b in zip(interpolate(x, xh, torch.ones(2, dtype=D64)), x):
        assert torch.equal(a, b)
    for a, b in zip(interpolate(x, xh, torch.zeros(2, dtype=D64)), xh):
        assert torch.equal(a, b)
    eps = torch.tensor([0.25, 0.75], dtype=D64)
    for t, a, b in zip(interpolate(x, xh, eps), x, xh):
        assert bool((t >= torch.minimum(a, b) - 1e-15).all() and (t <= torch.maximum(a, b) + 1e-15).all())


# --- R1 ----------------------------------------------------------------------------

def test_r1_examples():
    x = pyr(seed=3)
    assert r1_penalty(ConstantCritic(), x, None).item() == 0.0
    assert abs(r1_penalty(LinearCritic(2.0), x, None).item() - 4.0) < 1e-12
    a = r1_penalty(LinearCritic(1.3, bias=0.0), x, None).item()
    b = r1_penalty(LinearCritic(1.3, bias=17.0), x, None).item()
    assert a == b


# --- FFT loss -----------------------------------------------------------------------

def test_fft_loss_examples():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(2, 1, 3, 512, generator=g, dtype=D64)
    assert fft_loss(x, x).item() < 1e-18
    imp = torch.zeros(1, 1, 1, 512, dtype=D64)
    imp[..., 0] = 1.0
    assert abs(fft_loss(torch.zeros_like(imp), imp).item() - 1.0) < 1e-9


def test_fft_loss_shift_invariant():
    g = torch.Generator().manual_seed(1)
    x = torch.randn(1, 1, 4, 512, generator=g, dtype=D64)
    xh = torch.randn(1, 1, 4, 512, generator=g, dtype=D64)
    a = fft_loss(xh, x).item()
    for k in (1, 37, 300):
        assert abs(fft_loss(torch.roll(xh, k, dims=-1), x).item() - a) < 1e-9 * a


def test_fft_loss_needs_full_resolution():
    with pytest.raises(ValueError):
        fft_loss(torch.zeros(1, 1, 1, 256), torch.zeros(1, 1, 1, 256))


def test_fft_loss_gradient_finite_at_zero():
    xh = torch.zeros(1, 1, 1, 512, dtype=D64, requires_grad=True)
    (g,) = torch.autograd.grad(fft_loss(xh, torch.zeros_like(xh)), [xh])
    assert bool(torch.isfinite(g).all())


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(gp=-1.0)


# --- training step --------------------------------------------------------------------

def toy_data(n_utts=2, frames=12, seed=0):
    rng = np.random.default_rng(seed)
    utts = [Utterance(f"u{i}", rng.standard_normal((frames, 47)).astype(np.float32),
                      (0.1 * rng.standard_normal((frames, 512))).astype(np.float32)) for i in range(n_utts)]
    return TrainingData(utts)


@pytest.fixture
def setup():
    nn.set_deterministic(0)
    nets = Networks.create(NetConfig.tiny(8), seed=0)
    return nets, training.Optimizers.create(nets), toy_data()


def _snap(params):
    return [p.detach().clone() for p in params]


def test_update_order_and_isolation(setup, monkeypatch):
    nets, opts, data = setup
    calls = []
    real_step = nn.adam_step

    def spy(params, grads, state):
        d0, gc0 = _snap(nets.d_params()), _snap(nets.gc_params())
        out = real_step(params, grads, state)
        d_same = all(torch.equal(a, b) for a, b in zip(d0, nets.d_params()))
        gc_same = all(torch.equal(a, b) for a, b in zip(gc0, nets.gc_params()))
        calls.append(("d" if state is opts.d else "gc", d_same, gc_same))
        return out

    monkeypatch.setattr(nn, "adam_step", spy)
    training.train_step(nets, data.sample(np.random.default_rng(0), 8), opts, LossWeights(), np.random.default_rng(1))
    assert [c[0] for c in calls] == ["d", "gc"]
    assert calls[0][2] and not calls[0][1]  # D phase: G and C untouched
    assert calls[1][1] and not calls[1][2]  # G phase: D untouched


def test_zero_weights_zero_head_first_step(setup):
    nets, opts, data = setup
    with torch.no_grad():
        nets.disc.head.weight.zero_()
    m = training.train_step(nets, data.sample(np.random.default_rng(0), 8), opts,
                            LossWeights(0.0, 0.0, 0.0), np.random.default_rng(1))
    assert m["L_D_W"] == 0.0 and m["GP"] == 0.0 and m["R1"] == 0.0


def test_gc_step_decreases_fft_loss(setup):
    nets, _, data = setup
    batch = data.sample(np.random.default_rng(0), 8)
    state = nn.AdamState.for_params(nets.gc_params(), lr=1e-5)

    def loss():
        noise = make_noise(1, 8, np.random.default_rng(5))
        return fft_loss(nets.gen(noise, nets.cond(batch.features))[0], batch.real[0])

    before = loss()
    grads = torch.autograd.grad(before, nets.gc_params(), allow_unused=True)
    nn.adam_step(nets.gc_params(), list(grads), state)
    assert loss().item() < before.item()


def test_non_finite_loss_is_reported(setup, caplog):
    nets, opts, data = setup
    with torch.no_grad():
        nets.gen.heads[0].bias.fill_(float("nan"))
    before = _snap(nets.d_params())
    m = training.train_step(nets, data.sample(np.random.default_rng(0), 8), opts, LossWeights(), np.random.default_rng(1))
    assert "non-finite" in caplog.text
    assert np.isnan(m["L_D_W"]) and np.isnan(m["L_G_W"])
    assert all(torch.equal(a, b) for a, b in zip(before, nets.d_params()))
    assert opts.d.step == 0 and opts.gc.step == 0


def test_sample_shapes_and_contiguity():
    data = toy_data(frames=30)
    b = data.sample(np.random.default_rng(3), 10, batch_size=2)
    assert b.features.shape == (2, 10, 47)
    assert [x.shape for x in b.real] == [(2, 1, 10, L) for L in SCALE_LENGTHS]
    # the sampled features are a contiguous normalized window of one utterance
    f = b.features[0].numpy()
    hits = [u for u in data.utterances
            for s in range(21) if np.array_equal(data.normalize(u.features[s:s + 10]), f)]
    assert len(hits) == 1


def test_sample_too_short():
    with pytest.raises(training.TrainingError):
        toy_data(frames=5).sample(np.random.default_rng(0), 150)


# --- training loop -------------------------------------------------------------------------

def small_cfg(out, **kw):
    base = dict(out_dir=str(out), iterations=4, segment_frames=8, seed=3, deterministic=True,
                checkpoint_every=2, net=NetConfig.tiny(8))
    base.update(kw)
    return TrainConfig(**base)


def test_train_writes_metrics_and_checkpoints(tmp_path):
    training.train(small_cfg(tmp_path), toy_data())
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "iter,L_D_W,GP,R1,L_G_W,L_FFT"
    assert [int(ln.split(",")[0]) for ln in lines[1:]] == [1, 2, 3, 4]
    m = training.read_metrics(tmp_path / "metrics.csv")
    assert all(np.isfinite(v).all() for v in m.values())
    assert sorted(p.name for p in tmp_path.glob("*.psgc")) == ["ckpt_0000002.psgc", "ckpt_0000004.psgc"]


def test_resume_is_bit_exact(tmp_path):
    full, part = tmp_path / "full", tmp_path / "part"
    training.train(small_cfg(full), toy_data())
    training.train(small_cfg(part, iterations=2), toy_data())
    training.train(small_cfg(part), toy_data(), resume=part / "ckpt_0000002.psgc")
    ta, ma = load_checkpoint(full / "ckpt_0000004.psgc")
    tb, mb = load_checkpoint(part / "ckpt_0000004.psgc")
    assert ta.keys() == tb.keys()
    assert all(ta[k].tobytes() == tb[k].tobytes() for k in ta)
    ma["train"].pop("out_dir")
    mb["train"].pop("out_dir")
    assert ma == mb
    assert (full / "metrics.csv").read_text() == (part / "metrics.csv").read_text()


def test_same_seed_same_run(tmp_path):
    training.train(small_cfg(tmp_path / "a", iterations=2), toy_data())
    training.train(small_cfg(tmp_path / "b", iterations=2), toy_data())
    assert (tmp_path / "a" / "metrics.csv").read_text() == (tmp_path / "b" / "metrics.csv").read_text()


def test_train_rejects_short_dataset(tmp_path):
    with pytest.raises(training.TrainingError):
        training.train(small_cfg(tmp_path, segment_frames=150), toy_data(frames=20))


def test_config_file(tmp_path):
    (tmp_path / "run.cfg").write_text(
        "[data]\ndataset = prepared\nout_dir = out\nmode = speech\n"
        "[train]\niterations = 50  # short\nseed = 9\ndeterministic = yes\nlambda_gp = 5\n"
        "[model]\ndilations = 1 2 4\nchannels = 16\n")
    cfg = TrainConfig.from_file(tmp_path / "run.cfg")
    assert cfg.dataset == str(tmp_path / "prepared") and cfg.mode == "speech"
    assert cfg.iterations == 50 and cfg.seed == 9 and cfg.deterministic is True
    assert cfg.weights == LossWeights(1.0, 5.0, 1.0)
    assert cfg.net.gen_channels == 16 and cfg.net.dilations == (1, 2, 4)
    (tmp_path / "m.cfg").write_text("[model]\nwidth = 3\n")
    with pytest.raises(ValueError, match="width"):
        TrainConfig.from_file(tmp_path / "m.cfg")


def test_config_rejects_unknown_and_bad_mode(tmp_path):
    (tmp_path / "a.cfg").write_text("[train]\nbogus = 1\n")
    with pytest.raises(ValueError, match="bogus"):
        TrainConfig.from_file(tmp_path / "a.cfg")
    (tmp_path / "b.cfg").write_text("[train]\nmode = whisper\n")
    with pytest.raises(ValueError, match="mode"):
        TrainConfig.from_file(tmp_path / "b.cfg")


# --- target gain ----------------------------------------------------------------------

def test_targets_scaled_to_fixed_peak():
    data = toy_data()
    peak = max(float(np.abs(p[0]).max()) for p in data._pyr)
    assert abs(peak - training.TARGET_PEAK) < 1e-6
    raw = max(float(np.abs(u.frames).max()) for u in data.utterances)
    assert abs(data.gain * raw - training.TARGET_PEAK) < 1e-6
    # the pyramid levels are means of the scaled top level
    np.testing.assert_allclose(data._pyr[0][1], data._pyr[0][0].reshape(12, 256, 2).mean(-1), atol=1e-6)


def test_gain_stored_and_restored(tmp_path):
    training.train(small_cfg(tmp_path, iterations=2), toy_data())
    nets, mean, std, meta, tensors = training.load_model(tmp_path / "ckpt_0000002.psgc")
    assert training.target_gain(tensors) == toy_data().gain
    other = toy_data()
    other.set_gain(2 * other.gain)
    before = other._pyr[0][0].copy()
    other.set_gain(training.target_gain(tensors))
    np.testing.assert_allclose(other._pyr[0][0], before / 2, rtol=1e-6)
    assert training.target_gain({}) == 1.0
