import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from paramtalk.diffusion import (
    GuidanceConfig,
    NumericError,
    WindowSampler,
    ddim_sample,
    ddpm_sample,
    forward_diffuse,
    guided_epsilon,
    predict_x0,
    sample,
    train,
    training_step,
)
from paramtalk.types import AudioFeatureSequence, NormStats, linear_schedule


class Oracle(torch.nn.Module):
    """Returns the exact injected noise, recovered from a known clean batch."""

    def __init__(self, z0, sched):
        super().__init__()
        self.z0 = z0
        self.ab = torch.tensor(np.array(sched.alpha_bar))
        self.calls = []

    def forward(self, z_t, t, audio=None, keep=None):
        self.calls.append((audio is None, None if keep is None else keep.clone()))
        ab = self.ab[t].view(-1, 1, 1)
        return (z_t - ab.sqrt() * self.z0) / (1 - ab).sqrt()


class TwoBranch(torch.nn.Module):
    def __init__(self, cond, uncond):
        super().__init__()
        self.cond, self.uncond = cond, uncond

    def forward(self, z, t, audio=None, keep=None):
        return (self.cond if audio is not None else self.uncond).expand_as(z)


def test_forward_no_noise_limit():
    # alpha_bar -> 1 as beta -> 0
    sched = linear_schedule(1, 1e-14, 1e-14)
    z0 = np.array([[1.0, -2.0]])
    out = forward_diffuse(z0, 0, np.full_like(z0, 5.0), sched)
    np.testing.assert_allclose(out, z0, atol=1e-6)


def test_forward_arithmetic():
    sched = linear_schedule(1, 0.25, 0.25)  # alpha_bar[0] = 0.75
    out = forward_diffuse(np.zeros((1, 1)), 0, np.array([[2.0]]), sched)
    np.testing.assert_allclose(out, [[1.0]], rtol=1e-15)


def test_forward_torch_matches_numpy(rng):
    sched = linear_schedule()
    z0, eps = rng.normal(size=(3, 5, 4)), rng.normal(size=(3, 5, 4))
    t = np.array([0, 150, 399])
    out = forward_diffuse(torch.tensor(z0), torch.tensor(t), torch.tensor(eps), sched).numpy()
    for b in range(3):
        np.testing.assert_allclose(out[b], forward_diffuse(z0[b], int(t[b]), eps[b], sched), rtol=1e-14)


def test_forward_errors():
    sched = linear_schedule(10)
    with pytest.raises(ValueError, match="range"):
        forward_diffuse(np.zeros((1, 1)), 10, np.zeros((1, 1)), sched)
    with pytest.raises(ValueError, match="shape"):
        forward_diffuse(np.zeros((1, 2)), 0, np.zeros((1, 1)), sched)


def test_predict_x0_inverts_forward(rng):
    sched = linear_schedule()
    z0, eps = torch.tensor(rng.normal(size=(2, 4, 3))), torch.tensor(rng.normal(size=(2, 4, 3)))
    t = torch.tensor([5, 300])
    torch.testing.assert_close(predict_x0(forward_diffuse(z0, t, eps, sched), t, eps, sched), z0)


def test_perfect_predictor_gives_zero_loss(rng):
    sched = linear_schedule()
    z0 = torch.tensor(rng.normal(size=(4, 6, 3)))
    res = training_step(Oracle(z0, sched), z0, torch.zeros(4, 6, 2), sched, GuidanceConfig(drop_prob=0.1),
                        torch.Generator().manual_seed(0))
    assert 0.0 <= res.noise.item() < 1e-20


def test_drop_prob_one_takes_null_path(small_model, rng):
    sched = linear_schedule(50)
    z0 = torch.tensor(rng.normal(size=(5, 6, 10)))
    audio = torch.tensor(rng.normal(size=(5, 6, 4)))
    res = training_step(small_model, z0, audio, sched, GuidanceConfig(drop_prob=1.0), torch.Generator().manual_seed(3))
    assert not res.kept.any()
    g = torch.Generator().manual_seed(3)
    t = torch.randint(0, sched.T, (5,), generator=g)
    eps = torch.randn(z0.shape, generator=g, dtype=z0.dtype)
    expected = ((eps - small_model(forward_diffuse(z0, t, eps, sched), t, None)) ** 2).mean()
    assert res.noise.item() == pytest.approx(expected.item(), rel=1e-13)


def test_masked_fraction_binomial_band():
    sched = linear_schedule(10)
    z0 = torch.zeros(10_000, 1, 1)
    oracle = Oracle(z0, sched)
    res = training_step(oracle, z0, torch.zeros(10_000, 1, 1), sched, GuidanceConfig(drop_prob=0.1),
                        torch.Generator().manual_seed(0))
    frac = 1.0 - res.kept.double().mean().item()
    assert 0.08 <= frac <= 0.12
    assert torch.equal(oracle.calls[0][1], res.kept)


def test_empty_batch_rejected(small_model):
    with pytest.raises(ValueError, match="empty"):
        training_step(small_model, torch.zeros(0, 4, 10), torch.zeros(0, 4, 4), linear_schedule(5),
                      GuidanceConfig(), torch.Generator())


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), drop=st.sampled_from([0.0, 0.1, 1.0]))
def test_loss_nonnegative(seed, drop):
    torch.manual_seed(0)
    sched = linear_schedule(20)
    z0 = torch.randn(2, 3, 2, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    model = TwoBranch(torch.tensor(0.3, dtype=torch.float64), torch.tensor(-0.1, dtype=torch.float64))
    res = training_step(model, z0, torch.zeros(2, 3, 1), sched, GuidanceConfig(drop_prob=drop),
                        torch.Generator().manual_seed(seed))
    assert res.total.item() >= 0


def test_guidance_config_validation():
    with pytest.raises(ValueError):
        GuidanceConfig(drop_prob=1.5)
    assert GuidanceConfig().scale == 1.15


def test_guided_combination_example():
    model = TwoBranch(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0]))
    out = guided_epsilon(model, torch.zeros(1, 1, 2), 0, torch.zeros(1, 1, 1), 2.0)
    torch.testing.assert_close(out, torch.tensor([[[2.0, -1.0]]]))


def test_guided_endpoints_bitwise(small_model, rng):
    z = torch.tensor(rng.normal(size=(2, 5, 10)))
    a = torch.tensor(rng.normal(size=(2, 5, 4)))
    with torch.no_grad():
        cond = small_model(z, torch.tensor([9, 9]), a)
        uncond = small_model(z, torch.tensor([9, 9]), None)
        assert torch.equal(guided_epsilon(small_model, z, 9, a, 1.0), cond)
        assert torch.equal(guided_epsilon(small_model, z, 9, a, 0.0), uncond)


def test_single_step_posterior_mean():
    sched = linear_schedule(1, 0.3, 0.3)
    x = torch.tensor([[[0.5, -1.2, 2.0]]], dtype=torch.float64)
    eps = torch.tensor([[[0.1, 0.7, -0.4]]], dtype=torch.float64)
    z1 = forward_diffuse(x, torch.tensor([0]), eps, sched)
    out = ddpm_sample(lambda z, n: eps, x.shape, sched, torch.Generator(), z_start=z1)
    torch.testing.assert_close(out, x, rtol=1e-13, atol=1e-13)


def test_ddim_with_perfect_predictor_recovers_clean_signal():
    sched = linear_schedule(40)
    x = torch.full((1, 3, 2), 0.7, dtype=torch.float64)

    def eps_fn(z, n):
        ab = sched.alpha_bar[n]
        return (z - math.sqrt(ab) * x) / math.sqrt(1 - ab)

    out = ddim_sample(eps_fn, x.shape, sched, torch.Generator().manual_seed(0), steps=10)
    torch.testing.assert_close(out, x)


def test_sample_is_seeded(small_model, rng):
    sched = linear_schedule(8)
    audio = AudioFeatureSequence(rng.normal(size=(7, 4)))
    stats = NormStats(np.arange(10.0), np.full(10, 2.0))
    a = sample(audio, small_model, sched, stats, s=1.15, seed=7)
    b = sample(audio, small_model, sched, stats, s=1.15, seed=7)
    c = sample(audio, small_model, sched, stats, s=1.15, seed=8)
    assert a.values.tobytes() == b.values.tobytes()
    assert not np.array_equal(a.values, c.values)
    assert a.values.shape == (7, 10)
    d = sample(audio, small_model, sched, stats, seed=7, sampler="ddim")
    assert d.values.shape == (7, 10)


def test_sample_rejects_nan_weights(small_model, rng):
    with torch.no_grad():
        small_model.out_proj.weight[0, 0] = float("nan")
    with pytest.raises(NumericError):
        sample(AudioFeatureSequence(rng.normal(size=(3, 4))), small_model, linear_schedule(3),
               NormStats(np.zeros(10), np.ones(10)))


def test_window_sampler_shapes_and_errors(rng):
    ws = WindowSampler([rng.normal(size=(20, 3)), rng.normal(size=(12, 3))],
                       [rng.normal(size=(20, 2)), rng.normal(size=(12, 2))], window=16)
    z, a = ws.draw(5, rng)
    assert z.shape == (5, 12, 3) and a.shape == (5, 12, 2)
    with pytest.raises(ValueError, match="mismatch"):
        WindowSampler([np.zeros((4, 2))], [np.zeros((5, 1))], 2)


def test_train_reduces_loss_and_is_deterministic(small_partition, rng):
    from paramtalk.denoiser import Denoiser

    lat = [rng.normal(size=(30, 10)) for _ in range(3)]
    aud = [rng.normal(size=(30, 4)) for _ in range(3)]

    def run():
        torch.manual_seed(0)
        m = Denoiser(small_partition, 4, d_model=12, n_heads=2, local_window=3, max_distance=4).double()
        st_ = train(m, WindowSampler(lat, aud, 8), linear_schedule(20), GuidanceConfig(), steps=40, seed=1,
                    lr=1e-2, batch_size=8, log_every=10)
        return m, st_

    m1, s1 = run()
    m2, s2 = run()
    assert s1.step == 40 and len(s1.history) == 4
    assert s1.history == s2.history
    for p, q in zip(m1.parameters(), m2.parameters()):
        assert torch.equal(p, q)
