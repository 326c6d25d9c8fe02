import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from graphdiff.diffusion import (
    SamplerConfig,
    ddim_step,
    ddim_timesteps,
    ddpm_reverse_step,
    forward_sample,
    forward_step,
    predict_x0,
    sample,
    sample_items,
)
from graphdiff.evaluation import GroundTruthOracle
from graphdiff.schedule import cosine_schedule, linear_schedule, posterior_mean_coeffs
from graphdiff.skeleton import h36m17

SCH = cosine_schedule(100)


def exact_eps(x0, sch):
    def denoise(x_t, t, y):
        ab = torch.tensor(np.array(sch.alpha_bar), dtype=x_t.dtype)[t - 1].reshape(-1, 1, 1)
        return (x_t - ab.sqrt() * x0) / (1 - ab).sqrt()

    return denoise


def test_forward_sample_closed_form():
    g = torch.Generator().manual_seed(0)
    x0 = torch.randn(4, 5, 3, generator=g, dtype=torch.float64)
    noise = torch.randn(4, 5, 3, generator=g, dtype=torch.float64)
    t = torch.tensor([1, 10, 50, 100])
    out = forward_sample(x0, t, SCH, noise)
    for i, ti in enumerate(t.tolist()):
        ab = SCH.alpha_bar_at(ti)
        torch.testing.assert_close(out[i], math.sqrt(ab) * x0[i] + math.sqrt(1 - ab) * noise[i])
        torch.testing.assert_close(forward_sample(x0[i], ti, SCH, noise[i]), out[i])


def test_markov_chain_composes_to_closed_form():
    g = torch.Generator().manual_seed(1)
    n, t = 200_000, 30
    x0 = torch.full((n, 1, 1), 0.8, dtype=torch.float64)
    x = x0
    for s in range(1, t + 1):
        x = forward_step(x, s, SCH, torch.randn(x.shape, generator=g, dtype=torch.float64))
    ab = SCH.alpha_bar_at(t)
    assert x.mean().item() == pytest.approx(math.sqrt(ab) * 0.8, rel=0.02)
    assert x.var().item() == pytest.approx(1 - ab, rel=0.02)


@settings(max_examples=25, deadline=None)
@given(t=st.integers(1, 100), seed=st.integers(0, 10_000))
def test_predict_x0_inverts_forward(t, seed):
    g = torch.Generator().manual_seed(seed)
    x0 = torch.randn(3, 4, 3, generator=g, dtype=torch.float64)
    noise = torch.randn(3, 4, 3, generator=g, dtype=torch.float64)
    x_t = forward_sample(x0, t, SCH, noise)
    tol = 1e-9 / math.sqrt(SCH.alpha_bar_at(t))
    torch.testing.assert_close(predict_x0(x_t, t, noise, SCH), x0, atol=tol, rtol=0)


@settings(max_examples=25, deadline=None)
@given(t=st.integers(1, 100))
def test_reverse_mean_is_posterior_mean(t):
    g = torch.Generator().manual_seed(t)
    x0 = torch.randn(2, 4, 3, generator=g, dtype=torch.float64)
    noise = torch.randn(2, 4, 3, generator=g, dtype=torch.float64)
    x_t = forward_sample(x0, t, SCH, noise)
    c0, ct = posterior_mean_coeffs(SCH, t)
    torch.testing.assert_close(ddpm_reverse_step(x_t, t, noise, SCH), c0 * x0 + ct * x_t)


def test_first_reverse_step_is_noise_free():
    x0 = torch.randn(2, 4, 3, dtype=torch.float64)
    noise = torch.randn(2, 4, 3, dtype=torch.float64)
    x1 = forward_sample(x0, 1, SCH, noise)
    out = ddpm_reverse_step(x1, 1, noise, SCH, noise=torch.full_like(x0, 1e6))
    torch.testing.assert_close(out, x0)


def test_clip_bounds_x0_estimate():
    x_t = torch.full((1, 2, 3), 50.0)
    assert predict_x0(x_t, 10, torch.zeros_like(x_t), SCH, clip=3.0).abs().max() == 3.0


def test_ddim_with_eta_one_uses_posterior_std():
    t = 40
    x_t = torch.zeros(1, 1, 1, dtype=torch.float64)
    eps = torch.zeros_like(x_t)
    z = torch.ones_like(x_t)
    diff = ddim_step(x_t, t, t - 1, eps, SCH, eta=1.0, noise=z) - ddim_step(x_t, t, t - 1, eps, SCH, eta=0.0)
    assert diff.item() == pytest.approx(math.sqrt(SCH.posterior_variance[t - 1]), rel=1e-12)


@pytest.mark.parametrize("sch", [cosine_schedule(100), linear_schedule(100)])
@pytest.mark.parametrize("steps", [1, 7, 10, 50, 100])
def test_ddim_deterministic_recovers_x0_with_exact_noise(sch, steps):
    g = torch.Generator().manual_seed(steps)
    x0 = torch.randn(3, 5, 3, generator=g, dtype=torch.float64) * 0.5
    x = torch.randn(3, 5, 3, generator=g, dtype=torch.float64)
    den = exact_eps(x0, sch)
    seq = ddim_timesteps(100, steps)
    # the oracle only returns the true noise if the start matches q(x_T | x0)
    x = forward_sample(x0, 100, sch, x)
    for t, t_next in zip(seq[:-1], seq[1:]):
        x = ddim_step(x, t, t_next, den(x, torch.full((3,), t), None), sch)
    torch.testing.assert_close(x, x0, atol=1e-8, rtol=0)


@settings(max_examples=40, deadline=None)
@given(T=st.integers(1, 500), data=st.data())
def test_ddim_timesteps_properties(T, data):
    steps = data.draw(st.integers(1, T))
    seq = ddim_timesteps(T, steps)
    assert len(seq) == steps + 1
    assert seq[0] == T and seq[-1] == 0
    assert all(a > b for a, b in zip(seq, seq[1:]))


def test_ddim_timesteps_rejects_bad_counts():
    with pytest.raises(ValueError):
        ddim_timesteps(100, 0)
    with pytest.raises(ValueError):
        ddim_timesteps(100, 101)


def test_step_errors():
    x = torch.zeros(1, 2, 3)
    with pytest.raises(ValueError):
        ddim_step(x, 10, 10, x, SCH)
    with pytest.raises(ValueError):
        ddim_step(x, 10, 5, x, SCH, eta=0.5)
    with pytest.raises(ValueError):
        ddpm_reverse_step(x, 0, x, SCH)
    with pytest.raises(ValueError):
        forward_sample(x, 101, SCH, x)
    with pytest.raises(ValueError):
        forward_sample(x, 5, SCH, torch.zeros(1, 2, 2))


@pytest.mark.parametrize("cfg", [SamplerConfig(), SamplerConfig(mode="ddim", ddim_steps=10),
                                 SamplerConfig(mode="ddim", ddim_steps=25, ddim_eta=0.5)])
def test_oracle_sampling_returns_clean_pose(cfg):
    x0 = torch.randn(4, 17, 3, dtype=torch.float64) * 0.3
    y = torch.zeros(4, 17, 2, dtype=torch.float64)
    cfg = SamplerConfig(**{**cfg.__dict__, "num_hypotheses": 3, "clip_x0": None})
    out = sample_items(GroundTruthOracle(x0, SCH, 3), y, SCH, cfg)
    assert out.shape == (4, 3, 17, 3)
    torch.testing.assert_close(out, x0[:, None].expand_as(out), atol=1e-8, rtol=0)


def _shrink(x_t, t, y):
    return 0.1 * x_t + 0.05 * y.sum(-1, keepdim=True)


def test_sampling_independent_of_batch_grouping():
    y = torch.randn(5, 17, 2, dtype=torch.float64)
    cfg = SamplerConfig(num_hypotheses=3, seed=11)
    full = sample_items(_shrink, y, SCH, cfg)
    chunked = sample_items(_shrink, y, SCH, cfg, max_batch=2)
    assert torch.equal(full, chunked)
    one = sample_items(_shrink, y[2:3], SCH, cfg, item_ids=[2])
    assert torch.equal(one[0], full[2])
    single = sample(_shrink, y[2], SCH, cfg)
    assert single.shape == (17, 3)


def test_hypotheses_differ_and_seed_controls_them():
    y = torch.randn(2, 17, 2, dtype=torch.float64)
    a = sample_items(_shrink, y, SCH, SamplerConfig(num_hypotheses=4, seed=1))
    b = sample_items(_shrink, y, SCH, SamplerConfig(num_hypotheses=4, seed=1))
    c = sample_items(_shrink, y, SCH, SamplerConfig(num_hypotheses=4, seed=2))
    assert torch.equal(a, b)
    assert not torch.equal(a, c)
    assert not torch.equal(a[0, 0], a[0, 1])


def test_flip_test_averages_mirrored_run():
    spec = h36m17()
    y = torch.randn(2, 17, 2, dtype=torch.float64)
    cfg = SamplerConfig(mode="ddim", ddim_steps=5, flip_test=True)

    def mirror_equivariant(x_t, t, y):
        return 0.1 * x_t

    out = sample_items(mirror_equivariant, y, SCH, cfg, skeleton=spec)
    assert out.shape == (2, 1, 17, 3)
    with pytest.raises(ValueError):
        sample_items(mirror_equivariant, y, SCH, cfg)


@pytest.mark.parametrize("kwargs", [dict(mode="euler"), dict(num_hypotheses=0), dict(ddim_steps=0),
                                    dict(ddim_eta=1.5), dict(clip_x0=0.0)])
def test_sampler_config_validation(kwargs):
    with pytest.raises(ValueError):
        SamplerConfig(**kwargs)
