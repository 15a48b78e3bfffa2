import math

import numpy as np
import pytest

from aidkit.errors import ConfigError, DomainError
from aidkit.numerics import SeededRng
from aidkit.scheduler import (
    FINAL,
    NoiseSchedule,
    Sampler,
    SamplerConfig,
    add_noise,
    ddim_step,
    make_timesteps,
    predict_x0,
)
from oracles import ddim_loops


def test_schedule_invariants():
    s = NoiseSchedule()
    assert s.train_steps == 100
    assert s.alphas_cumprod[0] == 1.0 - s.betas[0]
    assert np.all(np.diff(s.alphas_cumprod) < 0)
    assert np.all((s.alphas_cumprod > 0) & (s.alphas_cumprod < 1))
    # the last training step is close to pure noise
    assert s.alpha_bar(99) < 1e-4
    assert s.alpha_bar(FINAL) == 1.0


def test_classical_betas_available_explicitly():
    s = NoiseSchedule(100, beta_start=1e-4, beta_end=0.02)
    assert s.betas[0] == 1e-4 and s.betas[-1] == 0.02
    assert np.allclose(s.alphas_cumprod, np.cumprod(1 - np.linspace(1e-4, 0.02, 100)), rtol=0, atol=0)


def test_default_betas_match_thousand_step_reference_rescaled():
    s = NoiseSchedule(100)
    assert s.beta_start == pytest.approx(1e-3) and s.beta_end == pytest.approx(0.2)
    assert NoiseSchedule(1000).betas[-1] == pytest.approx(0.02)


def test_schedule_rejects_bad_betas():
    with pytest.raises(ConfigError):
        NoiseSchedule(0)
    with pytest.raises(ConfigError):
        NoiseSchedule(10, beta_start=0.5, beta_end=1.5)


def test_add_noise_examples():
    s = NoiseSchedule(1, beta_start=0.75, beta_end=0.75)
    assert s.alpha_bar(0) == 0.25
    out = add_noise(np.array([1.0]), np.array([1.0]), 0, s)
    assert out[0] == pytest.approx(0.5 + math.sqrt(0.75), abs=1e-15)
    assert out[0] == pytest.approx(1.3660, abs=1e-4)
    x0 = np.array([0.4, -2.0])
    assert np.allclose(add_noise(x0, np.zeros(2), 0, s), math.sqrt(0.25) * x0, atol=1e-15)
    s = NoiseSchedule()
    rng = SeededRng(0)
    x0, eps = rng.uniform(64) * 2 - 1, rng.normal(64)
    assert np.max(np.abs(add_noise(x0, eps, 99, s) - eps)) < 0.01
    with pytest.raises(DomainError):
        add_noise(x0, eps, 100, s)
    with pytest.raises(ConfigError):
        add_noise(x0, eps[:3], 5, s)


def test_ddim_step_matches_loop_oracle():
    s, cfg = NoiseSchedule(), SamplerConfig(clip_sample=False)
    rng = SeededRng(1)
    for j, jp in ((99, 95), (50, 10), (3, FINAL)):
        z, e = rng.normal(5), rng.normal(5)
        ref = [ddim_loops(zi, ei, s.alpha_bar(j), s.alpha_bar(jp)) for zi, ei in zip(z, e)]
        assert np.allclose(ddim_step(z, e, j, jp, cfg, s), ref, rtol=1e-13, atol=1e-12)


def test_ddim_step_examples():
    s, cfg = NoiseSchedule(), SamplerConfig()
    assert np.array_equal(ddim_step(np.zeros(4), np.zeros(4), 40, 20, cfg, s), np.zeros(4))
    z, e = SeededRng(2).normal(4) * 0.1, SeededRng(3).normal(4) * 0.1
    final = ddim_step(z, e, 3, FINAL, SamplerConfig(clip_sample=False), s)
    assert np.array_equal(final, predict_x0(z, e, 3, s))
    with pytest.raises(DomainError):
        ddim_step(z, e, 20, 40, cfg, s)


def test_ddim_inverts_add_noise():
    s = NoiseSchedule()
    rng = SeededRng(4)
    for clip in (False, True):
        cfg = SamplerConfig(clip_sample=clip)
        for _ in range(200):
            j = int(rng.integers(100, 1)[0])
            x0 = rng.uniform((4, 4)) * 2 - 1
            eps = rng.normal((4, 4))
            z = add_noise(x0, eps, j, s)
            assert np.max(np.abs(ddim_step(z, eps, j, FINAL, cfg, s) - x0)) < 1e-10
            if j > 0:
                # one intermediate step lands exactly on the forward marginal
                jp = j // 2
                assert np.allclose(ddim_step(z, eps, j, jp, cfg, s), add_noise(x0, eps, jp, s),
                                   rtol=0, atol=1e-10)


def test_clip_sample_bounds_prediction():
    s = NoiseSchedule()
    z = np.full(3, 5.0)
    out = ddim_step(z, np.zeros(3), 99, FINAL, SamplerConfig(), s)
    assert np.all(out == 1.0)


def test_make_timesteps():
    s = NoiseSchedule()
    ts = make_timesteps(SamplerConfig(), s)
    assert ts == list(range(99, 0, -4)) and len(ts) == 25
    assert make_timesteps(SamplerConfig(100), s) == list(range(99, -1, -1))
    assert make_timesteps(SamplerConfig(1), s) == [99]
    with pytest.raises(ConfigError):
        make_timesteps(SamplerConfig(101), s)


def test_sampler_config_guards():
    with pytest.raises(ConfigError):
        SamplerConfig(0)
    with pytest.raises(ConfigError):
        SamplerConfig(eta=0.5)


def test_sampler_transitions():
    trans = list(Sampler().transitions())
    assert trans[0] == (0, 99, 95)
    assert trans[-1] == (24, 3, FINAL)
    assert [t[1] for t in trans] == Sampler().timesteps
