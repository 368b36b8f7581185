import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from revsep.diffusion import (BETA_MAX, BETA_MIN, DiffusionState, NoiseSchedule, bernoulli_kl, bernoulli_sample,
                              denoise_step, forward_marginal_prob, forward_sample, make_cosine_schedule,
                              posterior_prob, sample_refined, timestep_ladder)


def random_schedule(seed, T=5):
    rng = np.random.default_rng(seed)
    return NoiseSchedule.from_betas(rng.uniform(0.02, 0.9, T))


def test_cosine_schedule():
    s = make_cosine_schedule(1000)
    assert s.alpha_bar[0] == 1.0
    assert s.alpha_bar[-1] < 0.01
    assert np.all(s.beta >= BETA_MIN) and np.all(s.beta <= BETA_MAX)
    assert np.all(np.diff(s.alpha_bar) < 0)
    np.testing.assert_allclose(s.alpha, 1 - s.beta)
    # before clamping the schedule follows the cosine formula
    t = np.arange(1, 1000)
    f = np.cos((t / 1000 + 0.008) / 1.008 * np.pi / 2) ** 2 / np.cos(0.008 / 1.008 * np.pi / 2) ** 2
    np.testing.assert_allclose(s.alpha_bar[1:1000], f, rtol=1e-6)
    with pytest.raises(ValueError):
        make_cosine_schedule(0)


def test_schedule_validation():
    with pytest.raises(ValueError):
        NoiseSchedule.from_betas([0.5, 1.0])
    with pytest.raises(ValueError):
        NoiseSchedule.from_betas([])


def test_ladder():
    assert timestep_ladder(1000, 5) == [1000, 750, 500, 251, 1]
    assert timestep_ladder(4, 10) == [4, 3, 2, 1]
    assert timestep_ladder(10, 1) == [10]
    with pytest.raises(ValueError):
        timestep_ladder(10, 0)


@pytest.mark.parametrize("t", range(1, 7))
def test_marginal_matches_step_composition(t):
    sched = random_schedule(t, T=6)
    for m0, target in itertools.product((0, 1), (0.0, 0.3, 1.0)):
        ref = oracles.enumerate_marginal(m0, target, sched.beta, t)
        got = forward_marginal_prob(np.array([float(m0)]), np.array([target]), t, sched)[0]
        assert got == pytest.approx(ref, abs=1e-10)


def test_marginal_values():
    sched = NoiseSchedule.from_betas([0.75])
    assert forward_marginal_prob(np.zeros(1), np.ones(1), 1, sched)[0] == pytest.approx(0.75)
    m0 = np.array([0.0, 1.0, 1.0])
    np.testing.assert_array_equal(forward_marginal_prob(m0, m0.copy(), 1, sched), m0)
    with pytest.raises(ValueError):
        forward_marginal_prob(m0, m0, 2, sched)


def test_forward_marginal_monte_carlo():
    # 10^5 independent chains composed step by step against the closed form
    sched = make_cosine_schedule(1000)
    rng = np.random.default_rng(0)
    n = 100_000
    m0 = np.zeros(n)
    target = np.ones(n)
    t_star = int(np.argmin(np.abs(sched.alpha_bar - 0.25)))
    m = m0.copy()
    for t in range(1, t_star + 1):
        p1 = (1 - sched.beta[t - 1]) * m + sched.beta[t - 1] * target
        m = (rng.random(n) < p1).astype(float)
    ref = forward_marginal_prob(m0[:1], target[:1], t_star, sched)[0]
    assert abs(m.mean() - ref) < 0.01
    assert abs(ref - (1 - sched.alpha_bar[t_star])) < 1e-12


def test_forward_sample_frequency_and_determinism():
    sched = make_cosine_schedule(100)
    n = 100_000
    m0 = np.zeros(n)
    target = np.full(n, 0.6)
    t = 40
    a = forward_sample(m0, target, t, sched, rng=3)
    p = (1 - sched.alpha_bar[t]) * 0.6
    se = np.sqrt(p * (1 - p) / n)
    assert abs(a.mean() - p) < 3 * se
    assert np.array_equal(a, forward_sample(m0, target, t, sched, rng=3))
    assert set(np.unique(a)) <= {0.0, 1.0}
    frozen = np.array([0.0, 1.0, 1.0, 0.0])
    assert np.array_equal(forward_sample(frozen, frozen.copy(), t, sched, rng=1), frozen)


def test_forward_sample_torch():
    sched = make_cosine_schedule(100)
    m0 = torch.zeros(2, 8, 8, dtype=torch.float64)
    out = forward_sample(m0, torch.ones_like(m0), torch.tensor([1, 100]), sched, rng=0)
    assert out.shape == m0.shape
    assert out[1].mean() > 0.9 and out[0].sum() <= 4


@pytest.mark.parametrize("seed", range(5))
def test_posterior_matches_enumeration(seed):
    sched = random_schedule(seed)
    for t in range(2, 6):
        for m0, mt, target in itertools.product((0, 1), (0, 1), (0.0, 0.35, 1.0)):
            num, den = oracles.enumerate_posterior(m0, mt, target, sched.beta, t, t - 1)
            got = posterior_prob(np.array([float(mt)]), np.array([float(m0)]), np.array([target]), t, sched)[0]
            if den > 0:
                assert got == pytest.approx(num / den, abs=1e-10)
            else:
                assert got == mt


@pytest.mark.parametrize("s", [0, 1, 2])
def test_strided_posterior_matches_enumeration(s):
    sched = random_schedule(11)
    t = 5
    for m0, mt, target in itertools.product((0, 1), (0, 1), (0.0, 0.6, 1.0)):
        num, den = oracles.enumerate_posterior(m0, mt, target, sched.beta, t, s)
        got = posterior_prob(np.array([float(mt)]), np.array([float(m0)]), np.array([target]), t, sched, t_prev=s)[0]
        if den > 0:
            assert got == pytest.approx(num / den, abs=1e-10)


def test_posterior_limits():
    sched = random_schedule(2)
    m0 = np.array([0.0, 1.0])
    np.testing.assert_array_equal(posterior_prob(m0, m0, m0.copy(), 3, sched), m0)
    tiny = NoiseSchedule.from_betas([0.3, 1e-12])
    mt = np.array([0.0, 1.0, 1.0, 0.0])
    post = posterior_prob(mt, np.array([1.0, 0.0, 1.0, 0.0]), np.full(4, 0.5), 2, tiny)
    np.testing.assert_allclose(post, mt, atol=1e-9)
    with pytest.raises(ValueError):
        posterior_prob(mt, mt, mt, 1, sched)
    with pytest.raises(ValueError):
        posterior_prob(mt, mt, mt, 3, sched, t_prev=3)


@settings(max_examples=50)
@given(st.floats(0, 1), st.floats(0, 1), st.integers(2, 5))
def test_posterior_accepts_real_m0_linearly(m0, target, t):
    sched = random_schedule(4)
    p = posterior_prob(np.array([1.0]), np.array([m0]), np.array([target]), t, sched)[0]
    assert 0.0 <= p <= 1.0


def test_bernoulli_kl():
    p = np.array([0.0, 1.0, 0.3])
    assert np.all(bernoulli_kl(p, p) < 1e-6)
    np.testing.assert_allclose(bernoulli_kl(np.array([1.0, 0.0]), np.array([0.5, 0.5])), np.log(2))
    q = torch.tensor([0.2, 0.7], dtype=torch.float64)
    assert torch.all(bernoulli_kl(q.flip(0), q) > 0)


def test_denoise_step_identity_when_no_noise_predicted():
    sched = make_cosine_schedule(50)
    m = (np.random.default_rng(0).random((8, 8)) < 0.5).astype(float)
    state = DiffusionState(m, 20, m.copy())
    out = denoise_step(state, lambda m_t, t, tgt: np.zeros_like(m_t), sched, rng=1)
    assert out.t == 19
    assert np.array_equal(out.m_t, m)
    with pytest.raises(ValueError):
        denoise_step(DiffusionState(m, 0, m), lambda *a: m, sched)


def test_reverse_chain_with_oracle_denoiser_recovers_m0():
    sched = make_cosine_schedule(20)
    rng = np.random.default_rng(0)
    n = 10_000
    m0 = (rng.random(n) < 0.4).astype(float)
    target = rng.random(n)
    state = DiffusionState(forward_sample(m0, target, 20, sched, rng=rng), 20, target)
    oracle = lambda m_t, t, tgt: np.abs(m_t - m0)
    while state.t > 0:
        state = denoise_step(state, oracle, sched, rng=rng)
        assert set(np.unique(state.m_t)) <= {0.0, 1.0}
    assert np.abs(state.m_t - m0).mean() < 0.02


def test_sample_refined_frozen_and_zero():
    sched = make_cosine_schedule(1000)
    S = np.random.default_rng(1).random((16, 16))
    zero = sample_refined(S, np.zeros_like(S), lambda m, t, tgt: np.zeros_like(m), sched, n_steps=5)
    np.testing.assert_array_equal(zero, np.zeros_like(S))
    binary = (S > 0.5).astype(float)
    for n in (1, 2, 5, 17):
        out = sample_refined(binary, np.ones_like(S), lambda m, t, tgt: np.zeros_like(m), sched, n_steps=n, rng=n)
        np.testing.assert_array_equal(out, binary)


def test_sample_refined_full_ladder_is_stepwise():
    sched = make_cosine_schedule(6)
    S = np.random.default_rng(2).random((4, 4))
    U = np.random.default_rng(3).random((4, 4))
    calls = []

    def den(m, t, tgt):
        calls.append(t)
        return np.full_like(m, 0.2)

    sample_refined(S, U, den, sched, n_steps=6, rng=0)
    assert calls == [6, 5, 4, 3, 2, 1]


def test_sample_refined_seeded():
    sched = make_cosine_schedule(100)
    S = torch.rand(2, 8, 8, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    den = lambda m, t, tgt: torch.full_like(m, 0.3)
    a = sample_refined(S, S, den, sched, rng=4)
    b = sample_refined(S, S, den, sched, rng=4)
    assert torch.equal(a, b)


def test_bernoulli_sample_extremes():
    p = np.array([0.0, 1.0, 0.0, 1.0])
    assert np.array_equal(bernoulli_sample(p, 0), p)
