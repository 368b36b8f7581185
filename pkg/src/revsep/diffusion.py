"""Bernoulli diffusion over binary masks with a target-directed flip kernel.

One forward step keeps the previous bit with weight ``1 - beta_t`` and
otherwise draws from the target probability::

    P[m_t = 1 | m_{t-1}] = (1 - beta_t) * m_{t-1} + beta_t * target

Composing ``t`` steps from a binary ``m_0`` gives the XOR form
``m_t = m_0 xor eps`` with ``eps ~ Bernoulli((1 - abar_t) * |target - m_0|)``,
so pixels with ``target == m_0`` never move.  Everything here works on numpy
arrays and torch tensors; timesteps may be an int or one int per leading
batch element.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.special
import torch

from revsep._backend import asfloat, check_same_shape, namespace, where

BETA_MIN, BETA_MAX = 1e-5, 0.999
COSINE_OFFSET = 0.008


@dataclass(frozen=True)
class NoiseSchedule:
    """``beta[t-1]`` is the step-t noise level; ``alpha_bar`` has T+1 entries, ``alpha_bar[0] = 1``."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @classmethod
    def from_betas(cls, beta) -> "NoiseSchedule":
        beta = np.asarray(beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ValueError("beta must be a non-empty 1-D sequence")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("every beta_t must lie in (0, 1)")
        alpha = 1.0 - beta
        alpha_bar = np.concatenate([[1.0], np.cumprod(alpha)])
        return cls(T=beta.size, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def make_cosine_schedule(T: int = 1000, s: float = COSINE_OFFSET) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos((steps / T + s) / (1 + s) * np.pi / 2) ** 2
    abar = f / f[0]
    beta = np.clip(1.0 - abar[1:] / abar[:-1], BETA_MIN, BETA_MAX)
    return NoiseSchedule.from_betas(beta)


def timestep_ladder(T: int, n_steps: int) -> list[int]:
    """``n_steps`` evenly spaced timesteps from T down to 1 (all of them if n_steps >= T)."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if n_steps >= T:
        return list(range(T, 0, -1))
    if n_steps == 1:
        return [T]
    return [int(v) for v in np.rint(np.linspace(T, 1, n_steps))]


def _abar(sched: NoiseSchedule, t, like):
    """alpha_bar at ``t`` shaped to broadcast against ``like``."""
    if isinstance(t, (int, np.integer)):
        return float(sched.alpha_bar[int(t)])
    if isinstance(like, torch.Tensor):
        idx = torch.as_tensor(t, device=like.device).long()
        vals = torch.as_tensor(sched.alpha_bar, dtype=like.dtype, device=like.device)[idx]
    else:
        vals = sched.alpha_bar[np.asarray(t, dtype=np.int64)]
    return vals.reshape((-1,) + (1,) * (like.ndim - 1))


def _check_t(t, lo, hi, what="t"):
    arr = np.asarray(t.cpu() if isinstance(t, torch.Tensor) else t)
    if arr.size == 0 or arr.min() < lo or arr.max() > hi:
        raise ValueError(f"{what} must lie in [{lo}, {hi}], got {t!r}")


def _uniform(like, rng):
    if isinstance(like, torch.Tensor):
        if not isinstance(rng, torch.Generator):
            seed = int(rng) if rng is not None else 0
            rng = torch.Generator(device=like.device).manual_seed(seed)
        return torch.rand(like.shape, generator=rng, dtype=like.dtype, device=like.device)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return rng.random(like.shape)


def bernoulli_sample(p, rng):
    """Draw a {0, 1} array with pixelwise probability ``p``."""
    return asfloat(_uniform(p, rng) < p, p)


def flip_probability(m_0, target, t, sched: NoiseSchedule):
    return (1.0 - _abar(sched, t, m_0)) * abs(target - m_0)


def forward_marginal_prob(m_0, target, t, sched: NoiseSchedule):
    """P[m_t = 1 | m_0] for the XOR-form corruption."""
    _check_t(t, 1, sched.T)
    check_same_shape(m_0, target, names=("m_0", "target"))
    p = flip_probability(m_0, target, t, sched)
    return m_0 * (1.0 - p) + (1.0 - m_0) * p


def forward_sample(m_0, target, t, sched: NoiseSchedule, rng=0):
    """m_t = m_0 xor eps with eps ~ Bernoulli((1 - abar_t) * |target - m_0|)."""
    _check_t(t, 1, sched.T)
    check_same_shape(m_0, target, names=("m_0", "target"))
    eps = bernoulli_sample(flip_probability(m_0, target, t, sched), rng)
    return abs(m_0 - eps)


def posterior_prob(m_t, m_0, target, t, sched: NoiseSchedule, t_prev=None):
    """P[m_{t_prev} = 1 | m_t, m_0, target] by exact Bayes over the binary latent.

    ``t_prev`` defaults to ``t - 1`` (then ``t >= 2`` is required); a larger
    gap uses the composed kernel with ratio ``abar_t / abar_{t_prev}``, which is
    how strided sampling keeps the full chain's marginals.  A real-valued
    ``m_0`` enters linearly through the marginal at ``t_prev``.
    Observations with zero likelihood return ``m_t`` unchanged.
    """
    if t_prev is None:
        _check_t(t, 2, sched.T)
        t_prev = t - 1
    else:
        _check_t(t, 1, sched.T)
        _check_t(t_prev, 0, sched.T - 1, "t_prev")
        if np.any(np.asarray(t_prev.cpu() if isinstance(t_prev, torch.Tensor) else t_prev)
                  >= np.asarray(t.cpu() if isinstance(t, torch.Tensor) else t)):
            raise ValueError("t_prev must be smaller than t")
    check_same_shape(m_t, m_0, target, names=("m_t", "m_0", "target"))
    abar_s = _abar(sched, t_prev, m_t)
    r = _abar(sched, t, m_t) / abar_s
    a = abar_s * m_0 + (1.0 - abar_s) * target
    keep_one = r + (1.0 - r) * target          # P[m_t = 1 | m_s = 1]
    gain_one = (1.0 - r) * target              # P[m_t = 1 | m_s = 0]
    lik1 = m_t * keep_one + (1.0 - m_t) * (1.0 - keep_one)
    lik0 = m_t * gain_one + (1.0 - m_t) * (1.0 - gain_one)
    num = a * lik1
    den = num + (1.0 - a) * lik0
    ok = den > 0
    return where(ok, num / where(ok, den, den * 0.0 + 1.0), m_t)


def bernoulli_kl(p, q, eps: float = 1e-7):
    """Pixelwise KL(Bern(p) || Bern(q)) in nats; ``q`` is clamped to [eps, 1-eps]."""
    q = q.clip(eps, 1.0 - eps)
    if namespace(p) is torch:
        xlogy = torch.special.xlogy
    else:
        xlogy = scipy.special.xlogy
    return xlogy(p, p) - xlogy(p, q) + xlogy(1.0 - p, 1.0 - p) - xlogy(1.0 - p, 1.0 - q)


@dataclass
class DiffusionState:
    m_t: object
    t: int
    target: object

    def __post_init__(self):
        if not 0 <= self.t:
            raise ValueError("t must be nonnegative")


def denoise_step(state: DiffusionState, denoiser, sched: NoiseSchedule, rng=0, t_prev=None):
    """One reverse step ``t -> t_prev`` (default ``t - 1``).

    ``denoiser(m_t, t, target)`` returns the predicted flip probability; the
    implied clean estimate ``|m_t - eps_hat|`` replaces ``m_0`` in the posterior.
    """
    t = state.t
    if t < 1:
        raise ValueError("cannot denoise below t = 0")
    if t_prev is None:
        t_prev = t - 1
    eps_hat = denoiser(state.m_t, t, state.target)
    m0_hat = abs(state.m_t - eps_hat)
    p = posterior_prob(state.m_t, m0_hat, state.target, t, sched, t_prev=t_prev)
    return DiffusionState(bernoulli_sample(p, rng), t_prev, state.target)


def sample_refined(S_k, U_k, denoiser, sched: NoiseSchedule, n_steps: int = 5, rng=0):
    """Refine ``S_k`` inside the uncertain region ``U_k`` by strided reverse sampling.

    Starts from ``m_T ~ Bernoulli(U_k * S_k)`` and walks the timestep ladder;
    the last step returns the real-valued clean estimate instead of a sample.
    """
    check_same_shape(S_k, U_k, names=("S_k", "U_k"))
    if isinstance(rng, (int, np.integer)) or rng is None:
        seed = int(rng or 0)
        rng = (torch.Generator(device=S_k.device).manual_seed(seed)
               if isinstance(S_k, torch.Tensor) else np.random.default_rng(seed))
    target = U_k * S_k
    m = bernoulli_sample(target, rng)
    ladder = timestep_ladder(sched.T, n_steps)
    for i, t in enumerate(ladder):
        eps_hat = denoiser(m, t, target)
        m0_hat = abs(m - eps_hat)
        if i == len(ladder) - 1:
            return m0_hat
        p = posterior_prob(m, m0_hat, target, t, sched, t_prev=ladder[i + 1])
        m = bernoulli_sample(p, rng)
    raise AssertionError("unreachable")
