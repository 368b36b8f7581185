"""Closed-form alternating updates for the mask and the background.

These are shared by the classical solver (numpy, float64) and by the unfolded
network layers (torch, with learnable positive scalars).
"""
from __future__ import annotations

from revsep._backend import check_image_mask, check_same_shape, namespace
from revsep.model import ModelParams, SparsityState, l1_subgradient

QA_FLOOR = 1e-8


def _positive(name, value):
    if not value > 0:
        raise ValueError(f"{name} must be strictly positive, got {value!r}")


def update_S_closed_form(I, B_prev, S_prev, sp_prev: SparsityState, sp_cur: SparsityState,
                         params: ModelParams):
    """Exact minimiser of the Taylor surrogate (unclamped).

    S_hat = (Qb*S_prev + sum_c I^2 - sum_c I*B_prev + Qc) / Qa with
    Qa = I^2 + aL*w_k^2 + mu, Qb = aL*w_k*w_{k-1} + mu, Qd = w_{k-1}*s~_{k-1},
    Qc = aL*w_k*(w_k*s~_k - Qd) - aL*w_k*sign(w_{k-1}*S_prev - Qd).
    Colour channels share one mask, so I^2 and I*B are summed over channels.
    """
    mu, aL = params.mu, params.alphaL
    _positive("mu", mu)
    _positive("alphaL", aL)
    check_image_mask(I, S_prev)
    check_same_shape(I, B_prev, names=("I", "B_prev"))
    check_same_shape(S_prev, sp_prev.w, sp_cur.w, names=("S_prev", "w_prev", "w_cur"))

    i2 = (I * I).sum(axis=-1)
    ib = (I * B_prev).sum(axis=-1)
    w, w_prev = sp_cur.w, sp_prev.w
    q_d = w_prev * sp_prev.s_tilde
    q_a = i2 + aL * w * w + mu
    q_b = aL * w * w_prev + mu
    q_c = aL * w * (w * sp_cur.s_tilde - q_d) - aL * w * l1_subgradient(w_prev * S_prev - q_d)
    if bool((q_a <= QA_FLOOR).any()):
        raise ValueError("degenerate normal equation: Qa <= 1e-8")
    return (q_b * S_prev + i2 - ib + q_c) / q_a


def update_S_soft_threshold(I, B_prev, S_prev, sp_cur: SparsityState, params: ModelParams):
    """Gradient step on the smooth part, then soft-threshold w*(S - s~).

    The per-pixel step 1/(sum_c I^2 + mu) is the exact inverse curvature of the
    smooth part, so the threshold level is alphaL times that step.
    """
    mu, aL = params.mu, params.alphaL
    _positive("mu", mu)
    _positive("alphaL", aL)
    check_image_mask(I, S_prev)
    xp = namespace(S_prev)
    i2 = (I * I).sum(axis=-1)
    curvature = i2 + mu
    grad = -(I * (I - I * S_prev[..., None] - B_prev)).sum(axis=-1)
    step = 1.0 / curvature
    z = S_prev - step * grad - sp_cur.s_tilde
    shrunk = xp.sign(z) * xp.maximum(abs(z) - aL * step, z * 0.0)
    return sp_cur.s_tilde + sp_cur.w * shrunk + (1.0 - sp_cur.w) * z


def update_B_closed_form(I, B_prev, S_k, lambda_):
    """(lambda*B_prev + I - I*S_k) / (1 + lambda)."""
    _positive("lambda_", lambda_)
    check_image_mask(I, S_k)
    check_same_shape(I, B_prev, names=("I", "B_prev"))
    return (lambda_ * B_prev + I - I * S_k[..., None]) / (1.0 + lambda_)
