"""Foreground/background separation model: parameters, sparsity targets, objectives.

An image ``I`` is explained as ``I = I*S + B`` with a single-channel mask ``S``
broadcast over colour channels.  The residual-sparsity term pulls confident
pixels toward 0.1 / 0.9 while ignoring ambiguous ones.
"""
from __future__ import annotations

from dataclasses import dataclass

from revsep._backend import asfloat, check_image_mask, check_same_shape, namespace, where

VARIANTS = ("PM", "CM1", "CM2", "CM3", "CM4", "CM5")

# (low band, high band) mapped to 0.1 / 0.9; each band is (lo, hi, lo_closed, hi_closed).
_BANDS = {
    "PM": ((0.1, 0.4, True, False), (0.6, 0.9, False, True)),
    "CM4": ((0.1, 0.3, True, False), (0.7, 0.9, False, True)),
    "CM5": ((0.0, 0.5, True, False), (0.5, 1.0, True, True)),
}


@dataclass(frozen=True)
class ModelParams:
    mu: float = 0.5
    lambda_: float = 1.0
    alphaL: float = 0.1
    beta_reg: float = 1.0

    def __post_init__(self):
        for name in ("mu", "lambda_", "alphaL", "beta_reg"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive, got {getattr(self, name)!r}")


@dataclass
class SparsityState:
    """Uncertainty-removed target ``s_tilde`` and attention map ``w``.

    ``grad_T_prev`` is filled in by :func:`with_subgradient` when a state is
    carried over as the previous iterate.
    """

    s_tilde: object
    w: object
    grad_T_prev: object = None


def _in_band(S, band):
    lo, hi, lo_closed, hi_closed = band
    left = S >= lo if lo_closed else S > lo
    right = S <= hi if hi_closed else S < hi
    return left & right


def residual_targets(S, variant: str = "PM") -> SparsityState:
    """Map a mask to its sparsity target and binary attention map.

    PM: [0.1, 0.4) -> 0.1, (0.6, 0.9] -> 0.9, otherwise unchanged; w = 0 on
    [0.4, 0.6].  CM1 drops the constraint (w = 0), CM3 drops the attention map
    (w = 1), CM4 narrows and CM5 widens the snapping bands.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown model variant {variant!r}")
    low, high = _BANDS.get(variant, _BANDS["PM"])
    s_tilde = where(_in_band(S, low), 0.1, where(_in_band(S, high), 0.9, S))
    ambiguous = (S >= 0.4) & (S <= 0.6)
    if variant == "CM1":
        w = S * 0.0
    elif variant == "CM3":
        w = S * 0.0 + 1.0
    else:
        w = 1.0 - asfloat(ambiguous, S)
    return SparsityState(s_tilde=s_tilde, w=w)


def l1_subgradient(P):
    """Elementwise subgradient of ``||P||_1`` with sign(0) = 0."""
    return namespace(P).sign(P)


def with_subgradient(sp: SparsityState, S) -> SparsityState:
    """Attach the l1 subgradient at ``P = w*(S - s_tilde)`` to ``sp``."""
    return SparsityState(sp.s_tilde, sp.w, l1_subgradient(sp.w * (S - sp.s_tilde)))


def _fidelity_residual(I, S, B):
    check_image_mask(I, S)
    check_same_shape(I, B, names=("I", "B"))
    return I - I * S[..., None] - B


def evaluate_objective(I, S, B, params: ModelParams, sp: SparsityState):
    """Classical objective: 0.5*||I - I*S - B||^2 + alpha*||w*(S - s_tilde)||_1.

    The learned priors on S and B contribute nothing here.
    """
    r = _fidelity_residual(I, S, B)
    check_same_shape(S, sp.s_tilde, sp.w, names=("S", "s_tilde", "w"))
    sparsity = abs(sp.w * (S - sp.s_tilde)).sum()
    return 0.5 * (r * r).sum() + params.alphaL * sparsity


def surrogate_objective(I, S_hat, S_prev, B_prev, params: ModelParams,
                        sp_cur: SparsityState, sp_prev: SparsityState | None = None):
    """Quadratic surrogate minimised by the closed-form S update.

    ``sp_cur`` is built from ``S_prev`` and ``sp_prev`` from the iterate before
    it; when ``sp_prev`` is omitted the current state is used for both.  The
    Lipschitz constant of the linearised l1 term is fixed to 1, so ``alphaL``
    scales both the quadratic and the linear part.
    """
    if sp_prev is None:
        sp_prev = sp_cur
    check_same_shape(S_hat, S_prev, names=("S_hat", "S_prev"))
    r = _fidelity_residual(I, S_hat, B_prev)
    P = sp_cur.w * (S_hat - sp_cur.s_tilde)
    P_prev = sp_prev.w * (S_prev - sp_prev.s_tilde)
    lin = P - P_prev + l1_subgradient(P_prev)
    prox = S_hat - S_prev
    return (0.5 * (r * r).sum() + 0.5 * params.mu * (prox * prox).sum()
            + 0.5 * params.alphaL * (lin * lin).sum())
