"""Non-learned alternating solver (proposed or conventional model + optimisation)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from revsep.model import VARIANTS, ModelParams, evaluate_objective, residual_targets, surrogate_objective
from revsep.updates import update_B_closed_form, update_S_closed_form, update_S_soft_threshold

PROX_VARIANTS = ("median3", "identity")

# Without learned priors the separation is only weakly posed (any B = I - I*S
# fits); heavy proximal weights keep the iterates near the informative early
# split instead of drifting along that valley.
SOLVER_PARAMS = ModelParams(mu=2.0, lambda_=10.0, alphaL=0.1)


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 100
    params: ModelParams = SOLVER_PARAMS
    prox_variant: str = "median3"
    tol: float = 1e-4
    model_variant: str = "PM"

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol < 0:
            raise ValueError("tol must be nonnegative")
        if self.prox_variant not in PROX_VARIANTS:
            raise ValueError(f"unknown prox variant {self.prox_variant!r}")
        if self.model_variant not in VARIANTS:
            raise ValueError(f"unknown model variant {self.model_variant!r}")


@dataclass
class SolveResult:
    S: np.ndarray
    B: np.ndarray
    trace: list
    n_iter: int
    # (surrogate at S_prev, surrogate at S_hat) per iteration, before the prox step
    surrogate_pairs: list


def _prox(x, variant):
    if variant == "identity":
        return x
    size = (3, 3) if x.ndim == 2 else (3, 3, 1)
    return ndimage.median_filter(x, size=size, mode="nearest")


def solve(I, cfg: SolverConfig = SolverConfig()) -> SolveResult:
    """Alternate S and B updates from zero initialisation.

    Each iteration: closed-form S step, prox, clamp to [0, 1]; closed-form B
    step, prox, clamp to [0, I].  The objective is recorded after each full
    iteration; iteration stops once ``max|S_k - S_{k-1}| < tol``.
    """
    I = np.asarray(I, dtype=np.float64)
    if I.ndim != 3:
        raise ValueError(f"expected an H x W x C image, got shape {I.shape}")
    p, variant = cfg.params, cfg.model_variant
    S_prev2 = np.zeros(I.shape[:2])
    S_prev = np.zeros(I.shape[:2])
    B = np.zeros_like(I)
    trace, pairs = [], []
    n_iter = 0
    for n_iter in range(1, cfg.max_iters + 1):
        sp_prev = residual_targets(S_prev2, variant)
        sp_cur = residual_targets(S_prev, variant)
        if variant == "CM2":
            S_hat = update_S_soft_threshold(I, B, S_prev, sp_cur, p)
        else:
            S_hat = update_S_closed_form(I, B, S_prev, sp_prev, sp_cur, p)
            pairs.append((
                float(surrogate_objective(I, S_prev, S_prev, B, p, sp_cur, sp_prev)),
                float(surrogate_objective(I, S_hat, S_prev, B, p, sp_cur, sp_prev)),
            ))
        S = np.clip(_prox(S_hat, cfg.prox_variant), 0.0, 1.0)
        B_hat = update_B_closed_form(I, B, S, p.lambda_)
        B = np.clip(_prox(B_hat, cfg.prox_variant), 0.0, I)
        trace.append(float(evaluate_objective(I, S, B, p, residual_targets(S, variant))))
        converged = np.max(np.abs(S - S_prev)) < cfg.tol
        S_prev2, S_prev = S_prev, S
        if converged:
            break
    return SolveResult(S=S_prev, B=B, trace=trace, n_iter=n_iter, surrogate_pairs=pairs)
