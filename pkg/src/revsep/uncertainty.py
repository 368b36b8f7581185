"""Entropy-based uncertainty maps and the uncertainty-targeted fusion rule."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.special
import torch

from revsep._backend import asfloat, check_image_mask, check_same_shape, namespace

RATIO_EPS = 1e-3


@dataclass
class UncertaintyBundle:
    u_inter: object
    u_intra: object
    u_combined: object


def binary_entropy(p, eps: float = 0.0):
    """Pixelwise binary entropy in bits with E(0) = E(1) = 0.

    ``eps > 0`` clamps ``p`` into ``[eps, 1 - eps]`` first, which keeps
    gradients finite inside a network.
    """
    xp = namespace(p)
    if bool(((p < 0) | (p > 1)).any()):
        raise ValueError("binary_entropy expects probabilities in [0, 1]")
    if eps > 0:
        p = p.clip(eps, 1 - eps)
    if xp is torch:
        nats = -(torch.special.xlogy(p, p) + torch.special.xlogy(1 - p, 1 - p))
    else:
        nats = -(scipy.special.xlogy(p, p) + scipy.special.xlogy(1 - p, 1 - p))
    return nats / np.log(2.0)


def inter_stage_uncertainty(M_list, S_k, eps: float = 0.0):
    """Entropy of the mean of the refined masks of earlier stages and ``S_k``."""
    masks = list(M_list) + [S_k]
    for m in masks:
        check_same_shape(m, S_k, names=("M_n", "S_k"))
    mean = sum(masks[1:], masks[0]) / len(masks)
    return binary_entropy(mean.clip(0.0, 1.0), eps)


def background_ratio(B_k, I):
    """Channel-averaged B/I with the denominator guarded and the quotient clamped."""
    check_same_shape(B_k, I, names=("B_k", "I"))
    return (B_k / I.clip(RATIO_EPS, None)).clip(0.0, 1.0).mean(axis=-1)


def intra_stage_uncertainty(S_k, B_k, I, eps: float = 0.0):
    """Entropy of 0.5*(S_k + 1 - B_k/I): disagreement of the two branches."""
    check_image_mask(I, S_k)
    s_intra = (0.5 * (S_k + 1.0 - background_ratio(B_k, I))).clip(0.0, 1.0)
    return binary_entropy(s_intra, eps)


def stage_uncertainty(M_list, S_k, B_k, I, eps: float = 0.0,
                      use_inter: bool = True, use_intra: bool = True) -> UncertaintyBundle:
    """Average of inter- and intra-stage maps; a disabled map contributes zeros."""
    u_inter = inter_stage_uncertainty(M_list, S_k, eps) if use_inter else S_k * 0.0
    u_intra = intra_stage_uncertainty(S_k, B_k, I, eps) if use_intra else S_k * 0.0
    return UncertaintyBundle(u_inter, u_intra, 0.5 * (u_inter + u_intra))


def gt_uncertainty(S_k, gt_s, threshold: float = 0.5):
    """Binary map of pixels where the thresholded prediction disagrees with GT.

    Ties at the threshold round up to foreground.
    """
    check_same_shape(S_k, gt_s, names=("S_k", "gt_s"))
    pred = asfloat(S_k >= threshold, S_k)
    return asfloat(pred != gt_s, S_k)


def fuse_refined(U_k, S_r, S_k):
    """M_k = U_k*S_r + (1 - U_k)*S_k."""
    check_same_shape(U_k, S_r, S_k, names=("U_k", "S_r", "S_k"))
    return U_k * S_r + (1.0 - U_k) * S_k
