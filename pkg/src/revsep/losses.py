"""Training losses: boundary-weighted BCE/IoU, edge Dice, reconstruction and diffusion KL."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from revsep.data import derive_edge_gt  # noqa: F401  (re-exported)
from revsep.diffusion import bernoulli_kl, forward_sample, posterior_prob
from revsep.uncertainty import gt_uncertainty

PRED_CLAMP = 1e-7
COMPONENTS = ("bce", "iou", "dice", "recon", "kl")


@dataclass(frozen=True)
class LossWeightsConfig:
    pool_size: int = 7
    boundary_gain: float = 5.0
    lr: float = 1e-4
    batch_size: int = 8
    epochs: int = 200
    lr_decay_every: int = 80
    lr_decay_factor: float = 10.0

    def __post_init__(self):
        if self.pool_size < 1 or self.pool_size % 2 == 0:
            raise ValueError("pool_size must be a positive odd integer")
        if self.boundary_gain < 0:
            raise ValueError("boundary_gain must be nonnegative")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1 or self.epochs < 1 or self.lr_decay_every < 1:
            raise ValueError("batch_size, epochs and lr_decay_every must be >= 1")
        if not self.lr_decay_factor >= 1:
            raise ValueError("lr_decay_factor must be >= 1")


def stage_weight(k: int, K: int) -> float:
    return 2.0 ** (k - K)


def _as_batch(x):
    return x[None] if x.ndim == 2 else x


def boundary_weights(gt, cfg: LossWeightsConfig = LossWeightsConfig()):
    """1 + gain * |avgpool(gt) - gt| with replicate padding."""
    g = _as_batch(gt)[:, None]
    pad = cfg.pool_size // 2
    pooled = F.avg_pool2d(F.pad(g, (pad, pad, pad, pad), mode="replicate"), cfg.pool_size, stride=1)
    return (1.0 + cfg.boundary_gain * (pooled - g).abs())[:, 0].reshape(gt.shape)


def _check(pred, gt):
    if pred.shape != gt.shape:
        raise ValueError(f"pred {tuple(pred.shape)} and gt {tuple(gt.shape)} differ in shape")


def weighted_bce(pred, gt, cfg: LossWeightsConfig = LossWeightsConfig()):
    _check(pred, gt)
    w = boundary_weights(gt, cfg)
    p = pred.clamp(PRED_CLAMP, 1 - PRED_CLAMP)
    bce = -(gt * torch.log(p) + (1 - gt) * torch.log(1 - p))
    return (w * bce).sum() / w.sum()


def weighted_iou(pred, gt, cfg: LossWeightsConfig = LossWeightsConfig(), eps: float = 1.0):
    _check(pred, gt)
    w = boundary_weights(gt, cfg)
    inter = (w * pred * gt).sum()
    union = (w * (pred + gt - pred * gt)).sum()
    return 1 - (inter + eps) / (union + eps)


def dice_loss(pred_edge, gt_e):
    _check(pred_edge, gt_e)
    return 1 - (2 * (pred_edge * gt_e).sum() + 1) / (pred_edge.sum() + gt_e.sum() + 1)


def reconstruction_loss(I_hat, target):
    _check(I_hat, target)
    return ((I_hat - target) ** 2).mean()


def diffusion_kl_loss(S_k, gt_s, denoiser, sched, rng=0, cond=None, t=None):
    """Mean pixelwise KL between the true and the model reverse-step posteriors.

    The chain starts at the ground truth inside the uncertain region
    (m_0 = U_GT*GT) and moves toward the prediction (target U_GT*S_k).
    ``cond`` is what the model is conditioned on; it defaults to that target.
    """
    S_k = S_k.detach()
    if not isinstance(rng, torch.Generator):
        rng = torch.Generator(device=S_k.device).manual_seed(int(rng or 0))
    n = S_k.shape[0]
    if t is None:
        t = torch.randint(2, sched.T + 1, (n,), generator=rng, device=S_k.device)
    u_gt = gt_uncertainty(S_k, gt_s)
    target = u_gt * S_k
    m_0 = u_gt * gt_s
    m_t = forward_sample(m_0, target, t, sched, rng)
    q = posterior_prob(m_t, m_0, target, t, sched)
    c = target if cond is None else cond
    eps_hat = denoiser(m_t, t, c)
    p = posterior_prob(m_t, (m_t - eps_hat).abs(), c, t, sched)
    return bernoulli_kl(q, p).mean()


def stage_losses(state, gt_s, gt_e, target_image, cfg, kl=None, edges=True):
    out = {
        "bce": weighted_bce(state.M_k, gt_s, cfg),
        "iou": weighted_iou(state.M_k, gt_s, cfg),
        "dice": dice_loss(state.E_k, gt_e) if edges else state.M_k.new_zeros(()),
        "recon": reconstruction_loss(state.I_hat_k, target_image),
        "kl": kl if kl is not None else state.M_k.new_zeros(()),
    }
    return out


def total_loss(states, gt_s, gt_e, target_image, cfg: LossWeightsConfig = LossWeightsConfig(),
               fine_stages=(), sched=None, rng=None, edges=True, cond_from_uncertainty=True):
    """Deep-supervised sum over stages with weights 2^(k-K).

    Returns ``(loss, parts)`` where ``parts`` maps each component name to its
    stage-weighted total as a float.  The KL term is computed only for stages
    listed in ``fine_stages`` whose state carries a denoiser.
    """
    K = len(states)
    total = states[0].M_k.new_zeros(())
    parts = {name: 0.0 for name in COMPONENTS}
    for state in states:
        k = state.stage_index
        kl = None
        if k in fine_stages and state.denoise is not None:
            cond = (state.U_k * state.S_k).detach() if cond_from_uncertainty else None
            kl = diffusion_kl_loss(state.S_k, gt_s, state.denoise, sched, rng, cond=cond)
        terms = stage_losses(state, gt_s, gt_e, target_image, cfg, kl, edges)
        wk = stage_weight(k, K)
        for name, value in terms.items():
            total = total + wk * value
            parts[name] += wk * float(value.detach())
    return total, parts
