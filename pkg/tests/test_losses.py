import math

import numpy as np
import pytest
import torch

import oracles
from revsep.diffusion import make_cosine_schedule
from revsep.losses import (LossWeightsConfig, boundary_weights, dice_loss, diffusion_kl_loss, reconstruction_loss,
                           stage_weight, total_loss, weighted_bce, weighted_iou)
from revsep.network import StageState

D = torch.float64


def masks(seed, size=16):
    g = torch.Generator().manual_seed(seed)
    gt = torch.zeros(2, size, size, dtype=D)
    gt[:, 3:11, 4:12] = 1
    pred = torch.rand(2, size, size, generator=g, dtype=D) * 0.9 + 0.05
    return pred, gt


def weights_ref(gt, pool=7, gain=5.0):
    H, W = gt.shape
    r = pool // 2
    out = np.zeros((H, W))
    for y in range(H):
        for x in range(W):
            acc = 0.0
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    acc += gt[min(max(y + dy, 0), H - 1), min(max(x + dx, 0), W - 1)]
            out[y, x] = 1 + gain * abs(acc / pool ** 2 - gt[y, x])
    return out


def test_boundary_weights_match_loop():
    _, gt = masks(0)
    np.testing.assert_allclose(boundary_weights(gt[0]).numpy(), weights_ref(gt[0].numpy()), atol=1e-12)
    assert torch.equal(boundary_weights(torch.ones(8, 8, dtype=D)), torch.ones(8, 8, dtype=D))


def test_bce_examples():
    _, gt = masks(1)
    assert weighted_bce(gt.clone(), gt) <= 1e-6
    half = torch.full_like(gt, 0.5)
    assert float(weighted_bce(half, gt)) == pytest.approx(math.log(2), abs=1e-12)
    # constant gt gives unit weights, so the loss is plain mean BCE
    p = torch.rand(8, 8, dtype=D)
    plain = -torch.log(1 - p).mean()
    assert float(weighted_bce(p, torch.zeros(8, 8, dtype=D))) == pytest.approx(float(plain), abs=1e-12)


def test_iou_examples():
    _, gt = masks(2)
    assert float(weighted_iou(gt.clone(), gt)) == 0.0
    assert float(weighted_iou(1 - gt, gt)) > 0.99
    g = np.zeros((8, 8))
    g[:, :4] = 1
    w = weights_ref(g)
    ref = 1 - ((w * 0.5 * g).sum() + 1) / ((w * (0.5 + g - 0.5 * g)).sum() + 1)
    got = weighted_iou(torch.full((8, 8), 0.5, dtype=D), torch.tensor(g))
    assert float(got) == pytest.approx(ref, abs=1e-10)


def test_dice_examples():
    _, gt = masks(3)
    assert float(dice_loss(gt.clone(), gt)) == 0.0
    n = float(gt.sum())
    assert float(dice_loss(torch.zeros_like(gt), gt)) == pytest.approx(1 - 1 / (n + 1), abs=1e-12)
    p, _ = masks(4)
    pn, gn = p.numpy(), gt.numpy()
    ref = 1 - (2 * sum(a * b for a, b in zip(pn.ravel(), gn.ravel())) + 1) / (pn.sum() + gn.sum() + 1)
    assert float(dice_loss(p, gt)) == pytest.approx(ref, abs=1e-10)


def test_shape_errors():
    a = torch.zeros(4, 4, dtype=D)
    b = torch.zeros(4, 5, dtype=D)
    for fn in (weighted_bce, weighted_iou, dice_loss, reconstruction_loss):
        with pytest.raises(ValueError):
            fn(a, b)


def test_stage_weights():
    assert [stage_weight(k, 3) for k in (1, 2, 3)] == [0.25, 0.5, 1.0]
    assert stage_weight(1, 1) == 1.0


def test_config_validation():
    for bad in (dict(pool_size=4), dict(boundary_gain=-1), dict(lr=0), dict(batch_size=0), dict(lr_decay_factor=0.5)):
        with pytest.raises(ValueError):
            LossWeightsConfig(**bad)


@pytest.mark.parametrize("loss", [weighted_bce, weighted_iou, dice_loss, reconstruction_loss])
def test_mask_loss_gradients(loss):
    pred, gt = masks(5)
    if loss is reconstruction_loss:
        gt = torch.rand(2, 16, 16, generator=torch.Generator().manual_seed(9), dtype=D)
    x = pred.clone().requires_grad_(True)
    g, = torch.autograd.grad(loss(x, gt), x)
    fd = oracles.central_difference(lambda v: loss(v, gt), pred, h=1e-4, index=range(0, 512, 7))
    assert oracles.relative_error(fd, g.view(-1)[0:512:7].numpy()) < 1e-4


class TinyDenoiser(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.w = torch.nn.Parameter(torch.tensor([0.3, -0.8, 1.1, -0.2], dtype=D))

    def forward(self, m_t, t, target):
        z = self.w[0] + self.w[1] * m_t + self.w[2] * target + self.w[3] * (t.to(D) / 50).view(-1, 1, 1)
        return torch.sigmoid(z)


def test_kl_gradient():
    sched = make_cosine_schedule(50)
    S, gt = masks(6)
    den = TinyDenoiser()
    loss = diffusion_kl_loss(S, gt, den, sched, rng=3)
    g, = torch.autograd.grad(loss, den.w)

    def f(v):
        with torch.no_grad():
            den.w.copy_(v)
            return diffusion_kl_loss(S, gt, den, sched, rng=3)

    fd = oracles.central_difference(f, den.w.detach().clone(), h=1e-5)
    assert loss.item() > 0
    assert oracles.relative_error(fd, g.numpy()) < 1e-4


def test_kl_zero_for_exact_model():
    sched = make_cosine_schedule(50)
    S, gt = masks(7)
    u = (S >= 0.5).to(D) != gt
    m_0 = u.to(D) * gt
    exact = lambda m_t, t, target: (m_t - m_0).abs()
    assert float(diffusion_kl_loss(S, gt, exact, sched, rng=1)) < 1e-6


def test_kl_zero_on_frozen_chain():
    # prediction already matches the ground truth: no uncertain pixels, target = m_0 = 0
    sched = make_cosine_schedule(50)
    _, gt = masks(8)
    zero = lambda m_t, t, target: torch.zeros_like(m_t)
    assert float(diffusion_kl_loss(gt.clone(), gt, zero, sched, rng=0)) < 1e-6


def _state(k, M, E, I_hat):
    return StageState(S_k=M, B_k=None, E_k=E, I_hat_k=I_hat, M_k=M, U_k=torch.zeros_like(M), stage_index=k,
                      S_hat_k=M, image=I_hat, denoise=None)


def test_total_loss_perfect_and_weighted():
    _, gt = masks(9)
    edge = torch.zeros_like(gt)
    edge[:, 3, 4:12] = 1
    img = torch.rand(2, 3, 16, 16, dtype=D)
    perfect = [_state(k, gt.clone(), edge.clone(), img.clone()) for k in (1, 2, 3)]
    loss, parts = total_loss(perfect, gt, edge, img)
    assert float(loss) <= 1e-5
    pred, _ = masks(10)
    single = [_state(1, pred, edge, img)]
    one, _ = total_loss(single, gt, edge, img)
    three, parts = total_loss([_state(k, pred, edge, img) for k in (1, 2, 3)], gt, edge, img)
    assert float(three) == pytest.approx(1.75 * float(one), rel=1e-12)
    assert parts["kl"] == 0.0 and parts["recon"] == 0.0
    assert sum(parts.values()) == pytest.approx(float(three), rel=1e-12)
