"""Independent reference computations used by the tests.

Nothing here imports the package's math; each routine re-derives its
quantity from the defining formula, by brute force or by plain iteration.
"""
import itertools
import math

import numpy as np
import torch


# --------------------------------------------------------------------------- model

def snap(v):
    if 0.1 <= v < 0.4:
        return 0.1
    if 0.6 < v <= 0.9:
        return 0.9
    return v


def attention(v):
    return 0.0 if 0.4 <= v <= 0.6 else 1.0


def objective(I, S, B, alpha):
    total = 0.0
    H, W, C = I.shape
    for y in range(H):
        for x in range(W):
            for c in range(C):
                r = I[y, x, c] - I[y, x, c] * S[y, x] - B[y, x, c]
                total += 0.5 * r * r
            total += alpha * abs(attention(S[y, x]) * (S[y, x] - snap(S[y, x])))
    return total


def surrogate_terms(I, S_hat, S_prev, S_prev2, B_prev, mu, aL):
    """Per-pixel surrogate written with explicit loops; torch so it can be differentiated."""
    H, W, C = I.shape
    total = torch.zeros((), dtype=torch.float64)
    for y in range(H):
        for x in range(W):
            for c in range(C):
                r = I[y, x, c] - I[y, x, c] * S_hat[y, x] - B_prev[y, x, c]
                total = total + 0.5 * r * r
            total = total + 0.5 * mu * (S_hat[y, x] - S_prev[y, x]) ** 2
            sp, sp2 = float(S_prev[y, x]), float(S_prev2[y, x])
            w, w2 = attention(sp), attention(sp2)
            p = w * (S_hat[y, x] - snap(sp))
            p_prev = w2 * (sp - snap(sp2))
            total = total + 0.5 * aL * (p - p_prev + float(np.sign(p_prev))) ** 2
    return total


def gradient_descent(f, x0, steps=5000, lr=0.1, tol=1e-9):
    """Plain gradient descent with autograd gradients until the gradient norm is below tol."""
    x = torch.tensor(x0, dtype=torch.float64, requires_grad=True)
    for _ in range(steps):
        g, = torch.autograd.grad(f(x), x)
        if g.abs().max() < tol:
            break
        with torch.no_grad():
            x -= lr * g
    return x.detach().numpy()


# --------------------------------------------------------------------------- diffusion

def step_kernel(prev, beta, target):
    """P[m_t = 1 | m_{t-1} = prev]."""
    return (1 - beta) * prev + beta * target


def chain_prob(path, betas, target):
    """Probability of a full single-pixel path m_0 -> m_1 -> ... given m_0."""
    prob = 1.0
    for j in range(1, len(path)):
        p1 = step_kernel(path[j - 1], betas[j - 1], target)
        prob *= p1 if path[j] == 1 else 1 - p1
    return prob


def enumerate_marginal(m0, target, betas, t):
    total = 0.0
    for mid in itertools.product((0, 1), repeat=t):
        if mid[-1] == 1:
            total += chain_prob((m0,) + mid, betas, target)
    return total


def enumerate_posterior(m0, mt, target, betas, t, s):
    """P[m_s = 1 | m_t, m_0] summing over every path with fixed endpoints."""
    num = den = 0.0
    for mid in itertools.product((0, 1), repeat=t - 1):
        path = (m0,) + mid + (mt,)
        p = chain_prob(path, betas[:t], target)
        den += p
        if path[s] == 1:
            num += p
    return num, den


# --------------------------------------------------------------------------- metrics

def confusion(pred_bin, gt_bin):
    tp = fp = fn = tn = 0
    for p, g in zip(np.ravel(pred_bin), np.ravel(gt_bin)):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def f_beta(pred, gt, beta_sq=0.3):
    thr = min(2 * float(np.mean(pred)), 1.0)
    binar = [(p > 0) if thr == 0 else (p >= thr) for p in np.ravel(pred)]
    tp, fp, fn, _ = confusion(binar, np.ravel(gt) > 0.5)
    if tp + fp == 0 and tp + fn == 0:
        return 1.0
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    return 0.0 if prec + rec == 0 else (1 + beta_sq) * prec * rec / (beta_sq * prec + rec)


def dice_iou(pred, gt, thr=0.5):
    tp, fp, fn, _ = confusion(np.ravel(pred) >= thr, np.ravel(gt) > 0.5)
    dice = 1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
    iou = 1.0 if tp + fp + fn == 0 else tp / (tp + fp + fn)
    return dice, iou


def e_measure(pred, gt):
    g = (np.asarray(gt) > 0.5).astype(float).ravel()
    n = g.size
    scores = []
    for i in range(256):
        t = (i + 1) / 256
        b = (np.ravel(pred) >= t).astype(float)
        if g.sum() == 0:
            scores.append(float((b == 0).sum()) / n)
            continue
        if g.sum() == n:
            scores.append(float(b.sum()) / n)
            continue
        mb, mg = b.mean(), g.mean()
        acc = 0.0
        for bi, gi in zip(b, g):
            a, c = bi - mb, gi - mg
            align = 2 * a * c / (a * a + c * c)
            acc += (align + 1) ** 2 / 4
        scores.append(acc / n)
    return float(np.mean(scores))


def _ssim_loop(p, g):
    vals_p, vals_g = list(np.ravel(p)), list(np.ravel(g))
    n = len(vals_p)
    x = sum(vals_p) / n
    y = sum(vals_g) / n
    d = max(n - 1, 1)
    sx = sum((v - x) ** 2 for v in vals_p) / d
    sy = sum((v - y) ** 2 for v in vals_g) / d
    sxy = sum((a - x) * (b - y) for a, b in zip(vals_p, vals_g)) / d
    a = 4 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0:
        return a / b
    return 1.0 if b == 0 else 0.0


def s_measure(pred, gt, alpha=0.5):
    pred = np.asarray(pred, dtype=float)
    g = np.asarray(gt) > 0.5
    y = g.mean()
    if y == 0:
        return 1 - pred.mean()
    if y == 1:
        return pred.mean()

    def s_obj(vals):
        m = sum(vals) / len(vals)
        sd = math.sqrt(sum((v - m) ** 2 for v in vals) / (len(vals) - 1)) if len(vals) > 1 else 0.0
        return 2 * m / (m * m + 1 + sd)

    fg_vals = [p for p, q in zip(pred.ravel(), g.ravel()) if q]
    bg_vals = [1 - p for p, q in zip(pred.ravel(), g.ravel()) if not q]
    obj = y * s_obj(fg_vals) + (1 - y) * s_obj(bg_vals)

    H, W = g.shape
    coords = [(r, c) for r in range(H) for c in range(W) if g[r, c]]
    cy = min(int(round(sum(r for r, _ in coords) / len(coords))) + 1, H)
    cx = min(int(round(sum(c for _, c in coords) / len(coords))) + 1, W)
    reg = 0.0
    for r0, r1 in ((0, cy), (cy, H)):
        for c0, c1 in ((0, cx), (cx, W)):
            if r1 > r0 and c1 > c0:
                reg += (r1 - r0) * (c1 - c0) / (H * W) * _ssim_loop(pred[r0:r1, c0:c1], g[r0:r1, c0:c1].astype(float))
    return min(max(alpha * obj + (1 - alpha) * reg, 0.0), 1.0)


# --------------------------------------------------------------------------- misc

def central_difference(f, x, h=1e-4, index=None):
    """Central differences of scalar f at tensor x; all coordinates or the given flat indices."""
    x = x.detach().clone()
    flat = x.view(-1)
    idx = range(flat.numel()) if index is None else index
    out = []
    for i in idx:
        old = flat[i].item()
        flat[i] = old + h
        fp = _scalar(f(x))
        flat[i] = old - h
        fm = _scalar(f(x))
        flat[i] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def _scalar(v):
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


def relative_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-30))
