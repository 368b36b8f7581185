"""Multi-stage unfolded separation network.

Each stage runs the closed-form mask update, refines it with two gated
convolution branches (foreground view and background view), then updates the
background and a reconstruction of the image.  The last stage(s) can refine
uncertain pixels with the Bernoulli diffusion denoiser.

Tensor layout: images are ``B x C x H x W``, masks are ``B x H x W``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from revsep.diffusion import NoiseSchedule, make_cosine_schedule, sample_refined
from revsep.model import VARIANTS, ModelParams, residual_targets
from revsep.uncertainty import background_ratio, fuse_refined, stage_uncertainty
from revsep.updates import update_B_closed_form, update_S_closed_form, update_S_soft_threshold

ENTROPY_EPS = 1e-6
LOGIT_EPS = 1e-4


@dataclass
class NetworkConfig:
    K: int = 3
    feat_channels: int = 32
    rss_small_kernel: int = 3
    rss_large_kernel: int = 7
    image_size: int = 64
    fine_stages: tuple | None = None      # None means the last stage only
    enable_edge_head: bool = True
    degradation_mode: bool = False
    feature_exchange: bool = False       # bidirectional restoration/segmentation guidance
    model_variant: str = "PM"
    use_inter: bool = True
    use_intra: bool = True
    fine_steps: int = 5
    T: int = 1000
    in_channels: int = 3
    hidden: int = 8

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.fine_stages is None:
            self.fine_stages = (self.K,)
        self.fine_stages = tuple(sorted(set(int(k) for k in self.fine_stages)))
        if any(k < 1 or k > self.K for k in self.fine_stages):
            raise ValueError(f"fine_stages {self.fine_stages} must lie in [1, {self.K}]")
        for name in ("rss_small_kernel", "rss_large_kernel"):
            if getattr(self, name) % 2 == 0 or getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive odd integer")
        if self.feat_channels < 1 or self.hidden < 1:
            raise ValueError("channel counts must be positive")
        if self.image_size % 4:
            raise ValueError("image_size must be divisible by 4")
        if self.model_variant not in VARIANTS:
            raise ValueError(f"unknown model variant {self.model_variant!r}")
        if self.fine_steps < 1 or self.T < 1:
            raise ValueError("fine_steps and T must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["fine_stages"] = list(self.fine_stages)
        return d


@dataclass
class StageState:
    S_k: torch.Tensor
    B_k: torch.Tensor
    E_k: torch.Tensor
    I_hat_k: torch.Tensor
    M_k: torch.Tensor
    U_k: torch.Tensor
    stage_index: int
    S_hat_k: torch.Tensor | None = None
    image: torch.Tensor | None = None     # the image this stage separated (I or I_hat_{k-1})
    denoise: object = field(default=None, repr=False)


def _last(x):
    return x.permute(0, 2, 3, 1)


def _first(x):
    return x.permute(0, 3, 1, 2)


def inv_softplus(y: float) -> float:
    return math.log(math.expm1(y))


def conv_block(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class Encoder(nn.Module):
    """Four conv blocks, two of them strided: H x W -> H/4 x W/4 x feat_channels."""

    def __init__(self, cin, feat):
        super().__init__()
        self.body = nn.Sequential(
            conv_block(cin, feat // 2),
            conv_block(feat // 2, feat, stride=2),
            conv_block(feat, feat, stride=2),
        )
        self.proj = nn.Conv2d(feat, feat, 1)

    def forward(self, x):
        return self.proj(self.body(x))


class RSSBlock(nn.Module):
    """Gated depthwise/pointwise residual block; the kernel sets the receptive field."""

    def __init__(self, ch, kernel, dilation=1):
        super().__init__()
        pad = dilation * (kernel - 1) // 2
        self.dw = nn.Conv2d(ch, ch, kernel, padding=pad, dilation=dilation, groups=ch)
        self.pw = nn.Conv2d(ch, ch, 1)
        self.gate = nn.Conv2d(ch, ch, 1)

    def forward(self, x):
        return x + self.pw(F.gelu(self.dw(x))) * torch.sigmoid(self.gate(x))


class PositiveScalar(nn.Module):
    def __init__(self, init):
        super().__init__()
        self.raw = nn.Parameter(torch.tensor(inv_softplus(init)))

    def forward(self):
        return F.softplus(self.raw)


class CoreStage(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        f, h = cfg.feat_channels, cfg.hidden
        self.variant = cfg.model_variant
        self.mu = PositiveScalar(0.5)
        self.alphaL = PositiveScalar(0.1)
        self.rss_small = RSSBlock(f, cfg.rss_small_kernel)
        self.rss_large = RSSBlock(f, cfg.rss_large_kernel, dilation=2)
        self.trunk = conv_block(f, f)
        self.squeeze = nn.Conv2d(f, h, 1)
        self.head = nn.Sequential(conv_block(h + cfg.in_channels + 2, h), nn.Conv2d(h, 2, 3, 1, 1))

    def s_hat(self, I, B_prev, M_prev, M_prev2):
        params = ModelParams(mu=self.mu(), alphaL=self.alphaL())
        sp_cur = residual_targets(M_prev, self.variant)
        if self.variant == "CM2":
            return update_S_soft_threshold(_last(I), _last(B_prev), M_prev, sp_cur, params)
        sp_prev = residual_targets(M_prev2, self.variant)
        return update_S_closed_form(_last(I), _last(B_prev), M_prev, sp_prev, sp_cur, params)

    def forward(self, B_prev, M_prev, M_prev2, I, feats):
        S_hat = self.s_hat(I, B_prev, M_prev, M_prev2)
        size = feats.shape[-2:]
        s_low = F.interpolate(S_hat[:, None], size=size, mode="bilinear", align_corners=False)
        ratio = background_ratio(_last(B_prev), _last(I))
        r_low = F.interpolate(ratio[:, None], size=size, mode="bilinear", align_corners=False)
        x = self.rss_small(feats * s_low + feats) + self.rss_large(feats * r_low + feats)
        trunk = self.trunk(x)
        up = F.interpolate(self.squeeze(trunk), size=I.shape[-2:], mode="bilinear", align_corners=False)
        out = self.head(torch.cat([up, S_hat.clamp(0, 1)[:, None], M_prev[:, None], I], 1))
        return torch.sigmoid(out[:, 0]), torch.sigmoid(out[:, 1]), S_hat, trunk


class CareStage(nn.Module):
    """Closed-form background step followed by a two-level U-net."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        c, f, h = cfg.in_channels, cfg.feat_channels, cfg.hidden
        cin = 3 * c if cfg.degradation_mode else 2 * c
        self.restore = cfg.degradation_mode
        self.lam = PositiveScalar(1.0)
        self.enc1 = conv_block(cin, h)
        self.enc2 = conv_block(h, 2 * h, stride=2)
        self.mid = conv_block(2 * h, f, stride=2)
        self.dec2 = conv_block(f + 2 * h, 2 * h)
        self.dec1 = conv_block(2 * h + h, h)
        self.out = nn.Conv2d(h, 2 * c, 3, 1, 1)

    def forward(self, B_prev, S_k, I, I_hat_prev=None, guidance=None):
        B_hat = _first(update_B_closed_form(_last(I), _last(B_prev), S_k, self.lam()))
        parts = [B_hat, I * S_k[:, None]]
        if self.restore:
            parts.append(I_hat_prev)
        e1 = self.enc1(torch.cat(parts, 1))
        e2 = self.enc2(e1)
        mid = self.mid(e2)
        if guidance is not None:
            mid = mid + guidance
        d2 = self.dec2(torch.cat([F.interpolate(mid, size=e2.shape[-2:], mode="bilinear", align_corners=False), e2], 1))
        d1 = self.dec1(torch.cat([F.interpolate(d2, size=e1.shape[-2:], mode="bilinear", align_corners=False), e1], 1))
        o = self.out(d1)
        c = I.shape[1]
        B_k = I * torch.sigmoid(o[:, :c])
        base = I_hat_prev if self.restore else I * S_k[:, None] + B_k
        I_hat = torch.sigmoid(torch.logit(base.clamp(LOGIT_EPS, 1 - LOGIT_EPS)) + o[:, c:])
        return B_k, I_hat, mid


def timestep_embedding(t, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], 1)


class Denoiser(nn.Module):
    """Predicts the flip probability from (m_t, target, image) plus t and image features."""

    def __init__(self, cfg: NetworkConfig, emb_dim=32):
        super().__init__()
        f, h = cfg.feat_channels, cfg.hidden
        self.emb_dim = emb_dim
        self.enc1 = conv_block(2 + cfg.in_channels, h)
        self.enc2 = conv_block(h, 2 * h, stride=2)
        self.mid = conv_block(2 * h, f, stride=2)
        self.feat_proj = nn.Conv2d(f, f, 1)
        self.t_proj = nn.Sequential(nn.Linear(emb_dim, f), nn.SiLU(), nn.Linear(f, f))
        self.dec2 = conv_block(f + 2 * h, 2 * h)
        self.dec1 = conv_block(2 * h + h, h)
        self.out = nn.Conv2d(h, 1, 3, 1, 1)

    def forward(self, m_t, t, target, image, feats):
        n = m_t.shape[0]
        if not torch.is_tensor(t):
            t = torch.full((n,), int(t))
        emb = timestep_embedding(t.to(m_t.device), self.emb_dim).to(m_t.dtype)
        e1 = self.enc1(torch.cat([m_t[:, None], target[:, None], image], 1))
        e2 = self.enc2(e1)
        mid = self.mid(e2) + self.feat_proj(feats) + self.t_proj(emb)[:, :, None, None]
        d2 = self.dec2(torch.cat([F.interpolate(mid, size=e2.shape[-2:], mode="bilinear", align_corners=False), e2], 1))
        d1 = self.dec1(torch.cat([F.interpolate(d2, size=e1.shape[-2:], mode="bilinear", align_corners=False), e1], 1))
        return torch.sigmoid(self.out(d1))[:, 0]


class UnfoldingNet(nn.Module):
    def __init__(self, cfg: NetworkConfig | None = None):
        super().__init__()
        cfg = cfg or NetworkConfig()
        self.cfg = cfg
        self.schedule = make_cosine_schedule(cfg.T)
        self.encoder = Encoder(cfg.in_channels, cfg.feat_channels)
        self.cores = nn.ModuleList([CoreStage(cfg) for _ in range(cfg.K)])
        self.cares = nn.ModuleList([CareStage(cfg) for _ in range(cfg.K)])
        self.denoiser = Denoiser(cfg) if cfg.fine_stages else None
        # restored images differ in distribution from the input, so a shared
        # encoder's BatchNorm running stats would blend the two at eval time
        if cfg.degradation_mode:
            self.re_encoders = nn.ModuleList([Encoder(cfg.in_channels, cfg.feat_channels) for _ in range(cfg.K - 1)])
        # created last so that switching the exchange on leaves every other initial weight unchanged
        if cfg.feature_exchange:
            f = cfg.feat_channels
            self.seg_to_res = nn.ModuleList([nn.Conv2d(f, f, 1) for _ in range(cfg.K)])
            self.res_to_seg = nn.ModuleList([nn.Conv2d(f, f, 1) for _ in range(cfg.K)])
            for conv in list(self.seg_to_res) + list(self.res_to_seg):
                nn.init.zeros_(conv.weight)
                nn.init.zeros_(conv.bias)

    def encode(self, I, stage=1):
        s = self.cfg.image_size
        if I.ndim != 4 or tuple(I.shape[-2:]) != (s, s) or I.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected B x {self.cfg.in_channels} x {s} x {s} input, got {tuple(I.shape)}")
        return self.encoder(I) if stage == 1 else self.re_encoders[stage - 2](I)

    def scalars(self):
        """Current per-stage (mu, alphaL, lambda) values."""
        return [(c.mu().item(), c.alphaL().item(), r.lam().item()) for c, r in zip(self.cores, self.cares)]

    def forward(self, I, rng=None, refine=True, init_mask=None):
        """Run all stages; returns a list of K :class:`StageState`.

        ``init_mask`` seeds M_0 (all zeros by default), which lets FINE act as
        a refiner of an external coarse mask.  ``refine=False`` skips FINE.
        """
        cfg = self.cfg
        if rng is None:
            rng = torch.Generator(device=I.device).manual_seed(0)
        n, _, h, w = I.shape
        zeros = I.new_zeros(n, h, w)
        M_prev = zeros if init_mask is None else init_mask
        M_prev2 = zeros
        B_prev = torch.zeros_like(I)
        I_hat_prev = I
        feats = self.encode(I)
        exchange = None
        masks, states = [], []
        for k in range(1, cfg.K + 1):
            I_ref = I_hat_prev if cfg.degradation_mode else I
            if cfg.degradation_mode and k > 1:
                feats = self.encode(I_ref, stage=k)
            if exchange is not None:
                feats = feats + exchange
            S_k, E_k, S_hat, trunk = self.cores[k - 1](B_prev, M_prev, M_prev2, I_ref, feats)
            if not cfg.enable_edge_head:
                E_k = torch.zeros_like(S_k)
            guidance = self.seg_to_res[k - 1](trunk) if cfg.feature_exchange else None
            B_k, I_hat, mid = self.cares[k - 1](B_prev, S_k, I_ref, I_hat_prev, guidance)
            exchange = self.res_to_seg[k - 1](mid) if cfg.feature_exchange else None
            U = stage_uncertainty(masks, S_k, _last(B_k), _last(I_ref), eps=ENTROPY_EPS,
                                  use_inter=cfg.use_inter, use_intra=cfg.use_intra).u_combined
            denoise = None
            M_k = S_k
            if k in cfg.fine_stages:
                denoise = self._denoise_fn(I_ref, feats)
                if refine:
                    with torch.no_grad():
                        S_r = sample_refined(S_k.detach(), U.detach(), denoise, self.schedule,
                                             n_steps=cfg.fine_steps, rng=rng)
                    M_k = fuse_refined(U, S_r, S_k)
            states.append(StageState(S_k, B_k, E_k, I_hat, M_k, U, k, S_hat, I_ref, denoise))
            masks.append(M_k)
            M_prev2, M_prev, B_prev, I_hat_prev = M_prev, M_k, B_k, I_hat
        return states

    def _denoise_fn(self, image, feats):
        def denoise(m_t, t, target):
            return self.denoiser(m_t, t, target, image, feats)
        return denoise

    @torch.no_grad()
    def predict(self, images, batch_size=16, seed=0, refine=True, init_masks=None):
        """Final-stage masks for an N x H x W x C float array (eval mode, float32)."""
        was_training = self.training
        self.eval()
        dtype = next(self.parameters()).dtype
        out = []
        try:
            for i in range(0, len(images), batch_size):
                x = torch.as_tensor(np.ascontiguousarray(images[i:i + batch_size]), dtype=dtype).permute(0, 3, 1, 2)
                init = None
                if init_masks is not None:
                    init = torch.as_tensor(np.asarray(init_masks[i:i + batch_size]), dtype=dtype)
                g = torch.Generator().manual_seed(seed * 1000003 + i)
                states = self(x, rng=g, refine=refine, init_mask=init)
                out.append(torch.stack([s.M_k for s in states], 1).double().numpy())
        finally:
            self.train(was_training)
        return np.concatenate(out, 0)   # N x K x H x W


def save_checkpoint(path, net: UnfoldingNet, extra=None):
    sched = net.schedule
    torch.save({
        "format": 1,
        "config": net.cfg.to_dict(),
        "state_dict": net.state_dict(),
        "schedule": {"beta": torch.from_numpy(sched.beta.copy())},
        "extra": extra or {},
    }, path)


def load_checkpoint(path, map_location="cpu"):
    blob = torch.load(path, map_location=map_location, weights_only=True)
    cfg = NetworkConfig(**blob["config"])
    net = UnfoldingNet(cfg)
    net.schedule = NoiseSchedule.from_betas(blob["schedule"]["beta"].numpy())
    net.load_state_dict(blob["state_dict"])
    net.eval()
    return net, blob.get("extra", {})
