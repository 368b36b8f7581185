"""Training loop with deep supervision, plus evaluation helpers."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from revsep.data import SceneDataset
from revsep.losses import COMPONENTS, LossWeightsConfig, total_loss
from revsep.metrics import evaluate_masks, mae, mean_dice
from revsep.network import NetworkConfig, UnfoldingNet, save_checkpoint

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "total_loss") + COMPONENTS + ("val_mDice", "val_MAE", "lr")


@dataclass
class TrainResult:
    net: UnfoldingNet
    log: list = field(default_factory=list)


def _to_tensor(a, dtype=torch.float32):
    return torch.as_tensor(np.ascontiguousarray(a), dtype=dtype)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def validate(net, dataset: SceneDataset, seed=0):
    if dataset is None or len(dataset) == 0:
        return float("nan"), float("nan")
    preds = net.predict(dataset.images, seed=seed)[:, -1]
    return mean_dice(preds, dataset.masks), float(np.mean([mae(p, g) for p, g in zip(preds, dataset.masks)]))


def train(dataset: SceneDataset, net_cfg: NetworkConfig = None, loss_cfg: LossWeightsConfig = None,
          seed: int = 0, val: SceneDataset | None = None, log_path=None, ckpt_path=None,
          dtype=torch.float32, flip: bool = True, progress=None) -> TrainResult:
    """Adam(0.9, 0.999) with step decay; one CSV row per epoch.

    In degradation mode the reconstruction target is ``dataset.clean``,
    otherwise it is the input image itself.
    """
    net_cfg = net_cfg or NetworkConfig()
    loss_cfg = loss_cfg or LossWeightsConfig()
    if dataset is None or len(dataset) == 0:
        raise ValueError("training dataset is empty")
    torch.manual_seed(seed)
    net = UnfoldingNet(net_cfg).to(dtype)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(net.parameters(), lr=loss_cfg.lr, betas=(0.9, 0.999))
    sched = torch.optim.lr_scheduler.StepLR(opt, loss_cfg.lr_decay_every, gamma=1.0 / loss_cfg.lr_decay_factor)

    images = _to_tensor(dataset.images, dtype).permute(0, 3, 1, 2)
    targets = _to_tensor(dataset.clean if net_cfg.degradation_mode else dataset.images, dtype).permute(0, 3, 1, 2)
    masks = _to_tensor(dataset.masks, dtype)
    edges = _to_tensor(dataset.edges, dtype)

    rows = []
    fh = open(log_path, "w", newline="") if log_path else None
    writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS) if fh else None
    if writer:
        writer.writeheader()
    try:
        for epoch in range(1, loss_cfg.epochs + 1):
            net.train()
            sums = {name: 0.0 for name in ("total_loss",) + COMPONENTS}
            n_seen = 0
            for idx in _batches(len(dataset), loss_cfg.batch_size, rng):
                x, tgt, gs, ge = images[idx], targets[idx], masks[idx], edges[idx]
                if flip:
                    f = torch.as_tensor(rng.random(len(idx)) < 0.5)
                    x = torch.where(f[:, None, None, None], x.flip(-1), x)
                    tgt = torch.where(f[:, None, None, None], tgt.flip(-1), tgt)
                    gs = torch.where(f[:, None, None], gs.flip(-1), gs)
                    ge = torch.where(f[:, None, None], ge.flip(-1), ge)
                states = net(x, rng=gen)
                loss, parts = total_loss(states, gs, ge, tgt, loss_cfg, fine_stages=net_cfg.fine_stages,
                                         sched=net.schedule, rng=gen, edges=net_cfg.enable_edge_head)
                if not torch.isfinite(loss):
                    raise FloatingPointError(
                        f"non-finite loss at epoch {epoch}: {parts}; scalars {net.scalars()}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                nb = len(idx)
                n_seen += nb
                sums["total_loss"] += float(loss.detach()) * nb
                for name in COMPONENTS:
                    sums[name] += parts[name] * nb
            lr = opt.param_groups[0]["lr"]
            sched.step()
            v_dice, v_mae = validate(net, val, seed) if val is not None else (float("nan"), float("nan"))
            row = {"epoch": epoch, **{k: v / n_seen for k, v in sums.items()},
                   "val_mDice": v_dice, "val_MAE": v_mae, "lr": lr}
            rows.append(row)
            if writer:
                writer.writerow(row)
                fh.flush()
            if progress:
                progress(row)
            log.info("epoch %d loss %.4f val_mDice %.4f", epoch, row["total_loss"], v_dice)
    finally:
        if fh:
            fh.close()
    net.eval()
    if ckpt_path:
        save_checkpoint(ckpt_path, net, extra={"seed": seed, "epochs": loss_cfg.epochs})
    return TrainResult(net=net, log=rows)


def blco_train(dataset_degraded: SceneDataset, net_cfg: NetworkConfig = None, loss_cfg: LossWeightsConfig = None,
               seed: int = 0, exchange: bool = True, **kwargs) -> TrainResult:
    """Joint restoration + segmentation training in degradation mode.

    ``exchange=False`` gives the tandem ablation: same wiring without the
    feature guidance passed between the two tasks.
    """
    net_cfg = replace(net_cfg or NetworkConfig(), degradation_mode=True, feature_exchange=exchange)
    return train(dataset_degraded, net_cfg, loss_cfg, seed, **kwargs)


def psnr(pred, target) -> float:
    err = float(np.mean((np.asarray(pred) - np.asarray(target)) ** 2))
    return float("inf") if err == 0 else 10 * math.log10(1.0 / err)


@torch.no_grad()
def restoration_psnr(net, dataset: SceneDataset, batch_size=16) -> float:
    """PSNR of the last-stage reconstruction against the clean images."""
    net.eval()
    dtype = next(net.parameters()).dtype
    vals = []
    for i in range(0, len(dataset), batch_size):
        x = _to_tensor(dataset.images[i:i + batch_size], dtype).permute(0, 3, 1, 2)
        states = net(x, rng=torch.Generator().manual_seed(i), refine=False)
        rec = states[-1].I_hat_k.permute(0, 2, 3, 1).double().numpy()
        vals += [psnr(r, c) for r, c in zip(rec, dataset.clean[i:i + batch_size])]
    return float(np.mean(vals))


def evaluate(net, dataset: SceneDataset, seed=0, refine=True):
    """Final-stage predictions and metrics: ``(report, rows, preds)``."""
    preds = net.predict(dataset.images, seed=seed, refine=refine)[:, -1]
    report, rows = evaluate_masks(preds, dataset.masks)
    return report, rows, preds
