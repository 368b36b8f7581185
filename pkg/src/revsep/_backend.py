"""Minimal helpers so the pure math runs on both numpy arrays and torch tensors.

All math modules use the channel-last convention: images are ``(..., H, W, C)``
and masks are ``(..., H, W)`` with any number of leading batch axes.
"""
import numpy as np
import torch


def namespace(x):
    return torch if isinstance(x, torch.Tensor) else np


def asfloat(cond, like):
    """Cast a boolean array to the float dtype of ``like``."""
    if isinstance(cond, torch.Tensor):
        return cond.to(like.dtype)
    dtype = like.dtype if isinstance(like, np.ndarray) and like.dtype.kind == "f" else np.float64
    return np.asarray(cond, dtype=dtype)


def where(cond, a, b):
    xp = namespace(cond)
    out = xp.where(cond, a, b)
    if xp is np and isinstance(b, np.ndarray) and b.dtype.kind == "f":
        out = out.astype(b.dtype, copy=False)
    return out


def to_float_array(x, dtype=np.float64):
    if isinstance(x, torch.Tensor):
        return x
    return np.asarray(x, dtype=dtype)


def check_same_shape(*arrays, names=None):
    shapes = [tuple(a.shape) for a in arrays]
    if any(s != shapes[0] for s in shapes):
        label = ", ".join(names) if names else "inputs"
        raise ValueError(f"shape mismatch between {label}: {shapes}")


def check_image_mask(image, mask):
    if tuple(image.shape[:-1]) != tuple(mask.shape):
        raise ValueError(
            f"image {tuple(image.shape)} and mask {tuple(mask.shape)} disagree on spatial shape"
        )
