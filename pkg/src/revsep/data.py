"""Synthetic concealed-object scenes, image degradations and dataset I/O.

Scenes are band-limited colour textures with one or more foreground regions
whose colour and texture statistics are pulled toward the background by a
concealment factor.  Datasets are stored as 8-bit PNGs plus a JSON manifest
from which they can be regenerated exactly.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw
from scipy import ndimage

SHAPE_FAMILIES = ("blob", "polygon", "ring")
DEGRADATIONS = ("none", "lowlight", "haze", "lowres", "blind")
AREA_BAND = (0.05, 0.5)
MIN_OBJECT_AREA = 0.02
HAZE_AIRLIGHT = 0.9
SUBDIRS = ("images", "masks", "edges", "clean")

# standard benchmark recipe; every regression anchor refers to it
BENCHMARK = dict(n_train=200, n_val=50, n_test=50, size=64, concealment=0.7, seed=0)


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    size: int = 64
    n_objects: int = 1
    shape_family: str = "blob"
    concealment: float = 0.7
    texture_scale: float = 3.0

    def __post_init__(self):
        if self.size < 8:
            raise ValueError("size must be >= 8")
        if self.n_objects < 1:
            raise ValueError("n_objects must be >= 1")
        if self.shape_family not in SHAPE_FAMILIES:
            raise ValueError(f"unknown shape family {self.shape_family!r}")
        if not 0.0 <= self.concealment <= 1.0:
            raise ValueError("concealment must lie in [0, 1]")
        if not self.texture_scale > 0:
            raise ValueError("texture_scale must be positive")


@dataclass(frozen=True)
class DegradationSpec:
    kind: str = "none"
    severity: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DEGRADATIONS:
            raise ValueError(f"unknown degradation {self.kind!r}")
        if not 0.0 <= self.severity <= 1.0:
            raise ValueError("severity must lie in [0, 1]")


@dataclass
class GroundTruth:
    gt_s: np.ndarray
    gt_e: np.ndarray
    clean_image: np.ndarray


# --------------------------------------------------------------------------- edges

CROSS = ndimage.generate_binary_structure(2, 1)


def derive_edge_gt(gt_s) -> np.ndarray:
    """Morphological gradient (dilate - erode) with a 3x3 cross, replicate padding."""
    m = np.asarray(gt_s) > 0.5
    dil = ndimage.grey_dilation(m.astype(np.uint8), footprint=CROSS, mode="nearest")
    ero = ndimage.grey_erosion(m.astype(np.uint8), footprint=CROSS, mode="nearest")
    return (dil - ero > 0).astype(np.float64)


# --------------------------------------------------------------------------- scenes

def _texture(rng, size, scale, amplitude):
    noise = rng.standard_normal((size, size, 3))
    smooth = ndimage.gaussian_filter(noise, sigma=(scale, scale, 0), mode="wrap")
    smooth /= smooth.std(axis=(0, 1), keepdims=True) + 1e-12
    return amplitude * smooth


def _polygon_mask(size, points):
    canvas = Image.new("L", (size, size), 0)
    ImageDraw.Draw(canvas).polygon([tuple(p) for p in points], fill=1)
    return np.asarray(canvas, dtype=bool)


def _shape_mask(rng, size, family, area_frac):
    radius = np.sqrt(area_frac * size * size / np.pi)
    margin = radius * 1.1
    cx, cy = rng.uniform(margin, size - margin, size=2) if margin < size / 2 else (size / 2, size / 2)
    theta = np.linspace(0, 2 * np.pi, 96, endpoint=False)
    if family == "blob":
        r = np.ones_like(theta)
        for k in (2, 3, 4):
            r += rng.uniform(0, 0.18) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
        pts = np.stack([cx + radius * r * np.cos(theta), cy + radius * r * np.sin(theta)], 1)
        return _polygon_mask(size, pts)
    if family == "polygon":
        n = int(rng.integers(3, 8))
        ang = np.sort(rng.uniform(0, 2 * np.pi, n))
        rad = radius * rng.uniform(0.8, 1.3, n)
        pts = np.stack([cx + rad * np.cos(ang), cy + rad * np.sin(ang)], 1)
        return _polygon_mask(size, pts)
    # ring: outer radius enlarged so the annulus keeps roughly the target area
    inner_frac = rng.uniform(0.4, 0.6)
    outer = radius / np.sqrt(1 - inner_frac ** 2)
    squash = rng.uniform(0.8, 1.0)
    yy, xx = np.mgrid[:size, :size] + 0.5
    d = np.sqrt(((xx - cx) / squash) ** 2 + (yy - cy) ** 2)
    return (d <= outer) & (d >= outer * inner_frac)


def _layout(rng, spec: SceneSpec):
    lo, hi = AREA_BAND
    if spec.n_objects * MIN_OBJECT_AREA > hi:
        raise ValueError(f"{spec.n_objects} objects cannot be packed into {hi:.0%} of the frame")
    for _ in range(100):
        mask = np.zeros((spec.size, spec.size), dtype=bool)
        budget = rng.uniform(max(lo, spec.n_objects * MIN_OBJECT_AREA), min(0.3, hi) if spec.n_objects == 1 else hi)
        shares = rng.dirichlet(np.ones(spec.n_objects)) * budget
        for share in np.maximum(shares, MIN_OBJECT_AREA):
            mask |= _shape_mask(rng, spec.size, spec.shape_family, share)
        frac = mask.mean()
        if lo <= frac <= hi:
            return mask
    raise ValueError("could not place objects inside the allowed area band")


def scene_colours(rng, concealment):
    """Background colour and the foreground colour at the given concealment."""
    bg = rng.uniform(0.25, 0.75, size=3)
    fg0 = bg + rng.uniform(-0.08, 0.08, size=3)
    ch = int(rng.integers(0, 3))
    fg0[ch] = bg[ch] + (0.4 if bg[ch] < 0.5 else -0.4)
    return bg, bg + (1.0 - concealment) * (fg0 - bg)


def generate_scene(spec: SceneSpec):
    """Return ``(image, GroundTruth)``; deterministic in ``spec``."""
    rng = np.random.default_rng(spec.seed)
    mask = _layout(rng, spec)
    c = spec.concealment
    bg_col, fg_col = scene_colours(rng, c)
    bg_scale, bg_amp = spec.texture_scale, 0.07
    fg_scale = bg_scale + (1 - c) * (0.35 * bg_scale - bg_scale)
    fg_amp = bg_amp + (1 - c) * (0.12 - bg_amp)
    bg = bg_col + _texture(rng, spec.size, bg_scale, bg_amp)
    fg = fg_col + _texture(rng, spec.size, fg_scale, fg_amp)
    image = np.clip(np.where(mask[..., None], fg, bg), 0.0, 1.0)
    gt_s = mask.astype(np.float64)
    return image, GroundTruth(gt_s=gt_s, gt_e=derive_edge_gt(gt_s), clean_image=image.copy())


def random_scene_spec(seed: int, size: int = 64, concealment: float = 0.7) -> SceneSpec:
    rng = np.random.default_rng([seed, 7919])
    return SceneSpec(
        seed=seed,
        size=size,
        n_objects=int(rng.choice([1, 1, 2])),
        shape_family=str(rng.choice(SHAPE_FAMILIES)),
        concealment=concealment,
        texture_scale=float(rng.uniform(2.0, 4.5)),
    )


def box_scene(size: int = 32, contrast: float = 0.3, seed: int = 0, noise: float = 0.02):
    """Flat-colour scene with a centred box foreground brighter in one channel."""
    rng = np.random.default_rng(seed)
    bg = np.array([0.35, 0.35, 0.35])
    image = np.broadcast_to(bg, (size, size, 3)).copy()
    gt = np.zeros((size, size))
    q = size // 4
    gt[q:size - q, q:size - q] = 1.0
    image[..., 0] += contrast * gt
    image += noise * rng.standard_normal(image.shape)
    return np.clip(image, 0.0, 1.0), gt


# --------------------------------------------------------------------------- degradations

def _lowlight(image, severity):
    gain = 1.0 - 0.75 * severity
    gamma = 1.0 + severity
    return (gain * image) ** gamma


def _haze(image, severity):
    t = 1.0 - 0.8 * severity
    return image * t + HAZE_AIRLIGHT * (1.0 - t)


def lowres_factor(severity: float) -> int:
    return 1 + int(round(3 * severity))


def box_downsample(image, factor: int):
    """Mean over ``factor x factor`` blocks after edge-replicate padding."""
    h, w = image.shape[:2]
    ph, pw = -h % factor, -w % factor
    padded = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="edge")
    H, W = padded.shape[:2]
    return padded.reshape(H // factor, factor, W // factor, factor, -1).mean(axis=(1, 3))


def _lowres(image, severity):
    f = lowres_factor(severity)
    if f == 1:
        return image.copy()
    h, w = image.shape[:2]
    small = box_downsample(image, f)
    t = torch.from_numpy(np.ascontiguousarray(small.transpose(2, 0, 1)))[None]
    up = F.interpolate(t, size=(small.shape[0] * f, small.shape[1] * f), mode="bilinear", align_corners=False)
    return up[0].numpy().transpose(1, 2, 0)[:h, :w]


_SIMPLE = {"lowlight": _lowlight, "haze": _haze, "lowres": _lowres}


def blind_recipe(seed: int) -> list[str]:
    """Seed-determined ordered choice of one to three distinct degradations."""
    rng = np.random.default_rng([seed, 104729])
    k = int(rng.integers(1, 4))
    return [str(x) for x in rng.permutation(list(_SIMPLE))[:k]]


def degrade(image, spec: DegradationSpec) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if spec.kind == "none" or spec.severity == 0.0:
        return image.copy()
    kinds = blind_recipe(spec.seed) if spec.kind == "blind" else [spec.kind]
    out = image
    for kind in kinds:
        out = _SIMPLE[kind](out, spec.severity)
    return np.clip(out, 0.0, 1.0)


# --------------------------------------------------------------------------- datasets

@dataclass
class SceneDataset:
    images: np.ndarray          # N x H x W x 3, possibly degraded
    masks: np.ndarray           # N x H x W in {0, 1}
    edges: np.ndarray           # N x H x W in {0, 1}
    clean: np.ndarray           # N x H x W x 3
    ids: list = field(default_factory=list)
    specs: list = field(default_factory=list)
    degradation: DegradationSpec | None = None

    def __len__(self):
        return len(self.ids)

    def subset(self, idx):
        idx = list(idx)
        return SceneDataset(self.images[idx], self.masks[idx], self.edges[idx], self.clean[idx],
                            [self.ids[i] for i in idx], [self.specs[i] for i in idx], self.degradation)


def _item_degradation(deg: DegradationSpec | None, index: int) -> DegradationSpec | None:
    if deg is None:
        return None
    return DegradationSpec(deg.kind, deg.severity, deg.seed * 1000003 + index)


def build_dataset(specs, degradation: DegradationSpec | None = None, ids=None) -> SceneDataset:
    images, masks, edges, clean = [], [], [], []
    for i, spec in enumerate(specs):
        img, gt = generate_scene(spec)
        item_deg = _item_degradation(degradation, i)
        images.append(degrade(img, item_deg) if item_deg else img)
        masks.append(gt.gt_s)
        edges.append(gt.gt_e)
        clean.append(img)
    ids = ids or [f"{i:04d}" for i in range(len(specs))]
    return SceneDataset(np.stack(images), np.stack(masks), np.stack(edges), np.stack(clean),
                        list(ids), list(specs), degradation)


def quantize(ds: SceneDataset) -> SceneDataset:
    """Round images to 8 bits, matching what a PNG round trip would give."""
    q = lambda a: np.round(np.clip(a, 0, 1) * 255.0) / 255.0
    return SceneDataset(q(ds.images), ds.masks, ds.edges, q(ds.clean), ds.ids, ds.specs, ds.degradation)


def save_png(path, arr, rgb):
    data = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB" if rgb else "L").save(path)


def load_png(path, rgb: bool) -> np.ndarray:
    with Image.open(path) as im:
        data = np.asarray(im.convert("RGB" if rgb else "L"), dtype=np.float64)
    return data / 255.0


def write_dataset(root, dataset: SceneDataset) -> None:
    os.makedirs(root, exist_ok=True)
    for sub in SUBDIRS:
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    for i, item_id in enumerate(dataset.ids):
        name = f"{item_id}.png"
        save_png(os.path.join(root, "images", name), dataset.images[i], rgb=True)
        save_png(os.path.join(root, "clean", name), dataset.clean[i], rgb=True)
        save_png(os.path.join(root, "masks", name), dataset.masks[i], rgb=False)
        save_png(os.path.join(root, "edges", name), dataset.edges[i], rgb=False)
    manifest = {
        "format": 1,
        "degradation": asdict(dataset.degradation) if dataset.degradation else None,
        "items": [{"id": item_id, "spec": asdict(spec)} for item_id, spec in zip(dataset.ids, dataset.specs)],
    }
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def read_manifest(root) -> dict:
    path = os.path.join(root, "manifest.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no manifest.json in {root}")
    try:
        with open(path) as fh:
            manifest = json.load(fh)
        items = manifest["items"]
        specs = [SceneSpec(**item["spec"]) for item in items]
        ids = [str(item["id"]) for item in items]
        deg = manifest.get("degradation")
        deg = DegradationSpec(**deg) if deg else None
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed manifest in {root}: {exc}") from exc
    return {"ids": ids, "specs": specs, "degradation": deg}


def read_dataset(root) -> SceneDataset:
    meta = read_manifest(root)
    cols = {sub: [] for sub in SUBDIRS}
    for item_id in meta["ids"]:
        for sub in SUBDIRS:
            path = os.path.join(root, sub, f"{item_id}.png")
            if not os.path.exists(path):
                raise FileNotFoundError(path)
            cols[sub].append(load_png(path, rgb=sub in ("images", "clean")))
    binar = lambda a: (np.stack(a) > 0.5).astype(np.float64)
    return SceneDataset(np.stack(cols["images"]), binar(cols["masks"]), binar(cols["edges"]),
                        np.stack(cols["clean"]), meta["ids"], meta["specs"], meta["degradation"])


def regenerate(root) -> SceneDataset:
    """Rebuild a dataset (unquantised) from its manifest alone."""
    meta = read_manifest(root)
    return build_dataset(meta["specs"], meta["degradation"], meta["ids"])


def scene_specs(n: int, seed: int = 0, start: int = 0, size: int = 64, concealment: float = 0.7):
    return [random_scene_spec(seed * 1000003 + start + i, size, concealment) for i in range(n)]


def benchmark_splits(seed: int = BENCHMARK["seed"], concealment: float = BENCHMARK["concealment"],
                     size: int = BENCHMARK["size"], n_train: int = BENCHMARK["n_train"],
                     n_val: int = BENCHMARK["n_val"], n_test: int = BENCHMARK["n_test"],
                     degradation: DegradationSpec | None = None) -> dict:
    """The standard train/val/test split, quantised to 8 bits as if read from disk."""
    out, start = {}, 0
    for name, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        specs = scene_specs(n, seed, start, size, concealment)
        ids = [f"{start + i:04d}" for i in range(n)]
        deg = None if degradation is None else DegradationSpec(degradation.kind, degradation.severity,
                                                               degradation.seed + start)
        out[name] = quantize(build_dataset(specs, deg, ids))
        start += n
    return out


def write_benchmark(root, **kwargs) -> dict:
    splits = benchmark_splits(**kwargs)
    for name, ds in splits.items():
        write_dataset(os.path.join(root, name), ds)
    return splits
