"""Training augmentations applied jointly to an image and its instance map."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage
from skimage import color

from .data import InstanceAnnotation, relabel


@dataclass(frozen=True)
class AugmentConfig:
    crop_size: int | None = 256
    hflip: float = 0.5
    vflip: float = 0.5
    transpose: float = 0.5
    brightness: float = 0.1
    contrast: float = 0.1
    saturation: float = 0.1
    hue: float = 0.02
    blur_prob: float = 0.2
    blur_sigma: tuple = (0.1, 1.0)
    elastic_prob: float = 0.3
    elastic_sigma: float = 10.0
    elastic_alpha: float = 20.0

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(crop_size=None, hflip=0.0, vflip=0.0, transpose=0.0, brightness=0.0, contrast=0.0,
                   saturation=0.0, hue=0.0, blur_prob=0.0, elastic_prob=0.0)

    def clamped(self) -> "AugmentConfig":
        p = lambda v: float(min(max(v, 0.0), 1.0))  # noqa: E731
        lo, hi = sorted(max(float(s), 0.0) for s in self.blur_sigma)
        return replace(
            self,
            hflip=p(self.hflip), vflip=p(self.vflip), transpose=p(self.transpose),
            brightness=min(max(self.brightness, 0.0), 0.9), contrast=min(max(self.contrast, 0.0), 0.9),
            saturation=min(max(self.saturation, 0.0), 0.9), hue=min(max(self.hue, 0.0), 0.5),
            blur_prob=p(self.blur_prob), blur_sigma=(lo, hi), elastic_prob=p(self.elastic_prob),
            elastic_sigma=max(self.elastic_sigma, 1e-3), elastic_alpha=max(self.elastic_alpha, 0.0),
        )


def _rng(state) -> np.random.Generator:
    if isinstance(state, np.random.Generator):
        return state
    return np.random.default_rng(state)


def random_crop(img, inst, size, rng):
    H, W = inst.shape
    ch, cw = min(size, H), min(size, W)
    y = int(rng.integers(0, H - ch + 1))
    x = int(rng.integers(0, W - cw + 1))
    return img[y:y + ch, x:x + cw], inst[y:y + ch, x:x + cw]


def elastic_fields(shape, sigma, alpha, rng):
    """Smoothed uniform-noise displacement fields (dy, dx), scaled by *alpha*."""
    dy = ndimage.gaussian_filter(rng.uniform(-1, 1, shape), sigma, mode="constant") * alpha
    dx = ndimage.gaussian_filter(rng.uniform(-1, 1, shape), sigma, mode="constant") * alpha
    return dy, dx


def elastic(img, inst, dy, dx):
    H, W = inst.shape
    yy, xx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    coords = np.stack([yy + dy, xx + dx])
    out = np.stack(
        [ndimage.map_coordinates(img[..., c], coords, order=1, mode="nearest") for c in range(img.shape[2])],
        axis=-1)
    warped = ndimage.map_coordinates(inst, coords, order=0, mode="nearest")
    return out, warped


def color_jitter(img, rng, brightness, contrast, saturation, hue):
    out = img.astype(np.float64)
    if brightness:
        out = out * rng.uniform(1 - brightness, 1 + brightness)
    if contrast:
        m = out.mean()
        out = (out - m) * rng.uniform(1 - contrast, 1 + contrast) + m
    if saturation:
        gray = out.mean(axis=2, keepdims=True)
        out = gray + (out - gray) * rng.uniform(1 - saturation, 1 + saturation)
    out = np.clip(out, 0, 1)
    if hue:
        hsv = color.rgb2hsv(out)
        hsv[..., 0] = (hsv[..., 0] + rng.uniform(-hue, hue)) % 1.0
        out = color.hsv2rgb(hsv)
    return np.clip(out, 0, 1)


def augment(image: np.ndarray, ann: InstanceAnnotation, rng_state, cfg: AugmentConfig | None = None):
    """Return an augmented ``(image, annotation)`` pair.

    Geometric steps (crop, flips, transpose, elastic warp) move the image and the
    instance map together, the map with nearest-neighbour sampling. Photometric
    steps touch only the image. Instances that vanish are dropped and ids are
    renumbered from 1. A fixed integer *rng_state* makes the call deterministic.
    """
    cfg = (cfg or AugmentConfig()).clamped()
    rng = _rng(rng_state)
    img = np.asarray(image)
    inst = ann.instance_map
    if cfg.crop_size is not None:
        img, inst = random_crop(img, inst, int(cfg.crop_size), rng)
    if rng.random() < cfg.hflip:
        img, inst = img[:, ::-1], inst[:, ::-1]
    if rng.random() < cfg.vflip:
        img, inst = img[::-1], inst[::-1]
    if inst.shape[0] == inst.shape[1] and rng.random() < cfg.transpose:
        img, inst = img.transpose(1, 0, 2), inst.T
    if rng.random() < cfg.elastic_prob and cfg.elastic_alpha > 0:
        dy, dx = elastic_fields(inst.shape, cfg.elastic_sigma, cfg.elastic_alpha, rng)
        img, inst = elastic(img, inst, dy, dx)
    if cfg.brightness or cfg.contrast or cfg.saturation or cfg.hue:
        img = color_jitter(img, rng, cfg.brightness, cfg.contrast, cfg.saturation, cfg.hue)
    if rng.random() < cfg.blur_prob:
        s = rng.uniform(*cfg.blur_sigma)
        img = ndimage.gaussian_filter(img, sigma=(s, s, 0))
    img = np.ascontiguousarray(np.clip(img, 0, 1), dtype=np.float32)
    new_ann = relabel(np.ascontiguousarray(inst), ann.class_of, ann.num_classes)
    return img, new_ann
