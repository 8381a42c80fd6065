"""Contour overlays of instance maps on RGB images."""
from __future__ import annotations

import numpy as np

# class id -> RGB; index 0 is unused (background)
PALETTE = np.array([
    [0, 0, 0],
    [255, 0, 0],
    [0, 200, 0],
    [0, 90, 255],
    [255, 215, 0],
    [255, 120, 0],
    [0, 220, 220],
    [200, 0, 200],
    [128, 128, 128],
], dtype=np.uint8)


def class_color(c: int) -> np.ndarray:
    return PALETTE[1 + (int(c) - 1) % (len(PALETTE) - 1)]


def boundaries(inst: np.ndarray) -> np.ndarray:
    """Instance pixels with a 4-neighbour of a different label (outside the image counts as background)."""
    inst = np.asarray(inst)
    p = np.pad(inst, 1, mode="constant")
    c = p[1:-1, 1:-1]
    diff = (p[:-2, 1:-1] != c) | (p[2:, 1:-1] != c) | (p[1:-1, :-2] != c) | (p[1:-1, 2:] != c)
    return diff & (c > 0)


def render_overlay(image: np.ndarray, inst: np.ndarray, classes: dict, gt_inst=None, gt_classes=None):
    """Draw class-coloured instance contours; with *gt_inst* returns a ``[gt | pred]`` panel.

    The output has the input's dtype: floats are taken to be in ``[0, 1]``.
    """
    image = np.asarray(image)
    pred = _draw(image, inst, classes)
    if gt_inst is None:
        return pred
    return np.concatenate([_draw(image, gt_inst, gt_classes or {}), pred], axis=1)


def _draw(image, inst, classes):
    out = image.copy()
    inst = np.asarray(inst)
    if not inst.any():
        return out
    edge = boundaries(inst)
    cls = np.zeros(int(inst.max()) + 1, dtype=np.int64)
    for k, c in classes.items():
        if k < len(cls):
            cls[k] = c
    colors = np.stack([class_color(c) if c else PALETTE[-1] for c in cls])
    rgb = colors[inst[edge]]
    if np.issubdtype(out.dtype, np.floating):
        out[edge] = rgb.astype(out.dtype) / 255.0
    else:
        out[edge] = rgb
    return out
