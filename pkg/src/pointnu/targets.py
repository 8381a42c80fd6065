"""Training targets: Gaussian keypoint heatmaps at stride R and positive-cell assignment."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .data import InstanceAnnotation

TARGET_MODES = ("keypoint-heatmap", "centerpoint-map")


@dataclass(frozen=True, eq=False)
class HeatmapTarget:
    """Rendered target for one image.

    ``Y`` has shape ``(C, H/R, W/R)``. ``owner`` holds, per cell, the instance whose
    splat is largest there (0 where no instance reaches) and ``positives`` lists
    ``(x, y, c, k)`` for every cell whose owner's splat exceeds ``tau``.
    """

    Y: np.ndarray
    positives: list
    owner: np.ndarray
    centers: dict
    R: int = 4
    tau: float = 0.5

    @property
    def n_pos(self) -> int:
        return len(self.positives)


def instance_center(mask: np.ndarray) -> tuple[int, int]:
    """Centroid rounded to the nearest pixel, snapped onto the mask when it falls outside."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValueError("instance_center: empty mask")
    my, mx = ys.mean(), xs.mean()
    ry, rx = int(math.floor(my + 0.5)), int(math.floor(mx + 0.5))
    if 0 <= ry < mask.shape[0] and 0 <= rx < mask.shape[1] and mask[ry, rx]:
        return rx, ry
    d = (ys - my) ** 2 + (xs - mx) ** 2
    # np.nonzero is (y, x)-ordered, so argmin breaks ties by smallest y then x
    i = int(np.argmin(d))
    return int(xs[i]), int(ys[i])


def _smaller_root(a, b, c):
    disc = max(b * b - 4 * a * c, 0.0)
    return (-b - math.sqrt(disc)) / (2 * a)


def _larger_root(a, b, c):
    disc = max(b * b - 4 * a * c, 0.0)
    return (-b + math.sqrt(disc)) / (2 * a)


def gaussian_radius(h: float, w: float, min_overlap: float = 0.7) -> float:
    """Largest corner displacement keeping IoU >= *min_overlap* with an ``h x w`` box.

    Covers the three displacement cases (box translated, shrunk, grown) and
    returns the tightest of them.
    """
    m = min_overlap
    # translated diagonally: (h-r)(w-r) / (2hw - (h-r)(w-r)) >= m
    r1 = _smaller_root(1.0, -(h + w), h * w * (1 - m) / (1 + m))
    # both corners inward: (h-2r)(w-2r) / hw >= m
    r2 = _smaller_root(4.0, -2.0 * (h + w), (1 - m) * h * w)
    # both corners outward: hw / ((h+2r)(w+2r)) >= m
    r3 = _larger_root(4.0 * m, 2.0 * m * (h + w), (m - 1) * h * w)
    return min(r1, r2, r3)


def gaussian_sigma(bbox_h: float, bbox_w: float, R: int = 4, min_overlap: float = 0.7) -> float:
    r = gaussian_radius(bbox_h / R, bbox_w / R, min_overlap)
    return max(r, 1.0) / 3.0


def _bbox_hw(mask):
    ys, xs = np.nonzero(mask)
    return ys.max() - ys.min() + 1, xs.max() - xs.min() + 1


def cell_support(mask: np.ndarray, R: int) -> np.ndarray:
    """Cells of the stride-R grid whose R x R preimage touches *mask*."""
    H, W = mask.shape
    return mask.reshape(H // R, R, W // R, R).any(axis=(1, 3))


def resolve_center_collisions(centers, areas, R, instance_map=None):
    """Map full-resolution centers ``(x, y, k)`` to unique stride-R cells ``(cx, cy, k)``.

    On a shared cell the larger instance (then smaller id) keeps it; the others
    move to the nearest free cell overlapping their own mask, or are dropped with
    a warning when no such cell exists. Without *instance_map* every displaced
    instance is dropped.
    """
    want = {k: (int(x) // R, int(y) // R) for x, y, k in centers}
    order = sorted(want, key=lambda k: (-areas[k], k))
    taken = {}
    losers = []
    for k in order:
        cell = want[k]
        if cell in taken:
            losers.append(k)
        else:
            taken[cell] = k
    for k in losers:
        cell = None
        if instance_map is not None:
            sup = cell_support(instance_map == k, R)
            cys, cxs = np.nonzero(sup)
            ox, oy = want[k]
            best = None
            for cy, cx in zip(cys.tolist(), cxs.tolist()):
                if (cx, cy) in taken:
                    continue
                key = ((cx - ox) ** 2 + (cy - oy) ** 2, cy, cx)
                if best is None or key < best:
                    best = key
            if best is not None:
                cell = (best[2], best[1])
        if cell is None:
            warnings.warn(f"instance {k} lost its center cell {want[k]} and has no free cell; "
                          "dropped from supervision", stacklevel=2)
            continue
        taken[cell] = k
    out = [(cx, cy, k) for (cx, cy), k in taken.items()]
    return sorted(out, key=lambda t: t[2])


def render_heatmap(ann: InstanceAnnotation, H: int | None = None, W: int | None = None, R: int = 4,
                   tau: float = 0.5, mode: str = "keypoint-heatmap") -> HeatmapTarget:
    """Render the per-class keypoint heatmap ``Y`` and the positive cells of *ann*.

    In ``centerpoint-map`` mode only the center cells are set (to 1), the
    ablation counterpart of the Gaussian heatmap.
    """
    if mode not in TARGET_MODES:
        raise ValueError(f"unknown target mode {mode!r}")
    H = ann.shape[0] if H is None else H
    W = ann.shape[1] if W is None else W
    if (H, W) != ann.shape:
        raise ValueError(f"annotation is {ann.shape}, expected {(H, W)}")
    if H % R or W % R:
        raise ValueError(f"R={R} must divide the image size {H}x{W}; pad upstream")
    C = ann.num_classes
    h, w = H // R, W // R
    Y = np.zeros((C, h, w), dtype=np.float64)
    owner_val = np.zeros((h, w), dtype=np.float64)
    owner = np.zeros((h, w), dtype=np.int32)
    if ann.num_instances == 0:
        return HeatmapTarget(Y, [], owner, {}, R, tau)

    inst = ann.instance_map
    areas = ann.areas()
    centers = []
    for k in range(1, ann.num_instances + 1):
        x, y = instance_center(inst == k)
        centers.append((x, y, k))
    cells = resolve_center_collisions(centers, areas, R, inst)
    ids = np.array([k for _, _, k in cells], dtype=np.int32)
    cx = np.array([c[0] for c in cells], dtype=np.int64)
    cy = np.array([c[1] for c in cells], dtype=np.int64)
    cls = np.array([ann.class_of[k] - 1 for k in ids], dtype=np.int64)

    if mode == "centerpoint-map":
        Y[cls, cy, cx] = 1.0
        owner_val[cy, cx] = 1.0
        owner[cy, cx] = ids
    else:
        sig = np.empty(len(ids), dtype=np.float64)
        for i, k in enumerate(ids):
            bh, bw = _bbox_hw(inst == k)
            sig[i] = gaussian_sigma(bh, bw, R)
        kernels.splat_gaussians(Y, owner_val, owner, cx, cy, cls, sig, ids)

    owner = np.where(owner_val > tau, owner, 0).astype(np.int32)
    ys, xs = np.nonzero(owner)
    positives = [(int(x), int(y), ann.class_of[int(owner[y, x])], int(owner[y, x])) for y, x in zip(ys, xs)]
    centers_out = {int(k): (int(x), int(y)) for x, y, k in cells}
    return HeatmapTarget(Y, positives, owner, centers_out, R, tau)
