"""Hot inner loops, each in a numba form and a vectorised numpy form.

The module-level names (``splat_gaussians``, ``local_peaks``, ...) dispatch to
the numba kernels unless ``POINTNU_DISABLE_NUMBA=1`` is set at import time.
Both variants are importable as ``<name>_numba`` / ``<name>_numpy`` so the two
paths can be tested against each other and benchmarked.
"""
import math

import numpy as np
from scipy import ndimage

from ._jit import USE_NUMBA, njit

_EIGHT = np.ones((3, 3), dtype=bool)


def splat_radius(sigma: float) -> int:
    # support truncated at 3 sigma per side
    return int(math.ceil(3.0 * sigma - 1e-9))


# --------------------------------------------------------------------------- splat
@njit
def splat_gaussians_numba(Y, owner_val, owner_id, cx, cy, cls, sigma, ids):
    n = cx.shape[0]
    h = Y.shape[1]
    w = Y.shape[2]
    for i in range(n):
        s = sigma[i]
        r = int(math.ceil(3.0 * s - 1e-9))
        inv = 1.0 / (2.0 * s * s)
        c = cls[i]
        y0 = max(cy[i] - r, 0)
        y1 = min(cy[i] + r + 1, h)
        x0 = max(cx[i] - r, 0)
        x1 = min(cx[i] + r + 1, w)
        for y in range(y0, y1):
            dy = y - cy[i]
            for x in range(x0, x1):
                dx = x - cx[i]
                v = math.exp(-(dx * dx + dy * dy) * inv)
                if v > Y[c, y, x]:
                    Y[c, y, x] = v
                if v > owner_val[y, x]:
                    owner_val[y, x] = v
                    owner_id[y, x] = ids[i]


def splat_gaussians_numpy(Y, owner_val, owner_id, cx, cy, cls, sigma, ids):
    h, w = Y.shape[1:]
    for i in range(len(cx)):
        r = splat_radius(sigma[i])
        y0, y1 = max(cy[i] - r, 0), min(cy[i] + r + 1, h)
        x0, x1 = max(cx[i] - r, 0), min(cx[i] + r + 1, w)
        dy = (np.arange(y0, y1) - cy[i])[:, None]
        dx = (np.arange(x0, x1) - cx[i])[None, :]
        # same operation order as the numba twin so both round identically
        v = np.exp(-(dx * dx + dy * dy) * (1.0 / (2.0 * sigma[i] * sigma[i])))
        win = Y[cls[i], y0:y1, x0:x1]
        np.maximum(win, v, out=win)
        ov = owner_val[y0:y1, x0:x1]
        better = v > ov
        ov[better] = v[better]
        owner_id[y0:y1, x0:x1][better] = ids[i]


# --------------------------------------------------------------------------- peaks
@njit
def local_peaks_numba(heat, conf):
    C, h, w = heat.shape
    cand = np.zeros((C, h, w), dtype=np.bool_)
    for c in range(C):
        for y in range(h):
            for x in range(w):
                v = heat[c, y, x]
                if not v > conf:
                    continue
                ok = True
                for dy in range(-1, 2):
                    yy = y + dy
                    if yy < 0 or yy >= h:
                        continue
                    for dx in range(-1, 2):
                        xx = x + dx
                        if xx < 0 or xx >= w or (dx == 0 and dy == 0):
                            continue
                        if heat[c, yy, xx] > v:
                            ok = False
                cand[c, y, x] = ok
    keep = np.zeros((C, h, w), dtype=np.bool_)
    seen = np.zeros((h, w), dtype=np.bool_)
    stack = np.empty(h * w * 2, dtype=np.int64)
    for c in range(C):
        seen[:, :] = False
        for y in range(h):
            for x in range(w):
                if not cand[c, y, x] or seen[y, x]:
                    continue
                # first cell met in (y, x) order is the plateau representative
                keep[c, y, x] = True
                seen[y, x] = True
                top = 0
                stack[0] = y
                stack[1] = x
                top = 2
                while top > 0:
                    top -= 2
                    py = stack[top]
                    px = stack[top + 1]
                    for dy in range(-1, 2):
                        yy = py + dy
                        if yy < 0 or yy >= h:
                            continue
                        for dx in range(-1, 2):
                            xx = px + dx
                            if xx < 0 or xx >= w:
                                continue
                            if cand[c, yy, xx] and not seen[yy, xx]:
                                seen[yy, xx] = True
                                stack[top] = yy
                                stack[top + 1] = xx
                                top += 2
    return keep


def local_peaks_numpy(heat, conf):
    heat = np.asarray(heat, dtype=np.float64)
    keep = np.zeros(heat.shape, dtype=bool)
    for c in range(heat.shape[0]):
        ch = heat[c]
        mx = ndimage.maximum_filter(ch, footprint=_EIGHT, mode="constant", cval=-np.inf)
        cand = (ch >= mx) & (ch > conf)
        if not cand.any():
            continue
        labels, _ = ndimage.label(cand, structure=_EIGHT)
        flat = np.flatnonzero(cand)
        _, first = np.unique(labels.ravel()[flat], return_index=True)
        keep[c].ravel()[flat[first]] = True
    return keep


# --------------------------------------------------------------------------- contingency
@njit
def contingency_numba(a, b, na, nb):
    out = np.zeros((na + 1, nb + 1), dtype=np.int64)
    fa = a.ravel()
    fb = b.ravel()
    for i in range(fa.shape[0]):
        out[fa[i], fb[i]] += 1
    return out


def contingency_numpy(a, b, na, nb):
    idx = a.ravel().astype(np.int64) * (nb + 1) + b.ravel().astype(np.int64)
    return np.bincount(idx, minlength=(na + 1) * (nb + 1)).reshape(na + 1, nb + 1)


# --------------------------------------------------------------------------- paint
@njit
def paint_by_priority_numba(masks):
    n, H, W = masks.shape
    out = np.zeros((H, W), dtype=np.int32)
    for y in range(H):
        for x in range(W):
            for i in range(n):
                if masks[i, y, x]:
                    out[y, x] = i + 1
                    break
    return out


def paint_by_priority_numpy(masks):
    masks = np.asarray(masks, dtype=bool)
    if masks.shape[0] == 0:
        return np.zeros(masks.shape[1:], dtype=np.int32)
    first = np.argmax(masks, axis=0).astype(np.int32) + 1
    first[~masks.any(axis=0)] = 0
    return first


# --------------------------------------------------------------------------- mask IoU
@njit
def mask_iou_numba(masks):
    n = masks.shape[0]
    flat = masks.reshape(n, -1)
    P = flat.shape[1]
    inter = np.zeros((n, n), dtype=np.float64)
    area = np.zeros(n, dtype=np.float64)
    hits = np.empty(n, dtype=np.int64)
    for p in range(P):
        k = 0
        for i in range(n):
            if flat[i, p]:
                hits[k] = i
                k += 1
        for a in range(k):
            area[hits[a]] += 1.0
            for b in range(a + 1, k):
                inter[hits[a], hits[b]] += 1.0
    iou = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(i + 1, n):
            u = area[i] + area[j] - inter[i, j]
            if u > 0:
                iou[i, j] = inter[i, j] / u
                iou[j, i] = iou[i, j]
    for i in range(n):
        iou[i, i] = 1.0 if area[i] > 0 else 0.0
    return iou


def mask_iou_numpy(masks):
    n = masks.shape[0]
    flat = masks.reshape(n, -1).astype(np.float64)
    inter = flat @ flat.T
    area = np.diag(inter).copy()
    union = area[:, None] + area[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return iou


if USE_NUMBA:
    splat_gaussians = splat_gaussians_numba
    local_peaks = local_peaks_numba
    contingency = contingency_numba
    paint_by_priority = paint_by_priority_numba
    mask_iou = mask_iou_numba
else:
    splat_gaussians = splat_gaussians_numpy
    local_peaks = local_peaks_numpy
    contingency = contingency_numpy
    paint_by_priority = paint_by_priority_numpy
    mask_iou = mask_iou_numpy

KERNELS = {
    "splat_gaussians": (splat_gaussians_numba, splat_gaussians_numpy),
    "local_peaks": (local_peaks_numba, local_peaks_numpy),
    "contingency": (contingency_numba, contingency_numpy),
    "paint_by_priority": (paint_by_priority_numba, paint_by_priority_numpy),
    "mask_iou": (mask_iou_numba, mask_iou_numpy),
}
