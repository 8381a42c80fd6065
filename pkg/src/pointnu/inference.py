"""Decoding network outputs into nucleus instances."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
import torch
from PIL import Image as PILImage

from . import kernels
from .data import pad_to
from .segmentor import dynamic_mask_logits, gather_kernels, standard_mask_logits


class Peak(NamedTuple):
    x: int
    y: int
    c: int  # 1-based class
    score: float


@dataclass
class InferenceConfig:
    conf: float = 0.4
    mask_bin: float = 0.5
    use_nms: bool = True
    nms_method: str = "gaussian"
    nms_sigma: float = 2.0
    score_floor: float = 0.05
    tile: int = 256
    overlap: int = 64


@dataclass(eq=False)
class InstancePrediction:
    """One decoded nucleus; the mask is kept as a crop inside ``box = (y0, x0, y1, x1)``."""

    cls: int
    score: float
    center: tuple
    box: tuple
    crop: np.ndarray
    shape: tuple

    @property
    def mask(self) -> np.ndarray:
        full = np.zeros(self.shape, dtype=bool)
        y0, x0, y1, x1 = self.box
        full[y0:y1, x0:x1] = self.crop
        return full

    @property
    def area(self) -> int:
        return int(self.crop.sum())

    @classmethod
    def from_mask(cls, c, score, center, mask):
        ys, xs = np.nonzero(mask)
        y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
        return cls(int(c), float(score), tuple(center), (int(y0), int(x0), int(y1), int(x1)),
                   mask[y0:y1, x0:x1].copy(), tuple(mask.shape))


def _np(x):
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def extract_peaks(heatmap, conf: float = 0.4) -> list[Peak]:
    """Cells >= all 8 neighbours and > *conf*, per class; one cell per flat plateau."""
    heat = np.ascontiguousarray(_np(heatmap), dtype=np.float64)
    if heat.ndim == 2:
        heat = heat[None]
    keep = kernels.local_peaks(heat, float(conf))
    cs, ys, xs = np.nonzero(keep)
    peaks = [Peak(int(x), int(y), int(c) + 1, float(heat[c, y, x])) for c, y, x in zip(cs, ys, xs)]
    peaks.sort(key=lambda p: (-p.score, p.y, p.x, p.c))
    return peaks


def matrix_nms(masks, scores, classes, method: str = "gaussian", sigma: float = 2.0, ious=None):
    """Class-wise matrix NMS score decay; returns decayed scores in input order."""
    scores = np.asarray(scores, dtype=np.float64)
    classes = np.asarray(classes)
    n = len(scores)
    if n == 0:
        return scores.copy()
    if ious is None:
        m = np.ascontiguousarray(np.asarray(masks, dtype=bool).reshape(n, -1))
        ious = kernels.mask_iou(m)
    order = np.lexsort((np.arange(n), -scores))
    iou = np.asarray(ious, dtype=np.float64)[np.ix_(order, order)]
    same = classes[order][:, None] == classes[order][None, :]
    iou = np.triu(iou * same, k=1)
    cmax = iou.max(axis=0)  # best overlap of each candidate with a higher-scored one
    if method == "gaussian":
        decay = np.exp(-(iou ** 2 - cmax[:, None] ** 2) / sigma)
    elif method == "linear":
        # a candidate that fully overlaps a higher one has cmax 1; leave its suppressors undecayed
        denom = 1 - cmax[:, None]
        decay = np.where(denom > 0, (1 - iou) / np.where(denom > 0, denom, 1.0), 1.0 - iou)
    else:
        raise ValueError(f"unknown matrix NMS method {method!r}")
    # only higher-scored rows i < j count for column j
    decay = np.where(np.triu(np.ones((n, n), dtype=bool), k=1), decay, np.inf)
    coef = np.minimum(decay.min(axis=0), 1.0)
    out = np.empty(n)
    out[order] = scores[order] * coef
    return out


def _sort_key(p: InstancePrediction):
    return (-p.score, p.center[1], p.center[0], p.cls)


def resolve_overlaps(preds: list) -> list:
    """Give contested pixels to the higher-scored instance; drop instances left empty."""
    preds = sorted(preds, key=_sort_key)
    if not preds:
        return []
    shape = preds[0].shape
    taken = np.zeros(shape, dtype=bool)
    out = []
    for p in preds:
        y0, x0, y1, x1 = p.box
        crop = p.crop & ~taken[y0:y1, x0:x1]
        if not crop.any():
            continue
        taken[y0:y1, x0:x1] |= crop
        full_box = np.zeros(shape, dtype=bool)
        full_box[y0:y1, x0:x1] = crop
        out.append(InstancePrediction.from_mask(p.cls, p.score, p.center, full_box)
                   if not np.array_equal(crop, p.crop) else p)
    return out


def box_iou_matrix(preds: list) -> np.ndarray:
    """Mask IoU between predictions, touching only pairs whose boxes intersect."""
    n = len(preds)
    iou = np.eye(n)
    for i in range(n):
        a = preds[i]
        for j in range(i + 1, n):
            b = preds[j]
            y0, x0 = max(a.box[0], b.box[0]), max(a.box[1], b.box[1])
            y1, x1 = min(a.box[2], b.box[2]), min(a.box[3], b.box[3])
            if y0 >= y1 or x0 >= x1:
                continue
            ca = a.crop[y0 - a.box[0]:y1 - a.box[0], x0 - a.box[1]:x1 - a.box[1]]
            cb = b.crop[y0 - b.box[0]:y1 - b.box[0], x0 - b.box[1]:x1 - b.box[1]]
            inter = int(np.count_nonzero(ca & cb))
            if inter:
                iou[i, j] = iou[j, i] = inter / (a.area + b.area - inter)
    return iou


def _apply_nms(preds, cfg: InferenceConfig, ious=None):
    if not preds:
        return preds
    if ious is None:
        ious = box_iou_matrix(preds)
    new = matrix_nms(None, [p.score for p in preds], [p.cls for p in preds],
                     cfg.nms_method, cfg.nms_sigma, ious=ious)
    out = []
    for p, s in zip(preds, new):
        if s >= cfg.score_floor:
            out.append(InstancePrediction(p.cls, float(s), p.center, p.box, p.crop, p.shape))
    return out


def decode(heatmap, kernel_map, features, R: int = 4, cfg: InferenceConfig | None = None,
           mask_stack=None, **overrides) -> list[InstancePrediction]:
    """Decode one image's outputs: peaks, kernel gather, masks, optional matrix NMS, overlap fix.

    ``heatmap`` is ``(C, h, w)``, ``kernel_map`` ``(E, h, w)`` (ignored when
    ``mask_stack`` is given) and ``features`` ``(E, H, W)``.
    """
    cfg = cfg or InferenceConfig()
    if overrides:
        cfg = InferenceConfig(**{**cfg.__dict__, **overrides})
    peaks = extract_peaks(heatmap, cfg.conf)
    if not peaks:
        return []
    feats = torch.as_tensor(_np(features))
    cells = [(p.x, p.y) for p in peaks]
    with torch.no_grad():
        if mask_stack is not None:
            logits = standard_mask_logits(torch.as_tensor(_np(mask_stack)), cells, feats.shape[-2:])
        else:
            logits = dynamic_mask_logits(feats, gather_kernels(torch.as_tensor(_np(kernel_map)), cells))
        masks = (torch.sigmoid(logits) > cfg.mask_bin).numpy()
    nonempty = masks.reshape(len(peaks), -1).any(axis=1)
    half = R / 2
    preds = []
    keep_idx = []
    for i, p in enumerate(peaks):
        if not nonempty[i]:
            continue
        c = (p.x * R + half, p.y * R + half)
        c = tuple(int(v) if float(v).is_integer() else v for v in c)
        preds.append(InstancePrediction.from_mask(p.c, p.score, c, masks[i]))
        keep_idx.append(i)
    if cfg.use_nms and preds:
        sub = np.ascontiguousarray(masks[keep_idx].reshape(len(keep_idx), -1))
        preds = _apply_nms(preds, cfg, ious=kernels.mask_iou(sub))
    return resolve_overlaps(preds)


def decode_output(out, index: int = 0, R: int = 4, cfg: InferenceConfig | None = None, **kw):
    """:func:`decode` applied to item *index* of a batched ``NetworkOutput``."""
    stack = out.mask_stack[index] if out.mask_stack is not None else None
    kmap = out.kernels[index] if out.kernels is not None else None
    return decode(out.heatmap[index], kmap, out.features[index], R, cfg, mask_stack=stack, **kw)


class Predictor:
    """Wrap a model as ``tile (H, W, 3) -> decoded instances``, split into forward and decode."""

    def __init__(self, model, cfg: InferenceConfig | None = None):
        self.model = model
        self.cfg = cfg or InferenceConfig()
        self.R = model.cfg.stride
        self.forward_time = 0.0
        self.decode_time = 0.0

    def forward(self, tile: np.ndarray):
        x = torch.as_tensor(np.ascontiguousarray(tile.transpose(2, 0, 1)), dtype=torch.float32)[None]
        self.model.eval()
        with torch.no_grad():
            return self.model(x)

    def __call__(self, tile: np.ndarray) -> list[InstancePrediction]:
        import time

        t0 = time.perf_counter()
        out = self.forward(tile)
        t1 = time.perf_counter()
        preds = decode_output(out, 0, self.R, self.cfg)
        self.forward_time += t1 - t0
        self.decode_time += time.perf_counter() - t1
        return preds


def _tile_starts(L: int, T: int, step: int) -> list[int]:
    starts = [0]
    while starts[-1] + T < L:
        starts.append(starts[-1] + step)
    return starts


def tile_layout(H: int, W: int, tile: int = 256, overlap: int = 64, multiple: int = 32):
    """Tile origins and per-axis tile sizes for sliding-window inference."""
    if overlap >= tile:
        raise ValueError(f"overlap {overlap} must be smaller than tile {tile}")
    if tile % multiple:
        raise ValueError(f"tile {tile} must be a multiple of {multiple}")
    th = min(tile, -(-H // multiple) * multiple)
    tw = min(tile, -(-W // multiple) * multiple)
    ys = _tile_starts(H, th, tile - overlap)
    xs = _tile_starts(W, tw, tile - overlap)
    return ys, xs, th, tw


def predict_sliding(image: np.ndarray, predict_tile: Callable, cfg: InferenceConfig | None = None):
    """Tile *image*, decode each tile and merge.

    A tile keeps an instance only when its center falls in the tile interior:
    ``overlap / 2`` is trimmed from every edge that faces another tile. The
    merged set goes through one more matrix NMS pass and overlap resolution.
    """
    cfg = cfg or getattr(predict_tile, "cfg", None) or InferenceConfig()
    image = np.asarray(image, dtype=np.float32)
    H, W = image.shape[:2]
    ys, xs, th, tw = tile_layout(H, W, cfg.tile, cfg.overlap)
    fill = np.median(image.reshape(-1, image.shape[2]), axis=0)
    half = cfg.overlap / 2
    merged = []
    for a in ys:
        y_lo = a + half if a > 0 else -math.inf
        y_hi = a + th - half if a + th < H else math.inf
        for b in xs:
            x_lo = b + half if b > 0 else -math.inf
            x_hi = b + tw - half if b + tw < W else math.inf
            tile = pad_to(image[a:a + th, b:b + tw], th, tw, fill)
            vh, vw = min(th, H - a), min(tw, W - b)
            for p in predict_tile(tile):
                gx, gy = p.center[0] + b, p.center[1] + a
                if not (gx < W and gy < H and x_lo <= gx < x_hi and y_lo <= gy < y_hi):
                    continue
                local = p.mask[:vh, :vw]
                if not local.any():
                    continue
                full = np.zeros((H, W), dtype=bool)
                full[a:a + vh, b:b + vw] = local
                merged.append(InstancePrediction.from_mask(p.cls, p.score, (gx, gy), full))
    if cfg.use_nms:
        merged = _apply_nms(merged, cfg)
    return resolve_overlaps(merged)


# --------------------------------------------------------------------------- serialisation
def predictions_to_map(preds: list, shape) -> tuple[np.ndarray, dict]:
    """Label map (ids 1..N in list order) and id -> class table; later ids never overwrite."""
    inst = np.zeros(shape, dtype=np.int32)
    classes = {}
    for i, p in enumerate(preds, start=1):
        y0, x0, y1, x1 = p.box
        win = inst[y0:y1, x0:x1]
        win[p.crop & (win == 0)] = i
        classes[i] = p.cls
    return inst, classes


SIDECAR_FIELDS = ("id", "class", "score", "center_x", "center_y")


def save_predictions(out_dir, stem: str, preds: list, shape) -> tuple[Path, Path]:
    """Write ``<stem>_instances.png`` (16-bit label map) and ``<stem>_instances.tsv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    inst, _ = predictions_to_map(preds, shape)
    png = out_dir / f"{stem}_instances.png"
    PILImage.fromarray(inst.astype(np.uint16)).save(png)
    tsv = out_dir / f"{stem}_instances.tsv"
    with tsv.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(SIDECAR_FIELDS)
        for i, p in enumerate(preds, start=1):
            w.writerow([i, p.cls, f"{p.score:.6f}", p.center[0], p.center[1]])
    return png, tsv


def load_predictions(out_dir, stem: str):
    out_dir = Path(out_dir)
    with PILImage.open(out_dir / f"{stem}_instances.png") as im:
        inst = np.array(im).astype(np.int32)
    rows = []
    with (out_dir / f"{stem}_instances.tsv").open() as fh:
        for r in csv.DictReader(fh, delimiter="\t"):
            rows.append({"id": int(r["id"]), "class": int(r["class"]), "score": float(r["score"]),
                         "center": (float(r["center_x"]), float(r["center_y"]))})
    return inst, rows
