"""Evaluation: IoU matching, panoptic quality, detection/classification F1, size buckets."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import kernels

MATCH_IOU = 0.5


class MatchResult(NamedTuple):
    pairs: list  # (pred id, gt id, iou)
    unmatched_pred: list
    unmatched_gt: list


def as_instance_map(x) -> np.ndarray:
    """Accept a label map or a ``(N, H, W)`` stack of masks (which must be disjoint)."""
    a = np.asarray(x)
    if a.ndim == 2:
        return a.astype(np.int64, copy=False)
    if a.ndim != 3:
        raise ValueError(f"expected a 2-D map or 3-D mask stack, got shape {a.shape}")
    stack = a.astype(bool)
    if stack.shape[0] and stack.sum(axis=0).max() > 1:
        raise ValueError("instances overlap within one map")
    out = np.zeros(stack.shape[1:], dtype=np.int64)
    for i, m in enumerate(stack, start=1):
        out[m] = i
    return out


def _compact(m: np.ndarray):
    ids = np.unique(m)
    ids = ids[ids > 0]
    lut = np.zeros(int(m.max(initial=0)) + 1, dtype=np.int64)
    lut[ids] = np.arange(1, len(ids) + 1)
    return lut[m], ids


def match_instances(pred, gt) -> MatchResult:
    """Pair predicted and ground-truth instances whose IoU exceeds 0.5 (unique by construction)."""
    pm, gm = as_instance_map(pred), as_instance_map(gt)
    if pm.shape != gm.shape:
        raise ValueError(f"shape mismatch {pm.shape} vs {gm.shape}")
    pc, pids = _compact(pm)
    gc, gids = _compact(gm)
    cont = kernels.contingency(np.ascontiguousarray(pc), np.ascontiguousarray(gc), len(pids), len(gids))
    inter = cont[1:, 1:].astype(np.float64)
    pa = cont[1:, :].sum(axis=1).astype(np.float64)
    ga = cont[:, 1:].sum(axis=0).astype(np.float64)
    union = pa[:, None] + ga[None, :] - inter
    iou = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
    hit = iou > MATCH_IOU
    if np.any(hit.sum(axis=0) > 1) or np.any(hit.sum(axis=1) > 1):
        raise AssertionError("IoU > 0.5 matching is not one-to-one; instances must be disjoint")
    pi, gi = np.nonzero(hit)
    pairs = [(int(pids[p]), int(gids[g]), float(iou[p, g])) for p, g in zip(pi, gi)]
    mp, mg = set(pi.tolist()), set(gi.tolist())
    return MatchResult(pairs,
                       [int(pids[i]) for i in range(len(pids)) if i not in mp],
                       [int(gids[i]) for i in range(len(gids)) if i not in mg])


@dataclass
class PQCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0

    @classmethod
    def from_match(cls, m: MatchResult) -> "PQCounts":
        return cls(len(m.pairs), len(m.unmatched_pred), len(m.unmatched_gt), float(sum(p[2] for p in m.pairs)))

    def __add__(self, other: "PQCounts") -> "PQCounts":
        return PQCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.iou_sum + other.iou_sum)

    def quality(self) -> tuple[float, float, float]:
        return pq_from_counts(self.tp, self.fp, self.fn, self.iou_sum)


def pq_from_counts(tp, fp, fn, iou_sum):
    denom = tp + 0.5 * fp + 0.5 * fn
    dq = tp / denom if denom else 0.0
    sq = iou_sum / tp if tp else 0.0
    return dq, sq, dq * sq


def panoptic_quality(match: MatchResult) -> tuple[float, float, float]:
    """``(DQ, SQ, PQ)``; SQ is 0 when there are no true positives."""
    return PQCounts.from_match(match).quality()


# --------------------------------------------------------------------------- detection
def greedy_center_pairs(pred_xy: np.ndarray, gt_xy: np.ndarray, radius: float):
    """Pairs ``(pred index, gt index)`` taken in ascending distance, each used once, within *radius*."""
    pred_xy = np.asarray(pred_xy, dtype=np.float64).reshape(-1, 2)
    gt_xy = np.asarray(gt_xy, dtype=np.float64).reshape(-1, 2)
    if not len(pred_xy) or not len(gt_xy):
        return []
    d = np.sqrt(((pred_xy[:, None, :] - gt_xy[None, :, :]) ** 2).sum(-1))
    pi, gi = np.nonzero(d <= radius)
    order = np.lexsort((gi, pi, d[pi, gi]))
    used_p, used_g, pairs = set(), set(), []
    for o in order:
        p, g = int(pi[o]), int(gi[o])
        if p in used_p or g in used_g:
            continue
        used_p.add(p)
        used_g.add(g)
        pairs.append((p, g))
    return pairs


def prf(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def gt_centroids(inst: np.ndarray, n: int) -> np.ndarray:
    """Float ``(x, y)`` centroid per instance id 1..n."""
    if n == 0:
        return np.zeros((0, 2))
    ys, xs = np.nonzero(inst)
    ids = inst[ys, xs]
    cnt = np.bincount(ids, minlength=n + 1)[1:].astype(np.float64)
    cx = np.bincount(ids, weights=xs, minlength=n + 1)[1:] / np.maximum(cnt, 1)
    cy = np.bincount(ids, weights=ys, minlength=n + 1)[1:] / np.maximum(cnt, 1)
    return np.stack([cx, cy], axis=1)


@dataclass
class ImageEval:
    """Everything the split-level report needs from one image."""

    binary: PQCounts
    per_class: dict  # class -> PQCounts
    det_pairs: list  # (pred idx, gt idx)
    pred_classes: np.ndarray
    gt_classes: np.ndarray
    pred_areas: np.ndarray
    gt_areas: np.ndarray
    tissue: str | None = None

    @property
    def n_pred(self) -> int:
        return len(self.pred_classes)

    @property
    def n_gt(self) -> int:
        return len(self.gt_classes)


def evaluate_image(pred_map, pred_classes: dict, pred_centers, gt_map, gt_class_of: dict, num_classes: int,
                   radius: float = 12.0, tissue: str | None = None) -> ImageEval:
    """Score one image. Prediction ids are 1..N in *pred_map*; centers align with those ids."""
    pm = np.asarray(pred_map, dtype=np.int64)
    gm = np.asarray(gt_map, dtype=np.int64)
    binary = PQCounts.from_match(match_instances(pm, gm))
    n_pred = len(pred_classes)
    n_gt = len(gt_class_of)
    pcls = np.array([pred_classes[i] for i in range(1, n_pred + 1)], dtype=np.int64)
    gcls = np.array([gt_class_of[i] for i in range(1, n_gt + 1)], dtype=np.int64)
    per_class = {}
    for c in range(1, num_classes + 1):
        plut = np.zeros(n_pred + 1, dtype=np.int64)
        plut[1:] = np.where(pcls == c, np.arange(1, n_pred + 1), 0)
        glut = np.zeros(n_gt + 1, dtype=np.int64)
        glut[1:] = np.where(gcls == c, np.arange(1, n_gt + 1), 0)
        per_class[c] = PQCounts.from_match(match_instances(plut[pm], glut[gm]))
    pred_areas = np.bincount(pm.ravel(), minlength=n_pred + 1)[1:n_pred + 1]
    gt_areas = np.bincount(gm.ravel(), minlength=n_gt + 1)[1:n_gt + 1]
    pairs = greedy_center_pairs(np.asarray(pred_centers, dtype=np.float64).reshape(-1, 2),
                                gt_centroids(gm, n_gt), radius)
    return ImageEval(binary, per_class, pairs, pcls, gcls, pred_areas, gt_areas, tissue)


def detection_f1(evals: Sequence[ImageEval], num_classes: int):
    """Pooled detection P/R/F1 and per-class classification P/R/F1 among detection pairs."""
    tp = sum(len(e.det_pairs) for e in evals)
    fp = sum(e.n_pred - len(e.det_pairs) for e in evals)
    fn = sum(e.n_gt - len(e.det_pairs) for e in evals)
    det = prf(tp, fp, fn)
    cls = {}
    for c in range(1, num_classes + 1):
        ctp = cfp = cfn = 0
        for e in evals:
            for p, g in e.det_pairs:
                pc, gc = e.pred_classes[p], e.gt_classes[g]
                ctp += int(pc == c and gc == c)
                cfp += int(pc == c and gc != c)
                cfn += int(pc != c and gc == c)
        cls[c] = {"P": 0.0, "R": 0.0, "F1": 0.0, "TP": ctp, "FP": cfp, "FN": cfn}
        cls[c]["P"], cls[c]["R"], cls[c]["F1"] = prf(ctp, cfp, cfn)
    return {"P": det[0], "R": det[1], "F1": det[2], "TP": tp, "FP": fp, "FN": fn}, cls


BUCKETS = ("small", "medium", "large")


def size_thresholds(evals: Sequence[ImageEval]) -> tuple[float, float]:
    areas = np.concatenate([e.gt_areas for e in evals]) if evals else np.zeros(0)
    if areas.size == 0:
        return 0.0, 0.0
    return float(np.percentile(areas, 25)), float(np.percentile(areas, 75))


def bucket_of(areas, lo, hi) -> np.ndarray:
    """0 small (< 25th pct), 2 large (> 75th pct), 1 otherwise."""
    a = np.asarray(areas, dtype=np.float64)
    return np.where(a < lo, 0, np.where(a > hi, 2, 1))


def size_bucket_report(evals: Sequence[ImageEval]) -> dict:
    """Detection F1 per gt size bucket; unpaired predictions are bucketed by their own area."""
    lo, hi = size_thresholds(evals)
    out = {"thresholds": [lo, hi]}
    counts = {b: [0, 0, 0] for b in range(3)}
    for e in evals:
        gb = bucket_of(e.gt_areas, lo, hi)
        pb = bucket_of(e.pred_areas, lo, hi)
        paired_p = {p for p, _ in e.det_pairs}
        paired_g = {g for _, g in e.det_pairs}
        for _, g in e.det_pairs:
            counts[int(gb[g])][0] += 1
        for p in range(e.n_pred):
            if p not in paired_p:
                counts[int(pb[p])][1] += 1
        for g in range(e.n_gt):
            if g not in paired_g:
                counts[int(gb[g])][2] += 1
    for b, name in enumerate(BUCKETS):
        tp, fp, fn = counts[b]
        p, r, f = prf(tp, fp, fn)
        out[name] = {"P": p, "R": r, "F1": f, "TP": tp, "FP": fp, "FN": fn}
    return out


# --------------------------------------------------------------------------- report
REPORT_KEYS = (
    "bPQ", "bDQ", "bSQ", "mPQ", "mPQ_image_avg", "bPQ_image_avg", "per_class", "detection",
    "classification", "size_buckets", "per_tissue", "counts",
)
PER_CLASS_KEYS = ("DQ", "SQ", "PQ", "TP", "FP", "FN")


@dataclass
class EvalReport:
    bPQ: float
    bDQ: float
    bSQ: float
    mPQ: float
    mPQ_image_avg: float
    bPQ_image_avg: float
    per_class: dict
    detection: dict
    classification: dict
    size_buckets: dict
    per_tissue: dict
    counts: dict

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_KEYS}

    def to_text(self) -> str:
        lines = [
            f"bPQ {self.bPQ:.4f}  (DQ {self.bDQ:.4f}, SQ {self.bSQ:.4f})",
            f"mPQ {self.mPQ:.4f}",
            f"per-image averages: mPQ {self.mPQ_image_avg:.4f}, bPQ {self.bPQ_image_avg:.4f}",
            "",
            f"{'class':<16}{'DQ':>8}{'SQ':>8}{'PQ':>8}{'TP':>6}{'FP':>6}{'FN':>6}",
        ]
        for name, v in self.per_class.items():
            lines.append(f"{name:<16}{v['DQ']:>8.4f}{v['SQ']:>8.4f}{v['PQ']:>8.4f}{v['TP']:>6}{v['FP']:>6}{v['FN']:>6}")
        d = self.detection
        lines += ["", f"detection  P {d['P']:.4f}  R {d['R']:.4f}  F1 {d['F1']:.4f}", "classification"]
        for name, v in self.classification.items():
            lines.append(f"  {name:<14}P {v['P']:.4f}  R {v['R']:.4f}  F1 {v['F1']:.4f}")
        sb = self.size_buckets
        lines.append("size buckets (area thresholds %.1f / %.1f px)" % tuple(sb["thresholds"]))
        for b in BUCKETS:
            lines.append(f"  {b:<8}F1 {sb[b]['F1']:.4f}")
        if self.per_tissue:
            lines += ["", f"{'tissue':<20}{'mPQ':>8}{'bPQ':>8}"]
            for t, v in self.per_tissue.items():
                lines.append(f"{t:<20}{v['mPQ']:>8.4f}{v['bPQ']:>8.4f}")
        lines.append("")
        lines.append("counts " + ", ".join(f"{k}={v}" for k, v in self.counts.items()))
        return "\n".join(lines) + "\n"

    def write(self, out_dir, stem: str = "report") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        txt = out_dir / f"{stem}.txt"
        js = out_dir / f"{stem}.json"
        txt.write_text(self.to_text())
        js.write_text(json.dumps(self.to_dict(), indent=2))
        return txt, js


def _mpq(per_class_counts: dict, present: set) -> float:
    vals = [per_class_counts[c].quality()[2] for c in sorted(present)]
    return float(np.mean(vals)) if vals else 0.0


def _pooled(evals):
    return sum((e.binary for e in evals), PQCounts())


def aggregate(evals: Sequence[ImageEval], num_classes: int, class_names: Sequence[str] | None = None) -> EvalReport:
    """Pool counts over the split; mPQ averages classes present in the ground truth."""
    if not evals:
        raise ValueError("aggregate: no images")
    names = list(class_names) if class_names else [f"class{c}" for c in range(1, num_classes + 1)]
    binary = _pooled(evals)
    bdq, bsq, bpq = binary.quality()
    per = {c: sum((e.per_class[c] for e in evals), PQCounts()) for c in range(1, num_classes + 1)}
    present = {c for c in per if per[c].tp + per[c].fn > 0}
    mpq = _mpq(per, present)

    img_m, img_b = [], []
    for e in evals:
        ep = {c for c in range(1, num_classes + 1) if e.per_class[c].tp + e.per_class[c].fn > 0}
        # images with nothing to score would only add arbitrary zeros
        if e.binary.tp + e.binary.fp + e.binary.fn > 0:
            img_b.append(e.binary.quality()[2])
        if ep:
            img_m.append(_mpq(e.per_class, ep))

    per_tissue = {}
    tissues = sorted({e.tissue for e in evals if e.tissue is not None})
    for t in tissues:
        sub = [e for e in evals if e.tissue == t]
        tp = {c: sum((e.per_class[c] for e in sub), PQCounts()) for c in range(1, num_classes + 1)}
        tpresent = {c for c in tp if tp[c].tp + tp[c].fn > 0}
        per_tissue[t] = {"mPQ": _mpq(tp, tpresent), "bPQ": _pooled(sub).quality()[2], "images": len(sub)}

    det, cls = detection_f1(evals, num_classes)
    per_class = {}
    for c in range(1, num_classes + 1):
        dq, sq, pq = per[c].quality()
        per_class[names[c - 1]] = {"DQ": dq, "SQ": sq, "PQ": pq, "TP": per[c].tp, "FP": per[c].fp, "FN": per[c].fn}
    counts = {"images": len(evals), "gt_instances": int(sum(e.n_gt for e in evals)),
              "pred_instances": int(sum(e.n_pred for e in evals)), "TP": binary.tp, "FP": binary.fp,
              "FN": binary.fn}
    return EvalReport(
        bPQ=bpq, bDQ=bdq, bSQ=bsq, mPQ=mpq,
        mPQ_image_avg=float(np.mean(img_m)) if img_m else 0.0,
        bPQ_image_avg=float(np.mean(img_b)) if img_b else 0.0,
        per_class=per_class, detection=det,
        classification={names[c - 1]: v for c, v in cls.items()},
        size_buckets=size_bucket_report(evals), per_tissue=per_tissue, counts=counts,
    )
