"""Optimisation loop, schedule, checkpointing and dataset-level evaluation."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .augment import augment
from .config import RunConfig
from .data import Dataset, InstanceAnnotation, Sample, pad_to
from .inference import InferenceConfig, InstancePrediction, Predictor, predict_sliding, predictions_to_map
from .losses import total_loss
from .metrics import EvalReport, aggregate, evaluate_image
from .model import PointNuNet, build_model, load_checkpoint, read_checkpoint, save_checkpoint
from .targets import render_heatmap

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: PointNuNet
    history: list
    best_bpq: float
    final_bpq: float
    last_checkpoint: Path | None
    best_checkpoint: Path | None


def split_train_val(n: int, fraction: float, seed: int) -> tuple[list, list]:
    """Deterministic hold-out split; with fewer than 2 images validation reuses training."""
    if n < 2 or fraction <= 0:
        idx = list(range(n))
        return idx, idx
    n_val = min(max(1, int(round(fraction * n))), n - 1)
    perm = np.random.default_rng([seed, 7919]).permutation(n)
    return sorted(perm[n_val:].tolist()), sorted(perm[:n_val].tolist())


def _fit_size(img, ann: InstanceAnnotation, size: int):
    """Pad to at least ``size`` (median fill, background label) and crop the top-left window."""
    H, W = ann.shape
    if H < size or W < size:
        Hp, Wp = max(H, size), max(W, size)
        img = pad_to(img, Hp, Wp)
        inst = np.zeros((Hp, Wp), dtype=np.int32)
        inst[:H, :W] = ann.instance_map
        ann = InstanceAnnotation(inst, ann.class_of, ann.num_classes)
    if ann.shape != (size, size):
        from .data import relabel

        img = img[:size, :size]
        ann = relabel(ann.instance_map[:size, :size], ann.class_of, ann.num_classes)
    return img, ann


def make_batch(samples, cfg: RunConfig, epoch: int, indices):
    aug_cfg = cfg.augment_config()
    size = cfg.train.crop_size
    images, anns, targets = [], [], []
    for i in indices:
        s = samples[i]
        img, ann = augment(s.image, s.annotation, np.random.default_rng([cfg.train.seed, epoch, int(i)]), aug_cfg)
        img, ann = _fit_size(img, ann, size)
        images.append(img.transpose(2, 0, 1))
        anns.append(ann)
        targets.append(render_heatmap(ann, size, size, cfg.model.stride, cfg.train.tau, cfg.train.target_mode))
    x = torch.as_tensor(np.stack(images), dtype=torch.float32)
    return x, targets, anns


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


def train(dataset: Dataset, cfg: RunConfig, out_dir=None, val_dataset: Dataset | None = None,
          resume=None) -> TrainResult:
    """Train on *dataset*; write ``last.pt``, ``best.pt`` and ``train_log.jsonl`` under *out_dir*.

    Validation bPQ is computed every ``val_every`` epochs and at the final epoch.
    """
    tc = cfg.train
    if len(dataset) == 0:
        raise ValueError("empty training set")
    if cfg.model.num_classes != dataset.num_classes:
        raise ValueError(f"model has {cfg.model.num_classes} classes, dataset has {dataset.num_classes}")
    if cfg.infer.tile != tc.crop_size:
        # coordinate channels are normalised per input, so positions only mean the same at equal sizes
        log.warning("crop_size %d differs from inference tile %d; mask quality usually suffers",
                    tc.crop_size, cfg.infer.tile)
    torch.use_deterministic_algorithms(True)
    if val_dataset is None:
        tr_idx, va_idx = split_train_val(len(dataset), tc.val_fraction, tc.seed)
        train_set, val_set = dataset.subset(tr_idx), dataset.subset(va_idx)
    else:
        train_set, val_set = dataset, val_dataset

    model = build_model(cfg.model, seed=tc.seed)
    # the standard segmentor's per-cell head depends on the crop size; build it before the optimiser
    if cfg.model.segmentor == "standard":
        cells = (tc.crop_size // cfg.model.stride) ** 2
        model._standard_head(cells)
    opt = torch.optim.AdamW(model.parameters(), lr=tc.base_lr, weight_decay=tc.weight_decay)
    start_epoch, best_bpq = 0, -1.0
    history = []
    if resume is not None:
        payload = read_checkpoint(resume)
        model.load_state_dict(payload["state_dict"])
        opt.load_state_dict(payload["optimizer"])
        start_epoch = int(payload["epoch"]) + 1
        best_bpq = float(payload.get("best_bpq", -1.0))
        history = list(payload.get("history", []))

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl" if out else None
    last_ckpt = best_ckpt = None
    final_bpq = float("nan")
    n = len(train_set)
    samples = train_set.samples
    for epoch in range(start_epoch, tc.epochs):
        lr = tc.lr_at(epoch)
        _set_lr(opt, lr)
        model.train()
        perm = np.random.default_rng([tc.seed, epoch]).permutation(n)
        sums = {"total": 0.0, "keypoint": 0.0, "mask": 0.0}
        steps = 0
        t0 = time.perf_counter()
        for b in range(0, n, tc.batch_size):
            idx = perm[b:b + tc.batch_size]
            x, targets, anns = make_batch(samples, cfg, epoch, idx)
            outputs = model(x)
            lb = total_loss(outputs, targets, anns, tc.lambda_mask, tc.detector_loss, tc.focal_alpha, tc.focal_beta)
            if not torch.isfinite(lb.total):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch} batch {b // tc.batch_size}: "
                    f"keypoint={lb.keypoint_loss} mask={lb.mask_loss} total={float(lb.total.detach())}")
            opt.zero_grad(set_to_none=True)
            lb.total.backward()
            if tc.grad_clip and tc.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
            opt.step()
            steps += 1
            sums["total"] += float(lb.total.detach())
            sums["keypoint"] += lb.keypoint_loss
            sums["mask"] += lb.mask_loss
        entry = {"epoch": epoch, "lr": lr, **{k: v / max(steps, 1) for k, v in sums.items()},
                 "seconds": round(time.perf_counter() - t0, 3), "val_bPQ": None}
        last_epoch = epoch == tc.epochs - 1
        if last_epoch or (tc.val_every > 0 and (epoch + 1) % tc.val_every == 0):
            rep = evaluate(model, val_set, cfg.infer, radius=cfg.match_radius)
            entry["val_bPQ"] = rep.bPQ
            entry["val_mPQ"] = rep.mPQ
            if last_epoch:
                final_bpq = rep.bPQ
            if rep.bPQ > best_bpq:
                best_bpq = rep.bPQ
                if out is not None:
                    best_ckpt = save_checkpoint(out / "best.pt", model, _extra(cfg, epoch, opt, best_bpq, history + [entry]))
        history.append(entry)
        log.info("epoch %d lr %.2e loss %.4f (kp %.4f mask %.4f) val bPQ %s", epoch, lr, entry["total"],
                 entry["keypoint"], entry["mask"], entry["val_bPQ"])
        if log_path is not None:
            with log_path.open("a") as fh:
                fh.write(json.dumps(entry) + "\n")
            last_ckpt = save_checkpoint(out / "last.pt", model, _extra(cfg, epoch, opt, best_bpq, history))
    model.eval()
    return TrainResult(model, history, best_bpq, final_bpq, last_ckpt, best_ckpt)


def _extra(cfg: RunConfig, epoch, opt, best_bpq, history):
    return {"run_config": cfg.to_flat(), "epoch": epoch, "optimizer": opt.state_dict(),
            "best_bpq": best_bpq, "history": list(history)}


def gt_as_prediction(sample: Sample) -> list[InstancePrediction]:
    """Identity hook: the ground truth itself, each instance with score 1."""
    from .metrics import gt_centroids

    ann = sample.annotation
    cents = gt_centroids(ann.instance_map, ann.num_instances)
    return [InstancePrediction.from_mask(ann.class_of[k], 1.0, tuple(cents[k - 1]), ann.instance_map == k)
            for k in range(1, ann.num_instances + 1)]


def evaluate(model, dataset: Dataset, infer_cfg: InferenceConfig | None = None,
             hook: Callable[[Sample], list] | None = None, radius: float = 12.0) -> EvalReport:
    """Sliding-window prediction over *dataset*, scored and pooled into an :class:`EvalReport`.

    *model* may be a network, a checkpoint path, or ``None`` when *hook*
    supplies the predictions.
    """
    if dataset is None or len(dataset) == 0:
        raise ValueError("evaluate: empty dataset")
    infer_cfg = infer_cfg or InferenceConfig()
    predictor = None
    if hook is None:
        if isinstance(model, (str, Path)):
            model, _ = load_checkpoint(model)
        if model.cfg.num_classes != dataset.num_classes:
            raise ValueError(
                f"checkpoint predicts {model.cfg.num_classes} classes, dataset has {dataset.num_classes}")
        predictor = Predictor(model, infer_cfg)
    evals = []
    for s in dataset:
        preds = hook(s) if hook is not None else predict_sliding(s.image, predictor, infer_cfg)
        pmap, pcls = predictions_to_map(preds, s.annotation.shape)
        centers = np.array([p.center for p in preds], dtype=np.float64).reshape(-1, 2)
        evals.append(evaluate_image(pmap, pcls, centers, s.annotation.instance_map, s.annotation.class_of,
                                    dataset.num_classes, radius, s.tissue))
    return aggregate(evals, dataset.num_classes, dataset.class_names)
