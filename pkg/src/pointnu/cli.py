"""Command line entry point: ``pointnu <command> ...``.

Exit codes: 0 success, 1 I/O error, 2 configuration error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .config import ConfigError, RunConfig, dump_config, parse_value, read_config_file

log = logging.getLogger("pointnu")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")


@contextlib.contextmanager
def atomic_dir(target):
    """Yield a temp directory that replaces *target* only if the block succeeds."""
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.tmp.", dir=target.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if target.exists():
        old = target.with_name(f".{target.name}.old")
        if old.exists():
            shutil.rmtree(old)
        target.rename(old)
        tmp.rename(target)
        shutil.rmtree(old, ignore_errors=True)
    else:
        tmp.rename(target)


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise ConfigError(item, f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = parse_value(v)
    return out


def _resolve_config(args, base: dict | None = None) -> RunConfig:
    """Checkpoint values < config file < ``--set`` overrides."""
    flat = dict(base or {})
    if getattr(args, "config", None):
        flat.update(read_config_file(args.config))
    flat.update(_overrides(getattr(args, "set", None)))
    return RunConfig.from_flat(flat)


def _read_rgb(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


# --------------------------------------------------------------------------- commands
def cmd_train(args) -> int:
    from .data import load_dataset
    from .trainer import train

    cfg = _resolve_config(args)
    if not Path(args.data).is_dir():
        raise FileNotFoundError(f"data root {args.data} does not exist")
    dataset = load_dataset(args.data)
    val = load_dataset(args.val) if args.val else None
    with atomic_dir(args.out) as tmp:
        dump_config(cfg, tmp / "config.yaml")
        res = train(dataset, cfg, tmp, val_dataset=val, resume=args.resume)
        (tmp / "summary.json").write_text(json.dumps(
            {"best_val_bPQ": res.best_bpq, "final_val_bPQ": res.final_bpq, "epochs": len(res.history)}, indent=2))
    print(f"final validation bPQ {res.final_bpq:.6f} (best {res.best_bpq:.6f}); outputs in {args.out}")
    return EXIT_OK


def _load_model(path):
    from .model import load_checkpoint

    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    model, payload = load_checkpoint(path)
    return model, payload.get("run_config", {})


def cmd_eval(args) -> int:
    from .data import load_dataset
    from .trainer import evaluate, gt_as_prediction

    model, base = (None, {})
    if args.checkpoint:
        model, base = _load_model(args.checkpoint)
    elif not args.gt_identity:
        raise ConfigError("checkpoint", "eval needs --checkpoint (or --gt-identity)")
    cfg = _resolve_config(args, base)
    dataset = load_dataset(args.data)
    hook = gt_as_prediction if args.gt_identity else None
    report = evaluate(model, dataset, cfg.infer, hook=hook, radius=cfg.match_radius)
    with atomic_dir(args.out) as tmp:
        dump_config(cfg, tmp / "config.yaml")
        report.write(tmp)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def _images_in(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise FileNotFoundError(f"no images in {path}")
        return files
    if not path.is_file():
        raise FileNotFoundError(f"{path} does not exist")
    return [path]


def cmd_infer(args) -> int:
    from .inference import Predictor, predict_sliding, predictions_to_map, save_predictions
    from .viz import render_overlay

    model, base = _load_model(args.checkpoint)
    cfg = _resolve_config(args, base)
    if args.no_nms:
        cfg = cfg.with_overrides(use_nms=False)
    files = _images_in(Path(args.input))
    predictor = Predictor(model, cfg.infer)
    with atomic_dir(args.out) as tmp:
        dump_config(cfg, tmp / "config.yaml")
        for f in files:
            img = _read_rgb(f)
            preds = predict_sliding(img, predictor, cfg.infer)
            save_predictions(tmp, f.stem, preds, img.shape[:2])
            inst, cls = predictions_to_map(preds, img.shape[:2])
            over = render_overlay((img * 255).round().astype(np.uint8), inst, cls)
            PILImage.fromarray(over).save(tmp / f"{f.stem}_overlay.png")
            print(f"{f.name}: {len(preds)} instances")
    return EXIT_OK


def run_bench(model, cfg: RunConfig, size: int, repeats: int, seed: int = 0) -> dict:
    """Time full sliding-window inference on a synthetic ``size x size`` image."""
    from .data import SyntheticConfig, generate_synthetic
    from .inference import Predictor, predict_sliding

    n = max(1, size * size // (128 * 128) * 8)
    syn = generate_synthetic(SyntheticConfig(image_size=size, n_images=1, count_range=(n, n), seed=seed))
    img = syn[0].image
    predictor = Predictor(model, cfg.infer)
    predict_sliding(img, predictor, cfg.infer)  # warm-up (numba compilation, allocator)
    totals, fwd, dec = [], [], []
    for _ in range(repeats):
        predictor.forward_time = predictor.decode_time = 0.0
        t0 = time.perf_counter()
        predict_sliding(img, predictor, cfg.infer)
        totals.append(time.perf_counter() - t0)
        fwd.append(predictor.forward_time)
        dec.append(predictor.decode_time)
    stat = lambda v: {"mean": float(np.mean(v)), "std": float(np.std(v))}  # noqa: E731
    return {"image_size": size, "repeats": repeats, "samples": totals,
            "total": stat(totals), "forward": stat(fwd), "decode": stat(dec),
            "merge": stat(np.array(totals) - np.array(fwd) - np.array(dec))}


def cmd_bench(args) -> int:
    from .model import build_model

    if args.checkpoint:
        model, base = _load_model(args.checkpoint)
        cfg = _resolve_config(args, base)
    else:
        cfg = _resolve_config(args)
        model = build_model(cfg.model, seed=cfg.train.seed)
    model.eval()
    res = run_bench(model, cfg, args.size, args.repeats)
    lines = [f"{'stage':<10}{'mean s':>12}{'std s':>12}"]
    for k in ("total", "forward", "decode", "merge"):
        lines.append(f"{k:<10}{res[k]['mean']:>12.4f}{res[k]['std']:>12.4f}")
    print("\n".join(lines))
    if args.out:
        with atomic_dir(args.out) as tmp:
            dump_config(cfg, tmp / "config.yaml")
            (tmp / "bench.json").write_text(json.dumps(res, indent=2))
    return EXIT_OK


def cmd_synth(args) -> int:
    from .data import SyntheticConfig, generate_synthetic, save_dataset

    cfg = SyntheticConfig(image_size=args.size, n_images=args.n_images, count_range=(args.count_min, args.count_max),
                          axis_range=(args.axis_min, args.axis_max), num_classes=args.classes,
                          overlap=args.overlap, noise=args.noise, seed=args.seed)
    save_dataset(generate_synthetic(cfg, prefix=args.prefix), args.out)
    print(f"wrote {args.n_images} images to {args.out}")
    return EXIT_OK


def cmd_import_pannuke(args) -> int:
    from .data import import_pannuke

    for p in (args.images, args.masks):
        if not Path(p).is_file():
            raise FileNotFoundError(f"{p} does not exist")
    ds = import_pannuke(args.images, args.masks, args.out, types_blob=args.types)
    print(f"imported {len(ds)} images into {args.out}")
    return EXIT_OK


def cmd_render_overlay(args) -> int:
    from .inference import load_predictions
    from .viz import render_overlay

    img = np.asarray(PILImage.open(args.image).convert("RGB"))
    pred_dir = Path(args.predictions)
    stem = args.stem or Path(args.image).stem
    inst, rows = load_predictions(pred_dir, stem)
    classes = {r["id"]: r["class"] for r in rows}
    gt_inst = gt_cls = None
    if args.gt:
        from .data import load_dataset

        ds = load_dataset(args.gt)
        match = [s for s in ds if s.name == stem]
        if not match:
            raise FileNotFoundError(f"no ground truth for {stem} in {args.gt}")
        gt_inst, gt_cls = match[0].annotation.instance_map, match[0].annotation.class_of
    out = render_overlay(img, inst, classes, gt_inst, gt_cls)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(out).save(args.out)
    return EXIT_OK


# --------------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pointnu", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="YAML key/value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        return sp

    sp = with_config(sub.add_parser("train", help="train a model"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--val", help="validation dataset root (default: hold out val_fraction)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume", help="checkpoint to resume from")
    sp.set_defaults(func=cmd_train)

    sp = with_config(sub.add_parser("eval", help="evaluate a checkpoint on a dataset"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--gt-identity", action="store_true", help="score the ground truth against itself")
    sp.set_defaults(func=cmd_eval)

    sp = with_config(sub.add_parser("infer", help="predict instances for images"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True, help="image file or directory")
    sp.add_argument("--out", required=True)
    sp.add_argument("--no-nms", action="store_true", help="skip matrix NMS")
    sp.set_defaults(func=cmd_infer)

    sp = with_config(sub.add_parser("bench", help="time sliding-window inference"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--size", type=int, default=1000)
    sp.add_argument("--repeats", type=int, default=10)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("synth", help="write a synthetic nuclei dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-images", type=int, default=8)
    sp.add_argument("--size", type=int, default=128)
    sp.add_argument("--classes", type=int, default=2)
    sp.add_argument("--count-min", type=int, default=6)
    sp.add_argument("--count-max", type=int, default=12)
    sp.add_argument("--axis-min", type=float, default=4.0)
    sp.add_argument("--axis-max", type=float, default=8.0)
    sp.add_argument("--overlap", type=float, default=0.0)
    sp.add_argument("--noise", type=float, default=0.04)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--prefix", default="synth")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("import-pannuke", help="convert a PanNuke fold to the dataset format")
    sp.add_argument("--images", required=True, help="images.npy  (N, 256, 256, 3)")
    sp.add_argument("--masks", required=True, help="masks.npy   (N, 256, 256, C+1)")
    sp.add_argument("--types", help="types.npy (N,) tissue names")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_import_pannuke)

    sp = sub.add_parser("render-overlay", help="draw predicted contours on an image")
    sp.add_argument("--image", required=True)
    sp.add_argument("--predictions", required=True, help="directory written by `infer`")
    sp.add_argument("--stem", help="prediction stem (default: image file stem)")
    sp.add_argument("--gt", help="dataset root; adds a ground-truth panel on the left")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_render_overlay)
    return p


def main(argv=None) -> int:
    from .trainer import NumericalError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error [{exc.key}]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
