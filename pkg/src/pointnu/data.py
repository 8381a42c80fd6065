"""Datasets: in-memory types, the PNG directory format, synthetic nuclei, PanNuke import.

Arrays use numpy's row-major layout: images are ``(H, W, 3)`` float32 in
``[0, 1]`` and instance maps are ``(H, W)`` integer arrays, 0 = background.
"""
from __future__ import annotations

import json
import logging
import math
import shutil
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image as PILImage

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
PANNUKE_CLASSES = ("Neoplastic", "Inflammatory", "Connective", "Dead", "Epithelial")


class AnnotationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class InstanceAnnotation:
    """Per-image ground truth: an instance label map plus each instance's class (1..C)."""

    instance_map: np.ndarray
    class_of: dict
    num_classes: int

    def __post_init__(self):
        m = np.asarray(self.instance_map)
        if m.ndim != 2:
            raise AnnotationError(f"instance_map must be 2-D, got shape {m.shape}")
        if m.size and m.min() < 0:
            raise AnnotationError("instance_map has negative ids")
        object.__setattr__(self, "instance_map", m.astype(np.int32, copy=False))
        object.__setattr__(self, "class_of", {int(k): int(v) for k, v in self.class_of.items()})
        if self.num_classes < 1:
            raise AnnotationError("num_classes must be positive")
        ids = np.unique(m)
        ids = ids[ids > 0]
        k = len(ids)
        if not np.array_equal(ids, np.arange(1, k + 1)):
            raise AnnotationError(f"instance ids must be contiguous 1..K, got {ids.tolist()[:10]}")
        if set(self.class_of) != set(range(1, k + 1)):
            raise AnnotationError(
                f"class_of keys {sorted(self.class_of)[:10]} do not match instance ids 1..{k}")
        bad = [c for c in self.class_of.values() if not 1 <= c <= self.num_classes]
        if bad:
            raise AnnotationError(f"class ids {bad[:5]} outside 1..{self.num_classes}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.instance_map.shape

    @property
    def num_instances(self) -> int:
        return len(self.class_of)

    def mask(self, k: int) -> np.ndarray:
        return self.instance_map == k

    def areas(self) -> np.ndarray:
        """Pixel count per instance, indexed by id (entry 0 is background)."""
        return np.bincount(self.instance_map.ravel(), minlength=self.num_instances + 1)

    def classes(self) -> np.ndarray:
        """Class per id as an array (entry 0 is 0)."""
        out = np.zeros(self.num_instances + 1, dtype=np.int64)
        for k, c in self.class_of.items():
            out[k] = c
        return out

    def class_map(self) -> np.ndarray:
        return self.classes()[self.instance_map]

    @classmethod
    def empty(cls, shape, num_classes) -> "InstanceAnnotation":
        return cls(np.zeros(shape, np.int32), {}, num_classes)


def relabel(instance_map: np.ndarray, class_of: dict, num_classes: int) -> InstanceAnnotation:
    """Make ids contiguous (in ascending order of the old ids) and drop vanished instances."""
    m = np.asarray(instance_map)
    present = np.unique(m)
    present = present[present > 0]
    lut = np.zeros(int(m.max(initial=0)) + 1, dtype=np.int32)
    lut[present] = np.arange(1, len(present) + 1, dtype=np.int32)
    new_classes = {i + 1: int(class_of[int(old)]) for i, old in enumerate(present)}
    return InstanceAnnotation(lut[m], new_classes, num_classes)


@dataclass(frozen=True, eq=False)
class Sample:
    image: np.ndarray
    annotation: InstanceAnnotation
    name: str
    tissue: str | None = None

    def __post_init__(self):
        img = np.asarray(self.image)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"image must be (H, W, 3), got {img.shape}")
        if img.shape[:2] != self.annotation.shape:
            raise ValueError(f"image {img.shape[:2]} and annotation {self.annotation.shape} differ in size")
        if img.size and (img.min() < 0 or img.max() > 1):
            raise ValueError("image values must lie in [0, 1]")
        object.__setattr__(self, "image", img.astype(np.float32, copy=False))


@dataclass(frozen=True, eq=False)
class Dataset:
    samples: tuple
    class_names: tuple

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if not self.samples:
            raise ValueError("dataset is empty")
        C = len(self.class_names)
        for s in self.samples:
            if s.annotation.num_classes != C:
                raise ValueError(
                    f"sample {s.name} has {s.annotation.num_classes} classes, dataset has {C}")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Dataset(self.samples[i], self.class_names)
        return self.samples[i]

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], self.class_names)

    @property
    def tissues(self) -> list:
        return [s.tissue for s in self.samples]


# --------------------------------------------------------------------------- disk format
def _read_png(path: Path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.array(im)


def _read_image(path: Path) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.array(im.convert("RGB"))
    return arr.astype(np.float32) / 255.0


def load_dataset(root) -> Dataset:
    """Read ``images/``, ``instance_maps/``, ``class_maps/`` and ``manifest.json`` under *root*."""
    root = Path(root)
    manifest_path = root / MANIFEST
    if not manifest_path.is_file():
        raise FileNotFoundError(f"{manifest_path} not found")
    manifest = json.loads(manifest_path.read_text())
    class_names = manifest["classes"]
    tissues = manifest.get("tissues", {})
    C = len(class_names)
    dirs = {k: root / k for k in ("images", "instance_maps", "class_maps")}
    for d in dirs.values():
        if not d.is_dir():
            raise FileNotFoundError(f"missing directory {d}")
    stems = {k: {p.stem: p for p in d.glob("*.png")} for k, d in dirs.items()}
    all_stems = sorted(set().union(*[set(v) for v in stems.values()]))
    samples = []
    for stem in all_stems:
        missing = [k for k in dirs if stem not in stems[k]]
        if missing:
            raise FileNotFoundError(f"sample {stem!r} is missing in {', '.join(missing)}")
        img = _read_image(stems["images"][stem])
        inst = _read_png(stems["instance_maps"][stem]).astype(np.int64)
        cmap = _read_png(stems["class_maps"][stem]).astype(np.int64)
        if inst.shape != img.shape[:2] or cmap.shape != img.shape[:2]:
            raise AnnotationError(
                f"sample {stem!r}: image {img.shape[:2]}, instance map {inst.shape}, class map {cmap.shape}")
        samples.append(Sample(img, annotation_from_maps(inst, cmap, C, name=stem), stem, tissues.get(stem)))
    if not samples:
        raise ValueError(f"no samples under {root}")
    return Dataset(samples, class_names)


def annotation_from_maps(inst: np.ndarray, cmap: np.ndarray, num_classes: int, name: str = "") -> InstanceAnnotation:
    """Derive ``class_of`` by majority vote of the class map over each instance."""
    ids = np.unique(inst)
    ids = ids[ids > 0]
    class_of = {}
    fg = inst > 0
    if np.any(cmap[fg] == 0):
        bad = np.unique(inst[fg & (cmap == 0)])
        raise AnnotationError(f"sample {name!r}: instances {bad.tolist()[:5]} have pixels with class 0")
    if np.any(cmap[fg] > num_classes):
        raise AnnotationError(f"sample {name!r}: class map value above {num_classes}")
    for k in ids:
        votes = np.bincount(cmap[inst == k], minlength=num_classes + 1)
        winner = int(np.argmax(votes))
        if votes[winner] != votes.sum():
            warnings.warn(
                f"sample {name!r}: instance {int(k)} has mixed classes "
                f"{np.flatnonzero(votes).tolist()}; using majority class {winner}", stacklevel=3)
        class_of[int(k)] = winner
    return relabel(inst, class_of, num_classes)


def _write_sample(root: Path, sample: Sample) -> None:
    img8 = np.clip(np.rint(sample.image * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(img8, mode="RGB").save(root / "images" / f"{sample.name}.png")
    ann = sample.annotation
    if ann.num_instances > 65535:
        raise AnnotationError("more than 65535 instances do not fit a 16-bit map")
    PILImage.fromarray(ann.instance_map.astype(np.uint16)).save(root / "instance_maps" / f"{sample.name}.png")
    PILImage.fromarray(ann.class_map().astype(np.uint8), mode="L").save(root / "class_maps" / f"{sample.name}.png")


def save_dataset(dataset: Dataset, root) -> Path:
    """Write *dataset* in the directory format (atomically replacing *root*)."""
    root = Path(root)
    root.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{root.name}.", dir=root.parent))
    try:
        for sub in ("images", "instance_maps", "class_maps"):
            (tmp / sub).mkdir()
        for s in dataset:
            _write_sample(tmp, s)
        manifest = {"classes": list(dataset.class_names)}
        tissues = {s.name: s.tissue for s in dataset if s.tissue is not None}
        if tissues:
            manifest["tissues"] = tissues
        (tmp / MANIFEST).write_text(json.dumps(manifest, indent=2))
        if root.exists():
            shutil.rmtree(root)
        tmp.rename(root)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return root


# --------------------------------------------------------------------------- synthetic
@dataclass(frozen=True)
class SyntheticConfig:
    image_size: tuple = (128, 128)
    n_images: int = 8
    count_range: tuple = (6, 12)
    axis_range: tuple = (4.0, 8.0)
    num_classes: int = 2
    overlap: float = 0.0
    noise: float = 0.04
    seed: int = 0
    max_retries: int = 100

    def __post_init__(self):
        size = self.image_size
        if isinstance(size, int):
            size = (size, size)
        object.__setattr__(self, "image_size", tuple(int(s) for s in size))
        object.__setattr__(self, "count_range", tuple(int(c) for c in self.count_range))
        object.__setattr__(self, "axis_range", tuple(float(a) for a in self.axis_range))
        lo, hi = self.count_range
        if lo < 1 or hi < lo:
            raise ValueError(f"count_range must satisfy 1 <= lo <= hi, got {self.count_range}")
        amin, amax = self.axis_range
        if amin < 2 or amax < amin:
            raise ValueError(f"axis_range must satisfy 2 <= lo <= hi, got {self.axis_range}")
        if self.n_images < 1 or self.num_classes < 1:
            raise ValueError("n_images and num_classes must be >= 1")
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError("overlap must lie in [0, 1)")
        if min(self.image_size) < 32:
            raise ValueError("images must be at least 32x32")


# nucleus stain per class, roughly haematoxylin hues of different density
_CLASS_RGB = np.array([
    [0.28, 0.16, 0.45],
    [0.55, 0.22, 0.36],
    [0.20, 0.28, 0.55],
    [0.45, 0.35, 0.20],
    [0.15, 0.10, 0.20],
    [0.50, 0.15, 0.55],
], dtype=np.float64)
_BACKGROUND_RGB = np.array([0.92, 0.78, 0.86])


def _ellipse(shape, cx, cy, a, b, theta):
    H, W = shape
    r = int(math.ceil(max(a, b)))
    x0, x1 = max(int(math.floor(cx)) - r, 0), min(int(math.ceil(cx)) + r + 1, W)
    y0, y1 = max(int(math.floor(cy)) - r, 0), min(int(math.ceil(cy)) + r + 1, H)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dx, dy = xx - cx, yy - cy
    c, s = math.cos(theta), math.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    inside = u * u + v * v <= 1.0
    return (y0, y1, x0, x1), inside


def _synth_one(cfg: SyntheticConfig, rng: np.random.Generator, name: str) -> Sample:
    H, W = cfg.image_size
    C = cfg.num_classes
    inst = np.zeros((H, W), dtype=np.int32)
    target = int(rng.integers(cfg.count_range[0], cfg.count_range[1] + 1))
    amin, amax = cfg.axis_range
    class_of = {}
    placed = 0
    for _ in range(target):
        ok = False
        for _attempt in range(cfg.max_retries):
            a, b = rng.uniform(amin, amax, size=2)
            theta = rng.uniform(0, math.pi)
            cx, cy = rng.uniform(0, W - 1), rng.uniform(0, H - 1)
            (y0, y1, x0, x1), inside = _ellipse((H, W), cx, cy, a, b, theta)
            area = int(inside.sum())
            if area == 0:
                continue
            win = inst[y0:y1, x0:x1]
            hit = win[inside]
            hit = hit[hit > 0]
            if hit.size > cfg.overlap * area:
                continue
            if hit.size:
                # every instance covered partly must keep at least one pixel and lose no
                # more than the allowed fraction of its current area
                ids, lost = np.unique(hit, return_counts=True)
                cur = np.bincount(inst.ravel(), minlength=placed + 1)[ids]
                if np.any(lost >= cur) or np.any(lost > cfg.overlap * cur):
                    continue
            placed += 1
            win[inside] = placed
            class_of[placed] = int(rng.integers(1, C + 1))
            ok = True
            break
        if not ok:
            continue
    if placed < target:
        warnings.warn(f"{name}: placed {placed} of {target} nuclei after bounded retries", stacklevel=3)
    ann = relabel(inst, class_of, C)
    image = _texture(ann, rng, cfg.noise)
    return Sample(image, ann, name)


def _texture(ann: InstanceAnnotation, rng: np.random.Generator, noise: float) -> np.ndarray:
    from scipy import ndimage

    H, W = ann.shape
    bg = _BACKGROUND_RGB + rng.normal(0, 0.02, size=3)
    field_ = ndimage.gaussian_filter(rng.normal(0, 1, size=(H, W)), 6) * 4
    img = bg[None, None, :] * (1.0 + 0.03 * field_[..., None])
    if ann.num_instances:
        rgb = np.zeros((ann.num_instances + 1, 3))
        for k, c in ann.class_of.items():
            base = _CLASS_RGB[(c - 1) % len(_CLASS_RGB)]
            rgb[k] = np.clip(base * rng.uniform(0.85, 1.15), 0, 1)
        fg = ann.instance_map > 0
        img[fg] = rgb[ann.instance_map[fg]]
        ring = ndimage.binary_dilation(fg) & ~fg
        img[ring] *= 0.9
    img = ndimage.gaussian_filter(img, sigma=(0.6, 0.6, 0))
    img = img + rng.normal(0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic(cfg: SyntheticConfig, prefix: str = "synth") -> Dataset:
    """Seeded dataset of filled, darker-than-background ellipses with random classes."""
    seqs = np.random.SeedSequence(cfg.seed).spawn(cfg.n_images)
    samples = [
        _synth_one(cfg, np.random.default_rng(sq), f"{prefix}_{i:04d}") for i, sq in enumerate(seqs)
    ]
    names = [f"class{i + 1}" for i in range(cfg.num_classes)]
    return Dataset(samples, names)


# --------------------------------------------------------------------------- PanNuke
def pannuke_annotation(mask: np.ndarray, num_classes: int) -> InstanceAnnotation:
    """Collapse one ``(H, W, C+1)`` PanNuke mask stack into a single instance map.

    Pixels claimed by several class channels go to the smaller instance; equal
    sizes go to the lower channel index.
    """
    H, W, depth = mask.shape
    if depth != num_classes + 1:
        raise AnnotationError(f"mask has {depth} channels, expected {num_classes + 1}")
    ch = np.rint(mask[..., :num_classes]).astype(np.int64)
    best_area = np.full((H, W), np.iinfo(np.int64).max)
    owner_ch = np.full((H, W), -1, dtype=np.int64)
    owner_id = np.zeros((H, W), dtype=np.int64)
    for c in range(num_classes):
        m = ch[..., c]
        if not m.any():
            continue
        area = np.bincount(m.ravel())
        a = np.where(m > 0, area[m], np.iinfo(np.int64).max)
        take = (m > 0) & (a < best_area)  # strict: ties keep the lower channel
        best_area[take] = a[take]
        owner_ch[take] = c
        owner_id[take] = m[take]
    # new ids ordered by (channel, original id)
    fg = owner_ch >= 0
    base = int(owner_id.max(initial=0)) + 1
    keys = owner_ch * base + owner_id
    uniq, inv = np.unique(keys[fg], return_inverse=True)
    inst = np.zeros((H, W), dtype=np.int32)
    inst[fg] = inv + 1
    chans = uniq // base
    class_of = {i + 1: int(chans[i]) + 1 for i in range(len(uniq))}
    return InstanceAnnotation(inst, class_of, num_classes)


def import_pannuke(images_blob, masks_blob, out_root, types_blob=None, class_names=None,
                   prefix: str = "pannuke") -> Dataset:
    """Convert a PanNuke fold (``images.npy`` / ``masks.npy``) into the directory format."""
    images = np.load(images_blob, mmap_mode="r")
    masks = np.load(masks_blob, mmap_mode="r")
    if images.ndim != 4 or masks.ndim != 4 or images.shape[:3] != masks.shape[:3] or images.shape[3] != 3:
        raise ValueError(f"blob shapes do not match: images {images.shape}, masks {masks.shape}")
    C = masks.shape[3] - 1
    if C < 1:
        raise ValueError(f"masks blob must have C+1 >= 2 channels, got {masks.shape}")
    if class_names is None:
        class_names = list(PANNUKE_CLASSES) if C == len(PANNUKE_CLASSES) else [f"class{i + 1}" for i in range(C)]
    tissues = None
    if types_blob is not None:
        tissues = [str(t) for t in np.load(types_blob, allow_pickle=False)]
        if len(tissues) != len(images):
            raise ValueError(f"types blob has {len(tissues)} entries for {len(images)} images")
    samples = []
    for i in range(len(images)):
        img = np.asarray(images[i], dtype=np.float64)
        if img.max(initial=0) > 1.0:
            img = img / 255.0
        ann = pannuke_annotation(np.asarray(masks[i]), C)
        samples.append(Sample(np.clip(img, 0, 1), ann, f"{prefix}_{i:05d}", tissues[i] if tissues else None))
    save_dataset(Dataset(samples, class_names), out_root)
    return load_dataset(out_root)


def pad_to_multiple(image: np.ndarray, multiple: int = 32, fill=None) -> tuple[np.ndarray, tuple[int, int]]:
    """Pad bottom/right so both sides are multiples of *multiple*; fill defaults to the channel median."""
    H, W = image.shape[:2]
    Hp = -(-H // multiple) * multiple
    Wp = -(-W // multiple) * multiple
    return pad_to(image, Hp, Wp, fill), (H, W)


def pad_to(image: np.ndarray, Hp: int, Wp: int, fill=None) -> np.ndarray:
    H, W = image.shape[:2]
    if (H, W) == (Hp, Wp):
        return image
    if fill is None:
        fill = np.median(image.reshape(-1, image.shape[2]), axis=0)
    out = np.empty((Hp, Wp) + image.shape[2:], dtype=image.dtype)
    out[...] = np.asarray(fill, dtype=image.dtype)
    out[:H, :W] = image
    return out
