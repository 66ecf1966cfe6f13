"""Corpus ingestion, stratified splits, image pyramids, synthetic data, patches.

Images are float32 RGB arrays in [0, 1], channel-first (3, h, w). Stored
corpora are PNG files, one per (image, scale), where each scale names the
long-side length in pixels: resizing preserves aspect ratio (no distortion,
no padding), so patch sampling requires crop <= short side.

A manifest is a CSV of `id,class_label,split,scale,path` rows plus a
key-value sidecar (same stem, `.meta` suffix) holding scales, class names,
per-dataset channel means, and free-form extras such as the synthetic
generator's cue parameters or optional physical-resolution notes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .util import split_rng

SPLITS = ("train", "validation", "test")


class DataError(Exception):
    """Corpus, manifest, or sampling problem."""


# ---------------------------------------------------------------------------
# Image I/O and resizing
# ---------------------------------------------------------------------------

def load_image(path) -> np.ndarray:
    """Read a PNG/JPEG as float32 RGB (3, h, w) in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise DataError(f"unreadable image {path}: {exc}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_image(pixels: np.ndarray, path) -> None:
    """Write float32 RGB (3, h, w) in [0, 1] as an 8-bit PNG."""
    u8 = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(u8.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def _bilinear_once(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Single bilinear resampling step (pixel-center aligned, edge-clamped)."""
    _, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).astype(np.float32)[:, None]
    fx = (xs - x0).astype(np.float32)
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bot * fy


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Pyramid-style bilinear resize.

    Downsampling proceeds by successive near-halvings (an exact halving is
    a 2x2 box average under pixel-center bilinear), then one final bilinear
    step. This keeps the filter support matched to the reduction factor, so
    fine detail is averaged away rather than aliased.
    """
    out = img
    h, w = img.shape[1:]
    while h > 2 * out_h or w > 2 * out_w:
        h = max(out_h, (h + 1) // 2)
        w = max(out_w, (w + 1) // 2)
        out = _bilinear_once(out, h, w)
    return _bilinear_once(out, out_h, out_w)


def resize_long_side(img: np.ndarray, target: int) -> np.ndarray:
    """Resize so the long side equals `target`, preserving aspect ratio."""
    _, h, w = img.shape
    if h >= w:
        out_h, out_w = target, max(1, round(w * target / h))
    else:
        out_h, out_w = max(1, round(h * target / w)), target
    return bilinear_resize(img, out_h, out_w)


def build_pyramid(source, scales, out_dir, stem: str,
                  allow_upsample: bool = False) -> dict[int, Path]:
    """Write one resized PNG per scale; returns scale -> written path.

    `source` is an array or an image path. The source long side must cover
    the largest scale; smaller sources are refused unless allow_upsample
    (upsampling invents no detail, so it is opt-in).
    """
    img = source if isinstance(source, np.ndarray) else load_image(source)
    long_side = max(img.shape[1:])
    scales = sorted(int(s) for s in scales)
    if long_side < scales[-1] and not allow_upsample:
        raise DataError(
            f"source {stem} long side {long_side} is smaller than the largest "
            f"scale {scales[-1]}; pass allow_upsample to permit upsampling")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for scale in scales:
        path = out_dir / f"{stem}_{scale}.png"
        save_image(resize_long_side(img, scale), path)
        paths[scale] = path
    return paths


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRecord:
    id: str
    class_label: int
    split: str
    paths: dict[int, str]  # scale -> path relative to the manifest directory


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    scales: tuple[int, ...]
    num_classes: int
    class_names: tuple[str, ...]
    channel_means: tuple[float, float, float]
    base_dir: Path
    extras: dict[str, str] = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.scales = tuple(int(s) for s in self.scales)
        for rec in self.records:
            if rec.split not in SPLITS:
                raise DataError(f"record {rec.id}: unknown split {rec.split!r}")
            if not 0 <= rec.class_label < self.num_classes:
                raise DataError(f"record {rec.id}: label {rec.class_label} out of range")
            missing = [s for s in self.scales if s not in rec.paths]
            if missing:
                raise DataError(f"record {rec.id}: no path for scales {missing}")

    def split_records(self, split: str) -> list[ManifestRecord]:
        if split not in SPLITS:
            raise DataError(f"unknown split {split!r}")
        return [r for r in self.records if r.split == split]

    def records_by_class(self, split: str) -> list[list[ManifestRecord]]:
        by_class = [[] for _ in range(self.num_classes)]
        for rec in self.split_records(split):
            by_class[rec.class_label].append(rec)
        return by_class

    def image_path(self, rec: ManifestRecord, scale: int) -> Path:
        return self.base_dir / rec.paths[int(scale)]

    def load_pixels(self, rec: ManifestRecord, scale: int) -> np.ndarray:
        """Decode a record's image at one scale, memoized per manifest."""
        key = rec.paths[int(scale)]
        if key not in self._cache:
            self._cache[key] = load_image(self.base_dir / key)
        return self._cache[key]


def save_manifest(manifest: DatasetManifest, csv_path) -> None:
    csv_path = Path(csv_path)
    lines = ["id,class_label,split,scale,path"]
    for rec in manifest.records:
        for scale in manifest.scales:
            lines.append(
                f"{rec.id},{rec.class_label},{rec.split},{scale},{rec.paths[scale]}")
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    meta = ["fcna-manifest 1"]
    meta.append("scales=" + ",".join(str(s) for s in manifest.scales))
    meta.append(f"num_classes={manifest.num_classes}")
    meta.append("class_names=" + ",".join(manifest.class_names))
    meta.append("channel_means=" + ",".join(repr(m) for m in manifest.channel_means))
    for key in sorted(manifest.extras):
        meta.append(f"{key}={manifest.extras[key]}")
    csv_path.with_suffix(".meta").write_text("\n".join(meta) + "\n", encoding="utf-8")


def load_manifest(csv_path) -> DatasetManifest:
    csv_path = Path(csv_path)
    if not csv_path.exists():
        raise DataError(f"manifest not found: {csv_path}")
    meta_path = csv_path.with_suffix(".meta")
    if not meta_path.exists():
        raise DataError(f"manifest sidecar not found: {meta_path}")

    meta_lines = meta_path.read_text(encoding="utf-8").splitlines()
    if not meta_lines or not meta_lines[0].startswith("fcna-manifest"):
        raise DataError(f"{meta_path}: missing fcna-manifest header")
    fields: dict[str, str] = {}
    for ln in meta_lines[1:]:
        if ln.strip():
            key, value = ln.split("=", 1)
            fields[key] = value
    scales = tuple(int(s) for s in fields.pop("scales").split(","))
    num_classes = int(fields.pop("num_classes"))
    class_names = tuple(fields.pop("class_names").split(","))
    channel_means = tuple(float(v) for v in fields.pop("channel_means").split(","))

    by_id: dict[str, dict] = {}
    order: list[str] = []
    lines = csv_path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "id,class_label,split,scale,path":
        raise DataError(f"{csv_path}: missing manifest CSV header")
    for ln in lines[1:]:
        if not ln.strip():
            continue
        rec_id, label, split, scale, path = ln.split(",", 4)
        if rec_id not in by_id:
            by_id[rec_id] = {"label": int(label), "split": split, "paths": {}}
            order.append(rec_id)
        by_id[rec_id]["paths"][int(scale)] = path
    records = [
        ManifestRecord(id=rid, class_label=by_id[rid]["label"],
                       split=by_id[rid]["split"], paths=by_id[rid]["paths"])
        for rid in order
    ]
    return DatasetManifest(
        records=records, scales=scales, num_classes=num_classes,
        class_names=class_names, channel_means=channel_means,
        base_dir=csv_path.parent, extras=fields)


def split_counts(n: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    """Largest-remainder allocation of n items to train/validation/test."""
    if abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise DataError(f"split ratios must be non-negative and sum to 1: {ratios}")
    exact = [r * n for r in ratios]
    counts = [math.floor(e) for e in exact]
    leftover = n - sum(counts)
    by_remainder = sorted(range(3), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in by_remainder[:leftover]:
        counts[i] += 1
    return tuple(counts)


def _assign_splits(n: int, counts: tuple[int, int, int],
                   rng: np.random.Generator) -> list[str]:
    order = rng.permutation(n)
    assignment = [""] * n
    start = 0
    for split, count in zip(SPLITS, counts):
        for idx in order[start:start + count]:
            assignment[idx] = split
        start += count
    return assignment


def compute_channel_means(images) -> tuple[float, float, float]:
    """Per-channel mean over an iterable of (3, h, w) arrays."""
    total = np.zeros(3, dtype=np.float64)
    count = 0
    for img in images:
        total += img.reshape(3, -1).mean(axis=1)
        count += 1
    if count == 0:
        raise DataError("cannot compute channel means over zero images")
    return tuple(float(v) for v in total / count)


def apply_channel_means(batch: np.ndarray, means) -> np.ndarray:
    """Subtract dataset channel means from a (n, 3, h, w) batch."""
    m = np.asarray(means, dtype=batch.dtype).reshape(1, 3, 1, 1)
    return batch - m


IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def build_manifest(image_dir, out_dir, scales,
                   split_ratios=(0.7, 0.1, 0.2), seed: int = 0,
                   min_per_class: int = 1,
                   allow_upsample: bool = False) -> DatasetManifest:
    """Ingest a directory of per-class image folders into a manifest.

    Each subdirectory of image_dir is one class; its images are pyramided
    into out_dir/images and split per class by `split_ratios` (stratified,
    deterministic for a fixed seed). Classes with fewer than min_per_class
    images are rejected outright.
    """
    image_dir = Path(image_dir)
    out_dir = Path(out_dir)
    class_dirs = sorted(p for p in image_dir.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"no class subdirectories under {image_dir}")
    class_names = tuple(p.name for p in class_dirs)
    scales = tuple(sorted(int(s) for s in scales))

    records: list[ManifestRecord] = []
    for label, class_dir in enumerate(class_dirs):
        files = sorted(
            p for p in class_dir.iterdir()
            if p.suffix.lower() in IMAGE_SUFFIXES)
        if len(files) < min_per_class:
            raise DataError(
                f"class {class_dir.name!r} has {len(files)} images, below the "
                f"minimum of {min_per_class}")
        counts = split_counts(len(files), split_ratios)
        assignment = _assign_splits(
            len(files), counts, split_rng(seed, "split", class_dir.name))
        for src, split in zip(files, assignment):
            stem = src.stem
            rec_id = f"{class_dir.name}/{stem}"
            paths = build_pyramid(
                src, scales, out_dir / "images" / class_dir.name, stem,
                allow_upsample=allow_upsample)
            rel = {s: str(p.relative_to(out_dir)) for s, p in paths.items()}
            records.append(ManifestRecord(
                id=rec_id, class_label=label, split=split, paths=rel))

    manifest = DatasetManifest(
        records=records, scales=scales, num_classes=len(class_names),
        class_names=class_names, channel_means=(0.0, 0.0, 0.0),
        base_dir=out_dir,
        extras={"min_per_class": str(min_per_class), "seed": str(seed)})
    manifest.channel_means = _train_channel_means(manifest)
    save_manifest(manifest, out_dir / "manifest.csv")
    return manifest


def _train_channel_means(manifest: DatasetManifest) -> tuple[float, float, float]:
    # computed at the smallest scale: cheap, and means are scale-stable
    smallest = manifest.scales[0]
    return compute_channel_means(
        manifest.load_pixels(rec, smallest)
        for rec in manifest.split_records("train"))


# ---------------------------------------------------------------------------
# Synthetic multi-scale corpus
# ---------------------------------------------------------------------------

PAPER_RGB = (0.87, 0.85, 0.80)
INK = 0.25
SHAPE_INK = 0.30
COARSE_SHAPES = ("disk", "frame", "cross", "bars")


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    img = np.empty((3, size, size), dtype=np.float32)
    for c, base in enumerate(PAPER_RGB):
        img[c] = base + rng.normal(0.0, 0.015, size=(size, size))
    return np.clip(img, 0.0, 1.0)


def _hatch_mask(h: int, w: int, angle_deg: float, rng: np.random.Generator,
                gap: float, thickness: float = 1.0) -> np.ndarray:
    """Dashed parallel strokes at the given angle, ~thickness px wide."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    t = math.radians(angle_deg)
    u = math.cos(t) * xx + math.sin(t) * yy  # along-stroke
    v = -math.sin(t) * xx + math.cos(t) * yy  # across strokes
    idx = np.floor(v / gap).astype(np.int64)
    idx -= idx.min()
    n_strokes = int(idx.max()) + 1
    dash, dash_gap = 16.0, 5.0
    phase = rng.uniform(0.0, dash + dash_gap, size=n_strokes).astype(np.float32)
    on_stroke = (v - np.floor(v / gap) * gap) < thickness
    on_dash = ((u + phase[idx]) % (dash + dash_gap)) < dash
    return on_stroke & on_dash


def _apply_ink(img: np.ndarray, mask: np.ndarray, ink: float,
               rng: np.random.Generator) -> None:
    values = ink + rng.normal(0.0, 0.03, size=int(mask.sum())).astype(np.float32)
    img[:, mask] = np.clip(values, 0.0, 1.0)


def _shape_mask(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    if kind == "disk":
        r = size * rng.uniform(0.18, 0.28)
        cy = rng.uniform(r + 2, size - r - 2)
        cx = rng.uniform(r + 2, size - r - 2)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "frame":
        side = size * rng.uniform(0.42, 0.62)
        th = size * 0.06
        top = rng.uniform(2, size - side - 2)
        left = rng.uniform(2, size - side - 2)
        outer = ((yy >= top) & (yy < top + side) & (xx >= left) & (xx < left + side))
        inner = ((yy >= top + th) & (yy < top + side - th)
                 & (xx >= left + th) & (xx < left + side - th))
        return outer & ~inner
    if kind == "cross":
        arm = size * 0.09
        half = size * rng.uniform(0.25, 0.35)
        cy = rng.uniform(half + 2, size - half - 2)
        cx = rng.uniform(half + 2, size - half - 2)
        vert = (np.abs(xx - cx) < arm) & (np.abs(yy - cy) < half)
        horz = (np.abs(yy - cy) < arm) & (np.abs(xx - cx) < half)
        return vert | horz
    if kind == "bars":
        th = size * 0.12
        y1 = rng.uniform(2, size / 2 - th - 2)
        y2 = rng.uniform(size / 2 + 2, size - th - 2)
        return (((yy >= y1) & (yy < y1 + th)) | ((yy >= y2) & (yy < y2 + th)))
    raise DataError(f"unknown coarse shape {kind!r}")


def fine_cue_angles(num_fine: int) -> list[float]:
    return [180.0 * i / num_fine for i in range(num_fine)]


def _hatch_gap(size: int) -> float:
    return max(3.0, size / 64.0)


def _render_fine(rng: np.random.Generator, size: int, angle: float):
    """Texture-cue image: class-specific hatching inside a random rectangle."""
    img = _background(rng, size)
    rh = int(size * rng.uniform(0.55, 0.75))
    rw = int(size * rng.uniform(0.55, 0.75))
    top = int(rng.integers(0, size - rh + 1))
    left = int(rng.integers(0, size - rw + 1))
    mask = _hatch_mask(rh, rw, angle, rng, gap=_hatch_gap(size))
    _apply_ink(img[:, top:top + rh, left:left + rw], mask, INK, rng)
    return img, (top, left, rh, rw)


def _render_coarse(rng: np.random.Generator, size: int, kind: str) -> np.ndarray:
    """Composition-cue image: distractor hatching under a class shape."""
    img = _background(rng, size)
    for _ in range(2):
        angle = rng.uniform(0.0, 180.0)
        mask = _hatch_mask(size, size, angle, rng, gap=2.0 * _hatch_gap(size))
        _apply_ink(img, mask, INK, rng)
    _apply_ink(img, _shape_mask(kind, size, rng), SHAPE_INK, rng)
    return img


def texture_orientation_stat(img: np.ndarray) -> float:
    """Horizontal minus vertical gradient energy of the grayscale image.

    The documented texture statistic: near +-0.0x for oriented hatching at
    full resolution (sign follows the orientation), near zero once
    downsampling has destroyed the strokes.
    """
    gray = img.mean(axis=0)
    ex = float(np.abs(np.diff(gray, axis=1)).mean())
    ey = float(np.abs(np.diff(gray, axis=0)).mean())
    return ex - ey


def synth_generate(num_classes: int, per_class: int, scales, seed: int,
                   out_dir, split_counts_per_class: tuple[int, int, int] | None = None,
                   split_ratios=(0.7, 0.1, 0.2)) -> DatasetManifest:
    """Generate the two-regime synthetic corpus and its manifest.

    The first half of the classes are fine-cue: they differ from one another
    only in the orientation of 1-px hatching planted inside a random
    rectangle, a cue that survives at the largest scale and averages away at
    the smallest. The second half are coarse-cue: they differ only in a
    large shape (disk, frame, ...) drawn over orientation-balanced distractor
    hatching, a cue visible at every scale. Cue parameters, including each
    fine image's planted region, are logged in the manifest sidecar.

    Images are rendered once at the largest scale and pyramided down. With
    split_counts_per_class=(train, val, test) the per-class split is fixed
    explicitly (per_class is ignored); otherwise per_class images are split
    by split_ratios.
    """
    if num_classes < 2 or num_classes % 2 != 0:
        raise DataError("num_classes must be even (half fine-cue, half coarse-cue)")
    scales = tuple(sorted(int(s) for s in scales))
    out_dir = Path(out_dir)
    max_scale = scales[-1]
    num_fine = num_classes // 2
    angles = fine_cue_angles(num_fine)

    if split_counts_per_class is not None:
        counts = tuple(int(c) for c in split_counts_per_class)
        per_class = sum(counts)
    else:
        counts = split_counts(per_class, split_ratios)

    class_names = tuple(
        [f"fine-hatch{int(a)}" for a in angles]
        + [f"coarse-{COARSE_SHAPES[i % len(COARSE_SHAPES)]}"
           for i in range(num_classes - num_fine)])

    extras: dict[str, str] = {"seed": str(seed), "generator": "synthetic-v1"}
    for label in range(num_classes):
        if label < num_fine:
            extras[f"cue.class.{label}"] = f"fine hatch_angle_deg={angles[label]:g}"
        else:
            kind = COARSE_SHAPES[(label - num_fine) % len(COARSE_SHAPES)]
            extras[f"cue.class.{label}"] = f"coarse shape={kind}"

    records: list[ManifestRecord] = []
    for label, class_name in enumerate(class_names):
        assignment = _assign_splits(
            per_class, counts, split_rng(seed, "split", class_name))
        for i in range(per_class):
            rng = split_rng(seed, "synth", label, i)
            if label < num_fine:
                img, region = _render_fine(rng, max_scale, angles[label])
            else:
                kind = COARSE_SHAPES[(label - num_fine) % len(COARSE_SHAPES)]
                img = _render_coarse(rng, max_scale, kind)
                region = None
            rec_id = f"{class_name}/{i:04d}"
            paths = build_pyramid(
                img, scales, out_dir / "images" / class_name, f"{i:04d}")
            rel = {s: str(p.relative_to(out_dir)) for s, p in paths.items()}
            records.append(ManifestRecord(
                id=rec_id, class_label=label, split=assignment[i], paths=rel))
            if region is not None:
                extras[f"cue.region.{rec_id}"] = ",".join(str(v) for v in region)

    manifest = DatasetManifest(
        records=records, scales=scales, num_classes=num_classes,
        class_names=class_names, channel_means=(0.0, 0.0, 0.0),
        base_dir=out_dir, extras=extras)
    manifest.channel_means = _train_channel_means(manifest)
    save_manifest(manifest, out_dir / "manifest.csv")
    return manifest


def cue_region(manifest: DatasetManifest, rec_id: str,
               scale: int) -> tuple[int, int, int, int]:
    """Planted cue rectangle of a fine-cue image, scaled to `scale` coords."""
    raw = manifest.extras.get(f"cue.region.{rec_id}")
    if raw is None:
        raise DataError(f"record {rec_id} has no planted cue region")
    top, left, rh, rw = (int(v) for v in raw.split(","))
    f = scale / manifest.scales[-1]
    return (int(top * f), int(left * f),
            max(1, int(round(rh * f))), max(1, int(round(rw * f))))


# ---------------------------------------------------------------------------
# Patch sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Patch:
    pixels: np.ndarray  # (3, crop, crop) in [0, 1]
    class_label: int
    source_id: str
    scale: int
    top_left: tuple[int, int]


def sample_patch(manifest: DatasetManifest, split: str, scale: int, crop: int,
                 rng: np.random.Generator, class_uniform: bool = True) -> Patch:
    """Draw one random training crop.

    Chooses a class uniformly (or an image uniformly over the split when
    class_uniform is false), then an image of that class uniformly, then a
    top-left position uniformly over valid placements. The rng is consumed
    in that fixed order, so a seeded stream reproduces the same patches.
    """
    if class_uniform:
        by_class = manifest.records_by_class(split)
        label = int(rng.integers(0, manifest.num_classes))
        pool = by_class[label]
        if not pool:
            raise DataError(f"split {split!r} has no records for class {label}")
        rec = pool[int(rng.integers(0, len(pool)))]
    else:
        pool = manifest.split_records(split)
        if not pool:
            raise DataError(f"split {split!r} is empty")
        rec = pool[int(rng.integers(0, len(pool)))]
    pixels = manifest.load_pixels(rec, scale)
    h, w = pixels.shape[1:]
    if h < crop or w < crop:
        raise DataError(
            f"record {rec.id} at scale {scale} is {h}x{w}, smaller than the "
            f"{crop}-pixel crop")
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    return Patch(
        pixels=pixels[:, top:top + crop, left:left + crop].copy(),
        class_label=rec.class_label, source_id=rec.id, scale=int(scale),
        top_left=(top, left))
