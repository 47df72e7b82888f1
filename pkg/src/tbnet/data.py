"""Synthetic pavement dataset generation, disk IO, boundary targets, class weights."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .core import (
    ClassTaxonomy,
    ConfigError,
    DataLoadError,
    Dataset,
    Sample,
    ShapeError,
)

# Annotated-area counts of the airport survey the default mix mimics,
# scaled to expected instances per image (count / 1000).
AREA_COUNTS = {
    "crack": 3586,
    "cornerfracture": 151,
    "seambroken": 557,
    "patch": 312,
    "repair": 893,
    "slab": 3040,
    "track": 3749,
    "light": 58,
}

# Fixed render palette, one color per class id (also used for mask PNGs
# and prediction overlays). Documented in the README.
PALETTE = {
    0: (0, 0, 0),
    1: (220, 20, 60),
    2: (255, 140, 0),
    3: (255, 215, 0),
    4: (60, 179, 113),
    5: (30, 144, 255),
    6: (138, 43, 226),
    7: (0, 206, 209),
    8: (255, 255, 255),
}

# Intensity offsets against the mid-gray base; negatives render darker.
_OFFSETS = {
    "crack": -0.25,
    "cornerfracture": -0.20,
    "seambroken": -0.22,
    "patch": 0.10,
    "repair": -0.10,
    "slab": -0.18,
    "light": 0.35,
}

# Painting order, bottom to top: large area classes first so small defects
# stay visible on top of them.
_Z_ORDER = ("patch", "repair", "track", "slab", "seambroken", "cornerfracture", "crack", "light")


def default_class_mix(taxonomy: ClassTaxonomy | None = None) -> dict[int, float]:
    taxonomy = taxonomy or ClassTaxonomy.default()
    mix = {}
    for name, count in AREA_COUNTS.items():
        try:
            mix[taxonomy.id_of(name)] = count / 1000.0
        except KeyError:
            continue
    return mix


@dataclass
class GeneratorSpec:
    """Parameters of the deterministic synthetic dataset generator."""

    num_samples: int
    image_size: tuple[int, int] = (128, 128)
    seed: int = 0
    class_mix: dict[int, float] = field(default_factory=default_class_mix)
    illumination: float = 0.08  # amplitude of the low-frequency gradient
    grain: float = 0.03  # std of the per-pixel texture noise


def validate_spec(spec: GeneratorSpec, taxonomy: ClassTaxonomy) -> None:
    if spec.num_samples <= 0:
        raise ConfigError("num_samples must be > 0")
    if len(spec.image_size) != 2 or any(s < 8 for s in spec.image_size):
        raise ConfigError("image_size must be two integers >= 8")
    if spec.seed < 0:
        raise ConfigError("seed must be >= 0")
    if spec.illumination < 0 or spec.grain < 0:
        raise ConfigError("noise parameters must be >= 0")
    if not spec.class_mix:
        raise ConfigError("class_mix must name at least one class")
    for cid, expected in spec.class_mix.items():
        if cid == taxonomy.background_id or not (0 <= cid < taxonomy.num_classes):
            raise ConfigError(f"class_mix key {cid} is not a valid non-background class id")
        if expected < 0:
            raise ConfigError(f"class_mix[{cid}] must be >= 0")


def extract_boundary(labels: np.ndarray) -> np.ndarray:
    """Mark every pixel whose 4-neighborhood crosses a class transition.

    A pixel is 1 iff at least one in-bounds 4-neighbor carries a different
    class id. Constant maps therefore produce an all-zero boundary.
    """
    lab = np.asarray(labels)
    if lab.ndim != 2:
        raise ShapeError("labels must be a 2-D class-id array")
    edge = np.zeros(lab.shape, dtype=bool)
    vertical = lab[1:, :] != lab[:-1, :]
    edge[1:, :] |= vertical
    edge[:-1, :] |= vertical
    horizontal = lab[:, 1:] != lab[:, :-1]
    edge[:, 1:] |= horizontal
    edge[:, :-1] |= horizontal
    return edge.astype(np.uint8)


@dataclass
class ClassWeights:
    """Inverse-frequency loss weights; ``normalized`` sums to 1."""

    raw: np.ndarray
    normalized: np.ndarray


def compute_class_weights(train: Dataset) -> ClassWeights:
    """Estimate per-class weights as total pixels over per-class pixels.

    Classes with zero pixels get raw weight 0 and are excluded from the
    normalization sum, so present-class ratios are unaffected.
    """
    if not train.samples:
        raise ConfigError("cannot compute class weights from an empty dataset")
    num_classes = train.taxonomy.num_classes
    counts = np.zeros(num_classes, dtype=np.int64)
    for sample in train.samples:
        counts += np.bincount(sample.labels.ravel(), minlength=num_classes)
    total = counts.sum()
    raw = np.where(counts > 0, total / np.maximum(counts, 1), 0.0)
    normalized = raw / raw.sum()
    return ClassWeights(raw=raw, normalized=normalized)


# ---------------------------------------------------------------------------
# Synthetic rendering


def _rng_for_sample(seed: int, index: int) -> np.random.Generator:
    # Per-sample stream so samples can be generated independently.
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _instance_mask(size: tuple[int, int], draw_fn) -> np.ndarray:
    height, width = size
    canvas = Image.new("L", (width, height), 0)
    draw_fn(ImageDraw.Draw(canvas))
    return np.asarray(canvas, dtype=bool)


def _polyline_points(rng, width, height):
    diag = min(width, height)
    x = rng.uniform(0, width)
    y = rng.uniform(0, height)
    angle = rng.uniform(0, 2 * math.pi)
    points = [(x, y)]
    for _ in range(int(rng.integers(3, 8))):
        angle += rng.uniform(-0.7, 0.7)
        step = rng.uniform(0.05, 0.18) * diag
        x += math.cos(angle) * step
        y += math.sin(angle) * step
        points.append((x, y))
    return points


def _grid_lines(rng, width, height, n_lines):
    lines = []
    for _ in range(n_lines):
        if rng.random() < 0.5:
            lines.append(("v", float(rng.uniform(0.1, 0.9) * width), int(rng.integers(1, 3))))
        else:
            lines.append(("h", float(rng.uniform(0.1, 0.9) * height), int(rng.integers(1, 3))))
    return lines


def _line_point(rng, line, width, height):
    orient, pos, _ = line
    if orient == "v":
        return pos, rng.uniform(0, height)
    return rng.uniform(0, width), pos


def _grid_corners(lines, width, height):
    xs = [pos for orient, pos, _ in lines if orient == "v"] + [0.0, float(width - 1)]
    ys = [pos for orient, pos, _ in lines if orient == "h"] + [0.0, float(height - 1)]
    return [(x, y) for x in xs for y in ys]


def _render_instance(name, rng, size, lines):
    """Rasterize one instance of class ``name``; returns (mask, intensity offset)."""
    height, width = size
    diag = min(width, height)
    offset = _OFFSETS.get(name, 0.0)

    if name == "crack":
        points = _polyline_points(rng, width, height)
        stroke = int(rng.integers(1, 4))
        mask = _instance_mask(size, lambda d: d.line(points, fill=1, width=stroke))
    elif name == "slab":
        orient, pos, stroke = lines[int(rng.integers(0, len(lines)))]
        if orient == "v":
            box = [pos, 0, pos + (stroke - 1), height]
        else:
            box = [0, pos, width, pos + (stroke - 1)]
        mask = _instance_mask(size, lambda d: d.rectangle(box, fill=1))
    elif name == "cornerfracture":
        corners = _grid_corners(lines, width, height)
        cx, cy = corners[int(rng.integers(0, len(corners)))]
        sx = 1 if cx < width / 2 else -1
        sy = 1 if cy < height / 2 else -1
        leg_x = rng.uniform(0.04, 0.10) * diag
        leg_y = rng.uniform(0.04, 0.10) * diag
        tri = [(cx, cy), (cx + sx * leg_x, cy), (cx, cy + sy * leg_y)]
        mask = _instance_mask(size, lambda d: d.polygon(tri, fill=1))
    elif name == "seambroken":
        x, y = _line_point(rng, lines[int(rng.integers(0, len(lines)))], width, height)
        rx = rng.uniform(0.02, 0.05) * diag
        ry = rng.uniform(0.02, 0.05) * diag
        mask = _instance_mask(size, lambda d: d.ellipse([x - rx, y - ry, x + rx, y + ry], fill=1))
    elif name == "patch":
        w = rng.uniform(0.10, 0.25) * diag
        h = rng.uniform(0.10, 0.25) * diag
        x = rng.uniform(0, width - w)
        y = rng.uniform(0, height - h)
        mask = _instance_mask(size, lambda d: d.rectangle([x, y, x + w, y + h], fill=1))
    elif name == "repair":
        thick = rng.uniform(0.04, 0.10) * diag
        if rng.random() < 0.5:
            length = rng.uniform(0.4, 0.9) * width
            x = rng.uniform(0, width - length)
            y = rng.uniform(0, height - thick)
            box = [x, y, x + length, y + thick]
        else:
            length = rng.uniform(0.4, 0.9) * height
            x = rng.uniform(0, width - thick)
            y = rng.uniform(0, height - length)
            box = [x, y, x + thick, y + length]
        mask = _instance_mask(size, lambda d: d.rectangle(box, fill=1))
    elif name == "track":
        kind = int(rng.integers(0, 3))
        if kind == 0:  # ring marking
            r = rng.uniform(0.05, 0.15) * diag
            x = rng.uniform(r, width - r)
            y = rng.uniform(r, height - r)
            stroke = int(rng.integers(2, 5))
            mask = _instance_mask(
                size, lambda d: d.ellipse([x - r, y - r, x + r, y + r], outline=1, width=stroke)
            )
            offset = 0.18
        elif kind == 1:  # straight line band
            stroke = max(2, int(rng.uniform(0.02, 0.05) * diag))
            if rng.random() < 0.5:
                y = rng.uniform(0, height)
                box = [(0, y), (width, y + rng.uniform(-0.2, 0.2) * height)]
            else:
                x = rng.uniform(0, width)
                box = [(x, 0), (x + rng.uniform(-0.2, 0.2) * width, height)]
            mask = _instance_mask(size, lambda d: d.line(box, fill=1, width=stroke))
            offset = 0.18
        else:  # low-contrast water/oil stain
            rx = rng.uniform(0.05, 0.12) * diag
            ry = rng.uniform(0.05, 0.12) * diag
            x = rng.uniform(0, width)
            y = rng.uniform(0, height)
            mask = _instance_mask(
                size, lambda d: d.ellipse([x - rx, y - ry, x + rx, y + ry], fill=1)
            )
            offset = -0.07
    elif name == "light":
        r = max(2.0, rng.uniform(0.015, 0.04) * diag)
        x = rng.uniform(r, width - r)
        y = rng.uniform(r, height - r)
        mask = _instance_mask(size, lambda d: d.ellipse([x - r, y - r, x + r, y + r], fill=1))
    else:
        raise ConfigError(f"no shape grammar for class {name!r}")

    offset *= 1 + rng.uniform(-0.15, 0.15)
    return mask, offset


def generate_sample(spec: GeneratorSpec, taxonomy: ClassTaxonomy, index: int, split: str) -> Sample:
    rng = _rng_for_sample(spec.seed, index)
    height, width = spec.image_size
    size = (height, width)

    # Instance counts are drawn in ascending class-id order so the stream of
    # random draws is stable for a given mix.
    counts = {cid: int(rng.poisson(expected)) for cid, expected in sorted(spec.class_mix.items())}

    slab_id = None
    try:
        slab_id = taxonomy.id_of("slab")
    except KeyError:
        pass
    n_slab = counts.get(slab_id, 0) if slab_id is not None else 0
    lines = _grid_lines(rng, width, height, max(n_slab, 2))
    slab_lines = lines[:n_slab]

    labels = np.zeros(size, dtype=np.int64)
    offsets = np.zeros(size, dtype=np.float64)
    drew_any = False
    for name in _Z_ORDER:
        try:
            cid = taxonomy.id_of(name)
        except KeyError:
            continue
        if cid not in counts:
            continue
        n = counts[cid]
        for _ in range(n):
            shape_lines = slab_lines if (name == "slab" and slab_lines) else lines
            mask, offset = _render_instance(name, rng, size, shape_lines)
            if mask.any():
                labels[mask] = cid
                offsets[mask] = offset
                drew_any = True

    if not drew_any:
        # Guarantee at least one non-background region.
        cid = min(spec.class_mix)
        mask, offset = _render_instance(taxonomy.name_of(cid), rng, size, lines)
        while not mask.any():
            mask, offset = _render_instance(taxonomy.name_of(cid), rng, size, lines)
        labels[mask] = cid
        offsets[mask] = offset

    ys, xs = np.mgrid[0:height, 0:width]
    gx, gy = rng.uniform(-1, 1, size=2)
    plane = gx * (xs / max(width - 1, 1) - 0.5) + gy * (ys / max(height - 1, 1) - 0.5)
    image = 0.5 + spec.illumination * plane + offsets
    image += rng.normal(0.0, spec.grain, size=size)
    image = np.clip(image, 0.0, 1.0)
    # Quantize to the 8-bit grid so saving to PNG round-trips exactly.
    image = (np.rint(image * 255.0) / 255.0).astype(np.float32)

    return Sample(
        image=image,
        labels=labels,
        id=f"{split}_{index:05d}",
        boundary=extract_boundary(labels),
    )


def generate_dataset(
    spec: GeneratorSpec,
    taxonomy: ClassTaxonomy | None = None,
    split: str = "train",
) -> Dataset:
    """Deterministically generate ``spec.num_samples`` synthetic samples."""
    taxonomy = taxonomy or ClassTaxonomy.default()
    validate_spec(spec, taxonomy)
    samples = [generate_sample(spec, taxonomy, i, split) for i in range(spec.num_samples)]
    return Dataset(samples=samples, split=split, taxonomy=taxonomy)


# ---------------------------------------------------------------------------
# Disk layout: <root>/<split>/{images,masks,boundaries}/<id>.png + taxonomy.txt


def palette_bytes(taxonomy: ClassTaxonomy) -> bytes:
    table = bytearray(768)
    for cid in range(taxonomy.num_classes):
        r, g, b = PALETTE.get(cid, (255, 0, 255))
        table[3 * cid : 3 * cid + 3] = bytes((r, g, b))
    return bytes(table)


def save_dataset(dataset: Dataset, root: str | os.PathLike) -> Path:
    root = Path(root)
    base = root / dataset.split
    for sub in ("images", "masks", "boundaries"):
        (base / sub).mkdir(parents=True, exist_ok=True)
    palette = palette_bytes(dataset.taxonomy)
    for sample in dataset.samples:
        img = Image.fromarray(np.rint(sample.image * 255.0).astype(np.uint8), mode="L")
        img.save(base / "images" / f"{sample.id}.png")
        mask = Image.fromarray(sample.labels.astype(np.uint8), mode="P")
        mask.putpalette(palette)
        mask.save(base / "masks" / f"{sample.id}.png")
        boundary = sample.boundary
        if boundary is None:
            boundary = extract_boundary(sample.labels)
        Image.fromarray((boundary * 255).astype(np.uint8), mode="L").save(
            base / "boundaries" / f"{sample.id}.png"
        )
    (root / "taxonomy.txt").write_text(dataset.taxonomy.to_text())
    return root


def load_dataset(
    root: str | os.PathLike,
    split: str,
    taxonomy: ClassTaxonomy | None = None,
) -> Dataset:
    """Load a split from disk, pairing images with masks by filename stem."""
    root = Path(root)
    if taxonomy is None:
        tax_file = root / "taxonomy.txt"
        taxonomy = (
            ClassTaxonomy.from_text(tax_file.read_text())
            if tax_file.exists()
            else ClassTaxonomy.default()
        )
    image_dir = root / split / "images"
    mask_dir = root / split / "masks"
    boundary_dir = root / split / "boundaries"
    if not image_dir.is_dir():
        raise DataLoadError(f"no samples found: {image_dir} does not exist")
    samples = []
    for image_path in sorted(image_dir.glob("*.png")):
        stem = image_path.stem
        mask_path = mask_dir / f"{stem}.png"
        if not mask_path.exists():
            raise DataLoadError(f"missing mask for image stem '{stem}' in {mask_dir}")
        image = np.asarray(Image.open(image_path).convert("L"), dtype=np.float32) / 255.0
        labels = np.asarray(Image.open(mask_path), dtype=np.int64)
        boundary_path = boundary_dir / f"{stem}.png"
        if boundary_path.exists():
            boundary = (np.asarray(Image.open(boundary_path)) > 127).astype(np.uint8)
        else:
            boundary = extract_boundary(labels)
        sample = Sample(image=image, labels=labels, id=stem, boundary=boundary)
        sample.validate(taxonomy)
        samples.append(sample)
    if not samples:
        raise DataLoadError(f"no samples found in {image_dir}")
    return Dataset(samples=samples, split=split, taxonomy=taxonomy)


def resize_sample(sample: Sample, size: tuple[int, int]) -> Sample:
    """Resize to ``size``: bilinear for the image, nearest for labels.

    The boundary target is recomputed from the resized labels so it stays
    consistent with the transition rule.
    """
    height, width = size
    if sample.image.shape == (height, width):
        return sample
    import torch  # local import keeps data generation torch-free

    img = torch.from_numpy(sample.image)[None, None]
    img = torch.nn.functional.interpolate(
        img, size=(height, width), mode="bilinear", align_corners=False
    )[0, 0].numpy()
    src_h, src_w = sample.labels.shape
    rows = np.minimum((np.arange(height) + 0.5) * src_h / height, src_h - 1).astype(np.int64)
    cols = np.minimum((np.arange(width) + 0.5) * src_w / width, src_w - 1).astype(np.int64)
    labels = sample.labels[rows[:, None], cols[None, :]]
    return Sample(
        image=img.astype(np.float32),
        labels=labels,
        id=sample.id,
        boundary=extract_boundary(labels),
    )


def class_pixel_stats(dataset: Dataset) -> np.ndarray:
    """Pixel count per class id over the whole dataset."""
    counts = np.zeros(dataset.taxonomy.num_classes, dtype=np.int64)
    for sample in dataset.samples:
        counts += np.bincount(sample.labels.ravel(), minlength=counts.size)
    return counts
