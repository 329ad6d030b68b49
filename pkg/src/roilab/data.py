"""The "context-shapes" dataset: labels that need both the ROI and its surroundings.

Every image contains one foreground shape whose pixel raster *is* the ROI
mask.  The label combines the shape type with a context cue that lives only
in the background colour field::

    label = shape_index * num_contexts + context_index

Nothing inside the ROI depends on the context, so a model that only ever
sees ROI pixels (background blackout) cannot beat ``1 / num_contexts`` on
the context factor.  A neutral grey band ``halo_width`` pixels wide
separates the shape from the coloured background, which keeps a 3x3 stem
convolution evaluated inside the ROI from seeing the context as well.

Optional distractor shapes are painted on the background away from the
ROI; with them present the mask is the only way to tell which shape is
being asked about.

On disk a dataset is a directory::

    config.json        {"synth": <SynthConfig fields>, "seed": <int>}
    manifest.jsonl     one {"id", "label", "roi_area", "split", "image", "mask"} per line
    images/<id>.ppm    binary PPM (P6, 8-bit RGB)
    masks/<id>.pgm     binary PGM (P5, values 0 or 255)
"""
from __future__ import annotations

import colorsys
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

SHAPES = ("disk", "square", "triangle", "cross", "diamond", "bar")


class DatasetFormatError(ValueError):
    """A dataset directory is missing, incomplete or corrupt."""


class MissingManifestError(DatasetFormatError):
    pass


@dataclass
class SynthConfig:
    image_size: int = 64
    num_shapes: int = 4
    num_contexts: int = 2
    shape_scale_range: Tuple[float, float] = (0.001, 0.3)
    samples_per_class: int = 1000
    noise_std: float = 0.05
    halo_width: int = 1
    num_distractors: int = 0
    test_fraction: float = 0.2

    def __post_init__(self):
        self.shape_scale_range = tuple(float(v) for v in self.shape_scale_range)
        self.validate()

    @property
    def num_classes(self) -> int:
        return self.num_shapes * self.num_contexts

    def validate(self) -> None:
        lo, hi = self.shape_scale_range
        problems = []
        if not 0 < lo <= hi <= 0.5:
            problems.append(f"shape_scale_range={self.shape_scale_range} must satisfy 0 < min <= max <= 0.5")
        if not 1 <= self.num_shapes <= len(SHAPES):
            problems.append(f"num_shapes must be in [1, {len(SHAPES)}]")
        if self.num_contexts < 1:
            problems.append("num_contexts must be >= 1")
        if self.image_size < 8:
            problems.append("image_size must be >= 8")
        if self.samples_per_class < 1:
            problems.append("samples_per_class must be >= 1")
        if self.noise_std < 0 or self.halo_width < 0 or self.num_distractors < 0:
            problems.append("noise_std, halo_width and num_distractors must be non-negative")
        if not 0 <= self.test_fraction < 1:
            problems.append("test_fraction must be in [0, 1)")
        if problems:
            raise ValueError("invalid SynthConfig: " + "; ".join(problems))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape_scale_range"] = list(self.shape_scale_range)
        return d


@dataclass
class Sample:
    id: str
    image: np.ndarray  # C x H x W, float32 in [0, 1]
    mask: np.ndarray  # H x W, uint8 in {0, 1}
    label: int
    roi_area: int
    split: str = "train"


@dataclass
class Dataset:
    ids: List[str]
    images: np.ndarray  # N x C x H x W float32
    masks: np.ndarray  # N x H x W uint8
    labels: np.ndarray  # N int64
    roi_areas: np.ndarray  # N int64
    splits: List[str] = field(default_factory=list)
    config: Optional[SynthConfig] = None
    seed: Optional[int] = None

    def __post_init__(self):
        if not self.splits:
            self.splits = ["train"] * len(self.ids)
        n = len(self.ids)
        if not (len(self.images) == len(self.masks) == len(self.labels) == len(self.roi_areas) == len(self.splits) == n):
            raise ValueError("Dataset fields have inconsistent lengths")

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.ids[i], self.images[i], self.masks[i], int(self.labels[i]), int(self.roi_areas[i]), self.splits[i])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            [self.ids[i] for i in idx],
            self.images[idx],
            self.masks[idx],
            self.labels[idx],
            self.roi_areas[idx],
            [self.splits[i] for i in idx],
            self.config,
            self.seed,
        )

    def split(self, name: str) -> "Dataset":
        return self.subset([i for i, s in enumerate(self.splits) if s == name])

    @property
    def num_classes(self) -> int:
        if self.config is not None:
            return self.config.num_classes
        return int(self.labels.max()) + 1 if len(self) else 0


# ---------------------------------------------------------------------------
# rasterization


def roi_area(mask) -> int:
    """Number of foreground pixels in a binary mask."""
    m = np.asarray(mask)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("roi_area expects a binary {0,1} mask")
    return int(np.count_nonzero(m))


def _half_extent(shape: str, area: float) -> float:
    return {
        "disk": math.sqrt(area / math.pi),
        "square": math.sqrt(area) / 2,
        "triangle": math.sqrt(2 * area) / 2,
        "cross": 1.5 * math.sqrt(area / 5),
        "diamond": math.sqrt(area / 2),
        "bar": 1.5 * math.sqrt(area / 3),
    }[shape]


def rasterize(shape: str, area: float, cy: float, cx: float, size: int) -> np.ndarray:
    """Boolean raster of ``shape`` with target ``area`` (pixels) centred at (cy, cx).

    A pixel belongs to the shape when its centre does.  The centre pixel is
    always set so even sub-pixel shapes produce a non-empty ROI.
    """
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = ys - cy, xs - cx
    ady, adx = np.abs(dy), np.abs(dx)
    if shape == "disk":
        r = math.sqrt(area / math.pi)
        out = dx * dx + dy * dy <= r * r
    elif shape == "square":
        h = math.sqrt(area) / 2
        out = (adx <= h) & (ady <= h)
    elif shape == "triangle":
        b = math.sqrt(2 * area)
        out = (dy >= -b / 2) & (dy <= b / 2) & (adx <= (dy + b / 2) / 2)
    elif shape == "cross":
        w = math.sqrt(area / 5)
        out = ((adx <= 1.5 * w) & (ady <= w / 2)) | ((ady <= 1.5 * w) & (adx <= w / 2))
    elif shape == "diamond":
        d = math.sqrt(area / 2)
        out = adx + ady <= d
    elif shape == "bar":
        a = math.sqrt(area / 3)
        out = (adx <= 1.5 * a) & (ady <= a / 2)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    out[min(int(cy), size - 1), min(int(cx), size - 1)] = True
    return out


def context_colors(num_contexts: int) -> np.ndarray:
    """Dark, well separated background colours; context 0 red, context 1 blue."""
    hues = [0.0, 2 / 3, 1 / 3, 1 / 6, 1 / 2, 5 / 6]
    hues += [(k + 0.5) / num_contexts for k in range(max(0, num_contexts - len(hues)))]
    return np.array([colorsys.hsv_to_rgb(h, 0.8, 0.55) for h in hues[:num_contexts]], dtype=np.float64)


HALO_GRAY = 0.35


def _place(rng, half: float, margin: int, size: int) -> Tuple[float, float]:
    lo = half + margin
    hi = size - half - margin
    if hi <= lo:
        return size / 2, size / 2
    return rng.uniform(lo, hi), rng.uniform(lo, hi)


def _render_one(rng, config: SynthConfig, shape_idx: int, context_idx: int, colors: np.ndarray):
    size = config.image_size
    lo, hi = config.shape_scale_range
    frac = math.exp(rng.uniform(math.log(lo), math.log(hi)))
    area = frac * size * size
    shape = SHAPES[shape_idx]
    cy, cx = _place(rng, _half_extent(shape, area), config.halo_width + 1, size)
    mask = rasterize(shape, area, cy, cx, size)

    img = np.empty((size, size, 3))
    img[:] = colors[context_idx]
    occupied = mask
    if config.halo_width:
        occupied = ndimage.binary_dilation(mask, iterations=config.halo_width, structure=np.ones((3, 3), bool))
        img[occupied & ~mask] = HALO_GRAY
    keep_out = ndimage.binary_dilation(occupied, iterations=2, structure=np.ones((3, 3), bool))
    for _ in range(config.num_distractors):
        d_shape = SHAPES[rng.integers(config.num_shapes)]
        d_frac = math.exp(rng.uniform(math.log(lo), math.log(hi)))
        d_area = d_frac * size * size
        d_color = rng.uniform(0.6, 1.0, size=3)
        for _attempt in range(20):
            dy, dx = _place(rng, _half_extent(d_shape, d_area), 1, size)
            d_mask = rasterize(d_shape, d_area, dy, dx, size)
            if not np.any(d_mask & keep_out):
                img[d_mask] = d_color
                keep_out |= d_mask
                break
    img[mask] = rng.uniform(0.6, 1.0, size=3)
    if config.noise_std:
        img += rng.normal(0.0, config.noise_std, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    # stored images are 8-bit, so generate at that precision
    img = np.round(img * 255).astype(np.uint8).transpose(2, 0, 1).astype(np.float32) / 255
    return img, mask.astype(np.uint8)


def generate_context_shapes(config: SynthConfig, seed: int) -> Dataset:
    """Generate ``samples_per_class`` samples for every (shape, context) class.

    The result is a pure function of ``(config, seed)``.  Class order is
    shuffled, and the last ``test_fraction`` of every class is marked as the
    held-out ``"test"`` split.
    """
    if seed is None:
        raise ValueError("an explicit seed is required")
    config.validate()
    rng = np.random.default_rng(seed)
    k, per = config.num_classes, config.samples_per_class
    labels = np.repeat(np.arange(k), per)
    n_test = int(round(per * config.test_fraction))
    splits = np.array((["train"] * (per - n_test) + ["test"] * n_test) * k)
    order = rng.permutation(len(labels))
    labels, splits = labels[order], splits[order]

    colors = context_colors(config.num_contexts)
    size = config.image_size
    images = np.empty((len(labels), 3, size, size), dtype=np.float32)
    masks = np.empty((len(labels), size, size), dtype=np.uint8)
    for i, label in enumerate(labels):
        s, c = divmod(int(label), config.num_contexts)
        images[i], masks[i] = _render_one(rng, config, s, c, colors)
    areas = masks.reshape(len(labels), -1).sum(axis=1).astype(np.int64)
    ids = [f"{i:06d}" for i in range(len(labels))]
    return Dataset(ids, images, masks, labels.astype(np.int64), areas, list(splits), config, seed)


# ---------------------------------------------------------------------------
# batching


def iterate_batches(
    dataset: Dataset, batch_size: int, shuffle: bool = False, seed: int = 0, epoch: int = 0
) -> Iterator[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(images, masks, labels)``; masks are N x 1 x H x W float32.

    With ``shuffle`` the order is a permutation drawn from ``(seed, epoch)``,
    so a given epoch index always sees the same order.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.masks[idx][:, None].astype(np.float32), dataset.labels[idx]


# ---------------------------------------------------------------------------
# storage


def save_dataset(dataset: Dataset, directory) -> Path:
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, sid in enumerate(dataset.ids):
        img = np.round(dataset.images[i].transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(img, mode="RGB").save(root / "images" / f"{sid}.ppm")
        Image.fromarray(dataset.masks[i].astype(np.uint8) * 255, mode="L").save(root / "masks" / f"{sid}.pgm")
        entry = {
            "id": sid,
            "label": int(dataset.labels[i]),
            "roi_area": int(dataset.roi_areas[i]),
            "split": dataset.splits[i],
            "image": f"images/{sid}.ppm",
            "mask": f"masks/{sid}.pgm",
        }
        lines.append(json.dumps(entry, sort_keys=True))
    (root / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    meta = {"synth": dataset.config.to_dict() if dataset.config else None, "seed": dataset.seed}
    (root / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return root


def _read_image(path: Path, sid: str, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode != mode:
                raise DatasetFormatError(f"sample {sid}: {path.name} has mode {im.mode}, expected {mode}")
            return np.asarray(im)
    except FileNotFoundError:
        raise DatasetFormatError(f"sample {sid}: missing file {path}") from None
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DatasetFormatError(f"sample {sid}: corrupt image {path}: {exc}") from None


def load_dataset(directory) -> Dataset:
    root = Path(directory)
    manifest = root / "manifest.jsonl"
    if not manifest.is_file():
        raise MissingManifestError(f"no manifest.jsonl in {root}")
    entries = [json.loads(line) for line in manifest.read_text().splitlines() if line.strip()]
    for sub, ext in (("images", ".ppm"), ("masks", ".pgm")):
        present = len([f for f in os.listdir(root / sub) if f.endswith(ext)]) if (root / sub).is_dir() else 0
        if present != len(entries):
            raise DatasetFormatError(f"manifest lists {len(entries)} samples but {sub}/ holds {present} files")

    config = seed = None
    if (root / "config.json").is_file():
        meta = json.loads((root / "config.json").read_text())
        config = SynthConfig(**meta["synth"]) if meta.get("synth") else None
        seed = meta.get("seed")

    if not entries:
        raise DatasetFormatError(f"manifest in {root} lists no samples")
    ids, images, masks, labels, areas, splits = [], [], [], [], [], []
    for e in entries:
        sid = str(e["id"])
        img = _read_image(root / e["image"], sid, "RGB")
        m = _read_image(root / e["mask"], sid, "L")
        if img.shape[:2] != m.shape:
            raise DatasetFormatError(f"sample {sid}: image {img.shape[:2]} and mask {m.shape} sizes differ")
        if not np.all((m == 0) | (m == 255)):
            raise DatasetFormatError(f"sample {sid}: mask values must be 0 or 255")
        m = (m // 255).astype(np.uint8)
        if roi_area(m) != int(e["roi_area"]):
            raise DatasetFormatError(f"sample {sid}: roi_area {e['roi_area']} != {roi_area(m)} mask pixels")
        ids.append(sid)
        images.append(img.transpose(2, 0, 1).astype(np.float32) / 255)
        masks.append(m)
        labels.append(int(e["label"]))
        areas.append(int(e["roi_area"]))
        splits.append(e.get("split", "train"))
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DatasetFormatError(f"images in {root} have differing sizes {sorted(shapes)}")
    return Dataset(
        ids,
        np.stack(images),
        np.stack(masks),
        np.array(labels, dtype=np.int64),
        np.array(areas, dtype=np.int64),
        splits,
        config,
        seed,
    )
