"""Dataset ingestion, the two-view augmentation procedure, and batching.

The synthetic generator produces class-conditional oriented-grating
textures: each class fixes a (frequency band, orientation) pair and every
sample draws random phases, a random translation and pixel noise. Classes
are therefore linearly separable from orientation/frequency features but
not from raw pixels (random phase decorrelates the pixel lattice). The
texture is built from a mirrored pair of gratings so horizontal flips stay
within the class.

Everything downstream of a seed is deterministic: augmentation streams
are derived per (epoch seed, sample index, view tag), never consumed from
a shared stateful generator.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rngs import stream

NOISE_SIGMA = 0.02
JITTER = 0.2
CROP_AREA_LO = 0.3


@dataclass
class Dataset:
    images: np.ndarray          # (N, side, side, C) float32 in [0, 1]
    labels: np.ndarray          # (N,) int
    source: str                 # "synthetic" or a directory path
    seed: int
    class_params: np.ndarray | None = None   # per-sample generator features
    sample_params: np.ndarray | None = None

    @property
    def side(self):
        return self.images.shape[1]

    @property
    def channels(self):
        return self.images.shape[3]

    @property
    def n_classes(self):
        return int(self.labels.max()) + 1

    def __len__(self):
        return len(self.images)


@dataclass
class ViewPair:
    x_q: np.ndarray
    x_k: np.ndarray
    aug_seed: int


def bilinear_resize(img, out_h, out_w):
    """Direct bilinear resampling with half-pixel alignment.

    Independent of the matrix-form resize operator in ``vit``; also used
    to rescale augmentation crops.
    """
    img = np.asarray(img, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w, _ = img.shape

    def axis_coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, wy = axis_coords(h, out_h)
    x0, x1, wx = axis_coords(w, out_w)
    top = img[y0][:, x0] * (1 - wx)[None, :, None] + img[y0][:, x1] * wx[None, :, None]
    bot = img[y1][:, x0] * (1 - wx)[None, :, None] + img[y1][:, x1] * wx[None, :, None]
    out = top * (1 - wy)[:, None, None] + bot * wy[:, None, None]
    return out[:, :, 0] if squeeze else out


# ---------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------

def _class_table(rng, n_classes):
    """(frequency, orientation) per class: orientations spread over
    [0, pi/2), frequencies alternating between two bands."""
    n_orient = (n_classes + 1) // 2
    orients = (np.pi / 2) * (np.arange(n_orient) + 0.5) / n_orient
    freqs = np.array([6.0, 13.0])
    table = []
    for c in range(n_classes):
        table.append((freqs[c % 2] * (1.0 + 0.05 * rng.standard_normal()),
                      orients[c // 2 % n_orient]))
    return np.array(table)


def generate_synthetic(seed, n_classes=10, n_per_class=64, side=64, channels=1):
    """Procedural class-textured dataset, fully determined by the seed."""
    if side < 32:
        raise ValueError("side must be >= 32")
    if n_classes < 2:
        raise ValueError("need at least two classes")
    rng = stream(seed, "synthetic", "classes")
    table = _class_table(rng, n_classes)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    images = np.empty((n_classes * n_per_class, side, side, channels), dtype=np.float32)
    labels = np.empty(n_classes * n_per_class, dtype=np.int64)
    feats = np.empty((n_classes * n_per_class, 2))
    i = 0
    for c in range(n_classes):
        freq, theta = table[c]
        ux, uy = np.cos(theta), np.sin(theta)
        for s in range(n_per_class):
            r = stream(seed, "synthetic", c, s)
            ph = r.uniform(0, 2 * np.pi, size=2)
            dx, dy = r.uniform(-side / 4, side / 4, size=2)
            k = 2 * np.pi * freq / side
            # mirrored grating pair keeps the class flip-invariant
            field = (np.sin(k * (ux * (xx - dx) + uy * (yy - dy)) + ph[0])
                     + np.sin(k * (ux * (xx - dx) - uy * (yy - dy)) + ph[1]))
            img = 0.5 + 0.22 * field
            img = img[:, :, None] + r.normal(0.0, NOISE_SIGMA, size=(side, side, channels))
            images[i] = np.clip(img, 0.0, 1.0)
            labels[i] = c
            feats[i] = (freq * ux, freq * uy)
            i += 1
    return Dataset(images, labels, "synthetic", seed, class_params=table,
                   sample_params=feats)


# ---------------------------------------------------------------------
# directory loader
# ---------------------------------------------------------------------

def read_ppm(path):
    """Decode an 8-bit binary PPM (P6) or PGM (P5) file."""
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic not in (b"P6", b"P5") or maxval != 255:
        raise ValueError(f"unsupported raster format in {path}")
    pos += 1  # single whitespace after maxval
    channels = 3 if magic == b"P6" else 1
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * channels, offset=pos)
    return data.reshape(h, w, channels)


def _decode_image(path):
    suffix = Path(path).suffix.lower()
    if suffix in (".ppm", ".pgm"):
        return read_ppm(path)
    if suffix == ".png":
        from PIL import Image
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    raise ValueError(f"unsupported image type {suffix!r}")


def load_directory(path, side=64, channels=None):
    """Load a class-per-subdirectory image tree, resized to ``side``."""
    root = Path(path)
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise ValueError(f"no class subdirectories under {root}")
    images, labels = [], []
    for label, cdir in enumerate(class_dirs):
        count = 0
        for f in sorted(cdir.iterdir()):
            if not f.is_file():
                continue
            try:
                arr = _decode_image(f)
            except Exception as exc:
                warnings.warn(f"skipping unreadable file {f}: {exc}")
                continue
            img = arr.astype(np.float64) / 255.0
            if channels == 1 and img.shape[2] != 1:
                img = img.mean(axis=2, keepdims=True)
            if img.shape[:2] != (side, side):
                img = bilinear_resize(img, side, side)
            images.append(img.astype(np.float32))
            labels.append(label)
            count += 1
        if count == 0:
            raise ValueError(f"class directory {cdir} has no readable images")
    return Dataset(np.stack(images), np.asarray(labels, dtype=np.int64),
                   str(root), seed=0)


# ---------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    out_side: int = 64
    crop_area_lo: float = CROP_AREA_LO
    crop_area_hi: float = 1.0
    flip_prob: float = 0.5
    jitter: float = JITTER
    noise_sigma: float = NOISE_SIGMA


def identity_augment(side):
    return AugmentConfig(out_side=side, crop_area_lo=1.0, crop_area_hi=1.0,
                         flip_prob=0.0, jitter=0.0, noise_sigma=0.0)


def _augment_one(img, r, cfg: AugmentConfig):
    h, w = img.shape[:2]
    area = r.uniform(cfg.crop_area_lo, cfg.crop_area_hi)
    crop = max(1, min(h, int(round(np.sqrt(area) * h))))
    top = int(r.integers(0, h - crop + 1))
    left = int(r.integers(0, w - crop + 1))
    view = img[top:top + crop, left:left + crop]
    if view.shape[:2] != (cfg.out_side, cfg.out_side):
        view = bilinear_resize(view, cfg.out_side, cfg.out_side)
    else:
        view = np.array(view, dtype=np.float64)
    if r.random() < cfg.flip_prob:
        view = view[:, ::-1]
    if cfg.jitter > 0:
        contrast = 1.0 + r.uniform(-cfg.jitter, cfg.jitter)
        brightness = r.uniform(-cfg.jitter, cfg.jitter)
        view = (view - 0.5) * contrast + 0.5 + brightness
    if cfg.noise_sigma > 0:
        view = view + r.normal(0.0, cfg.noise_sigma, size=view.shape)
    lo, hi = -6.0 * NOISE_SIGMA, 1.0 + 6.0 * NOISE_SIGMA
    return np.clip(view, lo, hi).astype(np.float32)


def make_views(image, aug_seed, cfg: AugmentConfig | None = None):
    """Two independently augmented views of one image, deterministic in
    ``aug_seed``; the two views use distinct derived streams."""
    if cfg is None:
        cfg = AugmentConfig(out_side=np.asarray(image).shape[0])
    x_q = _augment_one(image, stream(aug_seed, "view", "q"), cfg)
    x_k = _augment_one(image, stream(aug_seed, "view", "k"), cfg)
    return ViewPair(x_q, x_k, aug_seed)


def make_small_crops(image, aug_seed, n_crops, out_side, cfg: AugmentConfig | None = None):
    """Additional half-resolution student crops (dino)."""
    base = cfg or AugmentConfig()
    small_cfg = AugmentConfig(out_side=out_side, crop_area_lo=0.1, crop_area_hi=0.4,
                              flip_prob=base.flip_prob, jitter=base.jitter,
                              noise_sigma=base.noise_sigma)
    return [_augment_one(image, stream(aug_seed, "small", i), small_cfg)
            for i in range(n_crops)]


def make_batches(dataset: Dataset, batch_size, epoch_seed, aug: AugmentConfig | None = None):
    """Shuffled drop-last batches of ViewPairs for one epoch.

    Per-sample augmentation seeds derive from (epoch_seed, dataset index),
    so the pipeline is a pure function of its seeds regardless of ordering.
    """
    n = len(dataset)
    if batch_size > n:
        raise ValueError("batch size exceeds dataset size")
    order = stream(epoch_seed, "shuffle").permutation(n)
    for start in range(0, n - batch_size + 1, batch_size):
        idx = order[start:start + batch_size]
        pairs = []
        for i in idx:
            seed = (int(epoch_seed) << 20) ^ int(i)
            pairs.append(make_views(dataset.images[i], seed, aug))
        yield idx, pairs
