"""Image dataset parsing, patch extraction and augmentation.

Binary formats are parsed bit-exactly: CIFAR-10 batch files (3073 bytes per
record, label byte first) and IDX image/label pairs (big-endian headers,
magic 0x00000803 / 0x00000801). Pixels are stored channel-major as float64
in [0, 1].
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class ImageRecord:
    """One decoded image; ``pixels`` has shape (channels, height, width)."""

    id: int
    width: int
    height: int
    channels: int
    pixels: np.ndarray
    label: int | None = None


@dataclass
class Patch:
    """A crop taken at (x, y) with side ``src_size``, resized to the
    canonical side length; ``pixels`` has shape (channels, S, S)."""

    image_id: int
    x: int
    y: int
    src_size: int
    canonical_size: int
    pixels: np.ndarray


@dataclass
class AugmentParams:
    """Color augmentation parameters. Every range must contain 1.0 so the
    identity transform stays reachable."""

    brightness_range: tuple[float, float] = (0.6, 1.4)
    contrast_range: tuple[float, float] = (0.6, 1.4)
    saturation_range: tuple[float, float] = (0.6, 1.4)
    grayscale_prob: float = 0.2
    flip_prob: float = 0.5

    def __post_init__(self):
        for name in ("brightness_range", "contrast_range", "saturation_range"):
            lo, hi = getattr(self, name)
            if not (lo <= 1.0 <= hi):
                raise ValueError(f"{name} must contain 1.0, got ({lo}, {hi})")
        for name in ("grayscale_prob", "flip_prob"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {p}")

    @classmethod
    def identity(cls) -> "AugmentParams":
        return cls((1.0, 1.0), (1.0, 1.0), (1.0, 1.0), 0.0, 0.0)


def load_cifar10(path) -> list[ImageRecord]:
    """Parse a CIFAR-10 binary batch file into 32x32 RGB records."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) == 0:
        raise DataError(f"{path}: empty dataset file")
    if len(raw) % CIFAR_RECORD_BYTES != 0:
        raise DataError(
            f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES}"
        )
    n = len(raw) // CIFAR_RECORD_BYTES
    buf = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD_BYTES)
    labels = buf[:, 0]
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise DataError(f"{path}: record {int(bad[0])} has label byte {int(labels[bad[0]])} > 9")
    records = []
    for i in range(n):
        pixels = buf[i, 1:].astype(np.float64).reshape(3, 32, 32) / 255.0
        records.append(ImageRecord(i, 32, 32, 3, pixels, int(labels[i])))
    return records


def _read_idx_header(raw: bytes, path, expect_magic: int, ndim: int):
    if len(raw) < 4 * (1 + ndim):
        raise DataError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expect_magic:
        raise DataError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 * (1 + ndim)])
    return dims, raw[4 * (1 + ndim) :]


def load_idx(images_path, labels_path) -> list[ImageRecord]:
    """Parse an IDX image/label file pair into grayscale records."""
    with open(images_path, "rb") as fh:
        img_raw = fh.read()
    with open(labels_path, "rb") as fh:
        lab_raw = fh.read()
    (n, h, w), img_payload = _read_idx_header(img_raw, images_path, IDX_IMAGES_MAGIC, 3)
    (n_lab,), lab_payload = _read_idx_header(lab_raw, labels_path, IDX_LABELS_MAGIC, 1)
    if n != n_lab:
        raise DataError(f"image count {n} != label count {n_lab}")
    if n == 0:
        raise DataError(f"{images_path}: empty dataset file")
    if len(img_payload) < n * h * w:
        raise DataError(f"{images_path}: truncated payload ({len(img_payload)} < {n * h * w})")
    if len(lab_payload) < n:
        raise DataError(f"{labels_path}: truncated payload ({len(lab_payload)} < {n})")
    pix = np.frombuffer(img_payload[: n * h * w], dtype=np.uint8).reshape(n, h, w)
    labels = np.frombuffer(lab_payload[:n], dtype=np.uint8)
    return [
        ImageRecord(i, w, h, 1, pix[i].astype(np.float64)[None, :, :] / 255.0, int(labels[i]))
        for i in range(n)
    ]


def bilinear_resize(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (C, H, W) -> (C, out_h, out_w) with corner-aligned bilinear
    sampling: output corners map exactly onto input corners, so constants
    are preserved and same-size resize is the identity."""
    c, h, w = pixels.shape
    if h == out_h and w == out_w:
        return pixels.copy()
    ys = np.arange(out_h) * ((h - 1) / (out_h - 1)) if out_h > 1 else np.zeros(1)
    xs = np.arange(out_w) * ((w - 1) / (out_w - 1)) if out_w > 1 else np.zeros(1)
    y0 = np.minimum(np.floor(ys).astype(np.intp), h - 1)
    x0 = np.minimum(np.floor(xs).astype(np.intp), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    v00 = pixels[:, y0[:, None], x0[None, :]]
    v01 = pixels[:, y0[:, None], x1[None, :]]
    v10 = pixels[:, y1[:, None], x0[None, :]]
    v11 = pixels[:, y1[:, None], x1[None, :]]
    top = v00 * (1.0 - fx) + v01 * fx
    bot = v10 * (1.0 - fx) + v11 * fx
    return top * (1.0 - fy) + bot * fy


def extract_patch(img: ImageRecord, x: int, y: int, src_size: int, canonical_size: int) -> Patch:
    """Crop a src_size square at (x, y) and resize it to the canonical side."""
    if src_size < 1 or canonical_size < 1:
        raise ValueError("src_size and canonical_size must be >= 1")
    if x < 0 or y < 0 or x + src_size > img.width or y + src_size > img.height:
        raise ValueError(
            f"crop ({x},{y}) size {src_size} out of bounds for {img.width}x{img.height}"
        )
    crop = img.pixels[:, y : y + src_size, x : x + src_size]
    out = bilinear_resize(crop, canonical_size, canonical_size)
    return Patch(img.id, x, y, src_size, canonical_size, out)


def color_augment(patch: Patch, aug: AugmentParams, rng: np.random.Generator) -> Patch:
    """Apply flip / brightness / contrast / saturation / grayscale jitter.

    Draws are consumed in a fixed order regardless of which transforms end
    up active, and factors exactly equal to 1.0 leave pixels untouched
    bit-for-bit. Output is clamped to [0, 1].
    """
    x = patch.pixels.copy()
    c = x.shape[0]
    if rng.random() < aug.flip_prob:
        x = x[:, :, ::-1].copy()
    b = rng.uniform(*aug.brightness_range)
    if b != 1.0:
        x = x * b
    k = rng.uniform(*aug.contrast_range)
    if k != 1.0:
        m = x.mean()
        x = (x - m) * k + m
    s = rng.uniform(*aug.saturation_range)
    if s != 1.0 and c >= 3:
        g = x.mean(axis=0, keepdims=True)
        x = g + (x - g) * s
    if rng.random() < aug.grayscale_prob and c >= 3:
        x = np.repeat(x.mean(axis=0, keepdims=True), c, axis=0)
    np.clip(x, 0.0, 1.0, out=x)
    return Patch(patch.image_id, patch.x, patch.y, patch.src_size, patch.canonical_size, x)


def sample_patch_pair(
    img: ImageRecord,
    src_size: int,
    canonical_size: int,
    aug: AugmentParams,
    rng: np.random.Generator,
) -> tuple[Patch, Patch]:
    """Draw two patches at independent uniform positions within the image,
    each independently color-augmented."""
    if src_size > min(img.width, img.height):
        raise ValueError(f"src_size {src_size} exceeds image bounds {img.width}x{img.height}")
    max_x = img.width - src_size
    max_y = img.height - src_size
    x1 = int(rng.integers(0, max_x + 1))
    y1 = int(rng.integers(0, max_y + 1))
    x2 = int(rng.integers(0, max_x + 1))
    y2 = int(rng.integers(0, max_y + 1))
    p1 = color_augment(extract_patch(img, x1, y1, src_size, canonical_size), aug, rng)
    p2 = color_augment(extract_patch(img, x2, y2, src_size, canonical_size), aug, rng)
    return p1, p2


def random_resized_crop(
    img: ImageRecord,
    min_scale: float,
    max_scale: float,
    canonical_size: int,
    rng: np.random.Generator,
) -> Patch:
    """Multi-scale square crop: area fraction uniform in [min_scale,
    max_scale], side rounded to nearest and clamped, uniform position."""
    if not (0.0 < min_scale <= max_scale <= 1.0):
        raise ValueError(f"invalid scale interval ({min_scale}, {max_scale})")
    a = rng.uniform(min_scale, max_scale)
    side = int(math.floor(math.sqrt(a * img.width * img.height) + 0.5))
    side = max(1, min(side, min(img.width, img.height)))
    x = int(rng.integers(0, img.width - side + 1))
    y = int(rng.integers(0, img.height - side + 1))
    return extract_patch(img, x, y, side, canonical_size)
