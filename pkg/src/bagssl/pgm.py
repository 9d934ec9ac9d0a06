"""Binary PGM (P5) / PPM (P6) writers and a reader for tests.

Dependency-free, byte-stable image output for heatmaps and neighbor tiles.
"""

from __future__ import annotations

import numpy as np


def write_pgm(path, gray: np.ndarray):
    """Write a (H, W) uint8 array as binary PGM."""
    gray = np.ascontiguousarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise ValueError(f"PGM needs (H, W), got {gray.shape}")
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def write_ppm(path, rgb: np.ndarray):
    """Write a (H, W, 3) uint8 array as binary PPM."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"PPM needs (H, W, 3), got {rgb.shape}")
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def read_pnm(path) -> np.ndarray:
    """Read back a binary PGM/PPM written by this module."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        dims = fh.readline().split()
        maxval = fh.readline().strip()
        w, h = int(dims[0]), int(dims[1])
        if maxval != b"255":
            raise ValueError(f"{path}: unsupported maxval {maxval!r}")
        data = fh.read()
    if magic == b"P5":
        return np.frombuffer(data, dtype=np.uint8, count=h * w).reshape(h, w)
    if magic == b"P6":
        return np.frombuffer(data, dtype=np.uint8, count=h * w * 3).reshape(h, w, 3)
    raise ValueError(f"{path}: unsupported magic {magic!r}")


def to_gray_bytes(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Linear value -> gray mapping over [lo, hi]; a degenerate range maps
    everything to 255."""
    values = np.asarray(values, dtype=np.float64)
    if hi <= lo:
        return np.full(values.shape, 255, dtype=np.uint8)
    scaled = np.clip((values - lo) / (hi - lo), 0.0, 1.0)
    return np.floor(scaled * 255.0 + 0.5).astype(np.uint8)
