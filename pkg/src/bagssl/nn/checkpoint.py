"""Binary checkpoint container.

Layout: magic "BSSL", version u32, length-prefixed spec text, parameter
block (count u64 + float64 little-endian values), step u64, seed u64.
The same container carries encoder/projector models ("input/encoder/
projector" spec text) and K x d embedding tables ("table KxD").
"""

from __future__ import annotations

import struct

import numpy as np

from ..errors import DataError
from .model import Model

MAGIC = b"BSSL"
VERSION = 1


def save_checkpoint(path, spec_text: str, flat_params: np.ndarray, step: int, seed: int):
    spec_bytes = spec_text.encode("utf-8")
    flat = np.ascontiguousarray(flat_params, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(spec_bytes)))
        fh.write(spec_bytes)
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.tobytes())
        fh.write(struct.pack("<Q", step))
        fh.write(struct.pack("<Q", seed))


def load_checkpoint(path) -> tuple[str, np.ndarray, int, int]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise DataError(f"{path}: not a BSSL checkpoint")
    version = struct.unpack_from("<I", raw, 4)[0]
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    spec_len = struct.unpack_from("<I", raw, 8)[0]
    off = 12
    if len(raw) < off + spec_len + 8:
        raise DataError(f"{path}: truncated checkpoint")
    spec_text = raw[off : off + spec_len].decode("utf-8")
    off += spec_len
    count = struct.unpack_from("<Q", raw, off)[0]
    off += 8
    if len(raw) < off + 8 * count + 16:
        raise DataError(f"{path}: truncated parameter block")
    flat = np.frombuffer(raw, dtype="<f8", count=count, offset=off).copy()
    off += 8 * count
    step = struct.unpack_from("<Q", raw, off)[0]
    seed = struct.unpack_from("<Q", raw, off + 8)[0]
    return spec_text, flat, step, seed


def save_model(path, model: Model, step: int):
    save_checkpoint(path, model.spec_text(), model.flat_parameters(), step, model.seed)


def load_model(path) -> tuple[Model, int]:
    spec_text, flat, step, seed = load_checkpoint(path)
    if spec_text.startswith("table "):
        raise DataError(f"{path}: holds an embedding table, not a model")
    model = Model.from_spec_text(spec_text, seed=seed)
    model.set_flat_parameters(flat)
    return model, step


def save_table(path, table: np.ndarray, step: int, seed: int):
    k, d = table.shape
    save_checkpoint(path, f"table {k}x{d}\n", table.ravel(), step, seed)


def load_table(path) -> np.ndarray:
    spec_text, flat, _, _ = load_checkpoint(path)
    head = spec_text.strip().splitlines()[0]
    if not head.startswith("table "):
        raise DataError(f"{path}: holds a model, not an embedding table")
    k, d = (int(v) for v in head.split()[1].split("x"))
    if flat.size != k * d:
        raise DataError(f"{path}: table size mismatch ({flat.size} != {k}*{d})")
    return flat.reshape(k, d)
