"""Patch-embedding evaluation: aggregation into image representations,
kNN and linear-probe classifiers, the aggregation-convergence experiment,
and locality visualizations (similarity heatmaps, patch nearest neighbors).

Batching convention: every call embeds all requested patches of one image
in a single forward pass (the standardize layer has no running statistics,
so a row's output depends on its batch). Random-N aggregates therefore
draw rows from the precomputed per-image pool instead of re-embedding.
Evaluation never applies color augmentation.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dataset_io import ImageRecord, extract_patch
from .nn.model import Model
from .pgm import to_gray_bytes, write_pgm, write_ppm

SPACES = ("embedding", "projection")


@dataclass
class EmbeddingRecord:
    image_id: int
    x: int
    y: int
    vector: np.ndarray
    space: str


@dataclass
class ImageRepresentation:
    image_id: int
    vector: np.ndarray
    method: str


def grid_positions(width: int, height: int, src_size: int, stride: int) -> list[tuple[int, int]]:
    """Top-left crop positions at the given stride, row-major, always
    including the final aligned position on each axis."""
    if src_size > min(width, height):
        raise ValueError(f"src_size {src_size} exceeds image {width}x{height}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    xs = list(range(0, width - src_size + 1, stride))
    if xs[-1] != width - src_size:
        xs.append(width - src_size)
    ys = list(range(0, height - src_size + 1, stride))
    if ys[-1] != height - src_size:
        ys.append(height - src_size)
    return [(x, y) for y in ys for x in xs]


def embed_patches(
    model: Model,
    img: ImageRecord,
    src_size: int,
    canonical_size: int,
    *,
    grid_stride: int | None = None,
    random_n: int | None = None,
    rng: np.random.Generator | None = None,
    spaces: tuple[str, ...] = ("embedding",),
) -> dict[str, list[EmbeddingRecord]]:
    """Embed patches at grid or random positions, one record per patch per
    requested space. All patches go through one forward batch."""
    for s in spaces:
        if s not in SPACES:
            raise ValueError(f"unknown space {s!r}")
    if (grid_stride is None) == (random_n is None):
        raise ValueError("specify exactly one of grid_stride or random_n")
    if grid_stride is not None:
        positions = grid_positions(img.width, img.height, src_size, grid_stride)
    else:
        if rng is None:
            raise ValueError("random positions need an rng")
        if random_n < 1:
            raise ValueError("random_n must be >= 1")
        max_x = img.width - src_size
        max_y = img.height - src_size
        if max_x < 0 or max_y < 0:
            raise ValueError(f"src_size {src_size} exceeds image {img.width}x{img.height}")
        positions = [
            (int(rng.integers(0, max_x + 1)), int(rng.integers(0, max_y + 1)))
            for _ in range(random_n)
        ]
    batch = np.stack(
        [extract_patch(img, x, y, src_size, canonical_size).pixels for x, y in positions]
    )
    h, z, _ = model.forward(batch)
    by_space = {"embedding": h, "projection": z}
    return {
        s: [
            EmbeddingRecord(img.id, x, y, by_space[s][i].copy(), s)
            for i, (x, y) in enumerate(positions)
        ]
        for s in spaces
    }


def embed_grid_pools(
    model: Model,
    images: list[ImageRecord],
    src_size: int,
    canonical_size: int,
    grid_stride: int,
    space: str = "embedding",
    threads: int = 1,
) -> list[np.ndarray]:
    """Per-image pools of grid-patch vectors, one (n_patches, d) matrix per
    image; parallelizes over images with order-preserving assembly."""

    def one(img: ImageRecord) -> np.ndarray:
        recs = embed_patches(
            model, img, src_size, canonical_size, grid_stride=grid_stride, spaces=(space,)
        )[space]
        return np.stack([r.vector for r in recs])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, images))
    return [one(img) for img in images]


def bag_aggregate(records: list[EmbeddingRecord]) -> ImageRepresentation:
    """Componentwise arithmetic mean of one image's patch vectors."""
    if not records:
        raise ValueError("cannot aggregate an empty record set")
    image_id = records[0].image_id
    space = records[0].space
    for r in records:
        if r.image_id != image_id:
            raise ValueError("mixed image ids in one aggregate")
        if r.space != space:
            raise ValueError("mixed spaces in one aggregate")
    vec = np.stack([r.vector for r in records]).mean(axis=0)
    return ImageRepresentation(image_id, vec, f"bag_mean({len(records)})")


def local_aggregate(records: list[EmbeddingRecord], window: int, stride: int) -> ImageRepresentation:
    """Average-pool a complete rectangular grid of patch vectors and
    concatenate the pooled cells row-major into one long vector."""
    if not records:
        raise ValueError("cannot aggregate an empty record set")
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    image_id = records[0].image_id
    xs = sorted({r.x for r in records})
    ys = sorted({r.y for r in records})
    nx, ny = len(xs), len(ys)
    if nx * ny != len(records):
        raise ValueError("records do not form a complete rectangular grid")
    xi = {x: i for i, x in enumerate(xs)}
    yi = {y: i for i, y in enumerate(ys)}
    d = records[0].vector.shape[0]
    grid = np.full((ny, nx, d), np.nan)
    for r in records:
        if r.image_id != image_id:
            raise ValueError("mixed image ids in one aggregate")
        grid[yi[r.y], xi[r.x]] = r.vector
    if np.isnan(grid).any():
        raise ValueError("records do not form a complete rectangular grid")
    if window > ny or window > nx:
        raise ValueError(f"window {window} exceeds grid {ny}x{nx}")
    py = (ny - window) // stride + 1
    px = (nx - window) // stride + 1
    cells = []
    for a in range(py):
        for b in range(px):
            block = grid[a * stride : a * stride + window, b * stride : b * stride + window]
            cells.append(block.mean(axis=(0, 1)))
    vec = np.concatenate(cells)
    return ImageRepresentation(
        image_id, vec, f"local_concat({ny}x{nx},window={window},stride={stride})"
    )


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; bitwise-identical vectors compare to exactly 1.0
    (IEEE round-off of norm*norm would otherwise land one ulp short)."""
    if np.array_equal(a, b):
        return 1.0
    na = float(np.sqrt((a * a).sum()))
    nb = float(np.sqrt((b * b).sum()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b) / (na * nb)


def _cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.sqrt((a * a).sum(axis=1, keepdims=True))
    nb = np.sqrt((b * b).sum(axis=1, keepdims=True))
    na[na == 0.0] = 1.0
    nb[nb == 0.0] = 1.0
    return (a / na) @ (b / nb).T


def knn_eval(train_vecs, train_labels, test_vecs, test_labels, k: int) -> float:
    """Top-1 accuracy of a cosine-similarity kNN majority vote. Ties break
    by summed similarity, then by lowest class index."""
    train_vecs = np.asarray(train_vecs, dtype=np.float64)
    test_vecs = np.asarray(test_vecs, dtype=np.float64)
    train_labels = np.asarray(train_labels, dtype=np.int64)
    test_labels = np.asarray(test_labels, dtype=np.int64)
    if train_vecs.ndim != 2 or test_vecs.ndim != 2 or train_vecs.shape[1] != test_vecs.shape[1]:
        raise ValueError(
            f"dimension mismatch: train {train_vecs.shape} vs test {test_vecs.shape}"
        )
    n = train_vecs.shape[0]
    if n == 0 or test_vecs.shape[0] == 0:
        raise ValueError("empty train or test set")
    if not (1 <= k <= n):
        raise ValueError(f"k={k} out of range for corpus of {n}")
    sims = _cosine_matrix(test_vecs, train_vecs)
    correct = 0
    idx = np.arange(n)
    for row, want in zip(sims, test_labels):
        order = np.lexsort((idx, -row))[:k]
        votes: dict[int, tuple[int, float]] = {}
        for t in order:
            c = int(train_labels[t])
            cnt, ssum = votes.get(c, (0, 0.0))
            votes[c] = (cnt + 1, ssum + float(row[t]))
        best = max(votes.items(), key=lambda kv: (kv[1][0], kv[1][1], -kv[0]))[0]
        correct += int(best == int(want))
    return correct / test_vecs.shape[0]


def _probe_loss_grad(w, b, x, y_onehot, l2):
    """Multinomial logistic loss with L2 penalty on the weights, plus its
    gradients; shared by training and the finite-difference test."""
    logits = x @ w + b
    m = logits.max(axis=1, keepdims=True)
    expd = np.exp(logits - m)
    probs = expd / expd.sum(axis=1, keepdims=True)
    n = x.shape[0]
    ll = -(np.log(np.maximum(probs, 1e-300)) * y_onehot).sum() / n
    loss = ll + 0.5 * l2 * float((w * w).sum())
    delta = (probs - y_onehot) / n
    gw = x.T @ delta + l2 * w
    gb = delta.sum(axis=0)
    return loss, gw, gb


def linear_probe(
    train_vecs,
    train_labels,
    test_vecs,
    test_labels,
    epochs: int = 200,
    lr: float = 0.5,
    l2: float = 1e-4,
) -> float:
    """Multinomial logistic regression on frozen features by full-batch
    gradient descent; weights start at zero so there is nothing random.
    Features are standardized with train-split statistics for conditioning.
    Returns top-1 test accuracy."""
    x_tr = np.asarray(train_vecs, dtype=np.float64)
    x_te = np.asarray(test_vecs, dtype=np.float64)
    y_tr = np.asarray(train_labels, dtype=np.int64)
    y_te = np.asarray(test_labels, dtype=np.int64)
    classes = np.unique(y_tr)
    if classes.size < 2:
        raise ValueError("linear probe needs at least 2 classes")
    mu = x_tr.mean(axis=0)
    sd = x_tr.std(axis=0)
    sd[sd == 0.0] = 1.0
    x_tr = (x_tr - mu) / sd
    x_te = (x_te - mu) / sd
    cls_index = {int(c): i for i, c in enumerate(classes)}
    y1h = np.zeros((x_tr.shape[0], classes.size))
    for r, lab in enumerate(y_tr):
        y1h[r, cls_index[int(lab)]] = 1.0
    w = np.zeros((x_tr.shape[1], classes.size))
    b = np.zeros(classes.size)
    for _ in range(epochs):
        _, gw, gb = _probe_loss_grad(w, b, x_tr, y1h, l2)
        w -= lr * gw
        b -= lr * gb
    pred = classes[np.argmax(x_te @ w + b, axis=1)]
    return float((pred == y_te).mean())


def convergence_curve(
    pools: list[np.ndarray],
    ns: list[int],
    rng: np.random.Generator,
    trials: int = 8,
    references: list[np.ndarray] | None = None,
):
    """Cosine between bag-of-N aggregates and a per-image reference.

    ``pools`` holds one (n_patches, d) matrix per image (see
    embed_grid_pools). For each image and each N, ``trials`` subsets of N
    pool rows are drawn without replacement (indices sorted before
    averaging, so N = pool size reproduces the pool mean bit-for-bit). The
    reference defaults to the all-patch mean. Returns (summary, per_image)
    where summary has one dict per N with the median and mean over images
    and per_image holds the per-image trial mean and variance arrays.
    """
    if ns != sorted(ns):
        raise ValueError("Ns must be sorted ascending")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    refs = references if references is not None else [p.mean(axis=0) for p in pools]
    if len(refs) != len(pools):
        raise ValueError("one reference per image required")
    mean_arr = np.zeros((len(pools), len(ns)))
    var_arr = np.zeros((len(pools), len(ns)))
    for ii, (pool, ref) in enumerate(zip(pools, refs)):
        m = pool.shape[0]
        for ni, n in enumerate(ns):
            if not (1 <= n <= m):
                raise ValueError(f"N={n} out of range for pool of {m}")
            vals = []
            for _ in range(trials):
                pick = np.sort(rng.choice(m, size=n, replace=False))
                vals.append(cosine(pool[pick].mean(axis=0), ref))
            mean_arr[ii, ni] = float(np.mean(vals))
            var_arr[ii, ni] = float(np.var(vals))
    summary = [
        {
            "n": n,
            "median": float(np.median(mean_arr[:, ni])),
            "mean": float(np.mean(mean_arr[:, ni])),
        }
        for ni, n in enumerate(ns)
    ]
    return summary, {"mean": mean_arr, "var": var_arr}


def heatmap(
    model: Model,
    img: ImageRecord,
    query_pos: tuple[int, int],
    src_size: int,
    canonical_size: int,
    stride: int,
    out_dir,
    basename: str,
):
    """Cosine-similarity grids between a query grid cell and every grid
    patch, in both the embedding and the projection space, written as two
    PGM files sharing one linear value -> gray mapping over their joint
    min/max. Returns grids, the shared scale, and the file paths."""
    positions = grid_positions(img.width, img.height, src_size, stride)
    if tuple(query_pos) not in positions:
        raise ValueError(f"query position {query_pos} is not a grid cell")
    qi = positions.index(tuple(query_pos))
    recs = embed_patches(
        model, img, src_size, canonical_size, grid_stride=stride, spaces=SPACES
    )
    nx = len({x for x, _ in positions})
    ny = len({y for _, y in positions})
    grids = {}
    for space in SPACES:
        vecs = np.stack([r.vector for r in recs[space]])
        sims = np.array([cosine(vecs[qi], v) for v in vecs])
        grids[space] = sims.reshape(ny, nx)
    lo = min(g.min() for g in grids.values())
    hi = max(g.max() for g in grids.values())
    paths = {}
    for space in SPACES:
        path = f"{out_dir}/{basename}_{space}.pgm"
        write_pgm(path, to_gray_bytes(grids[space], lo, hi))
        paths[space] = path
    return {"grids": grids, "scale": (float(lo), float(hi)), "paths": paths}


def patch_knn_dump(
    query: EmbeddingRecord,
    corpus: list[EmbeddingRecord],
    labels_by_image: dict[int, int],
    k: int,
    out_dir,
    basename: str,
    patch_pixels=None,
):
    """Rank the corpus by cosine similarity to the query and tag each of the
    top k with its provenance relative to the query's source image. Writes
    a text manifest and, when ``patch_pixels(image_id, x, y)`` is supplied,
    a tiled image of the neighbor patches. Returns the neighbor list."""
    if not corpus:
        raise ValueError("empty corpus")
    if not (1 <= k <= len(corpus)):
        raise ValueError(f"k={k} out of range for corpus of {len(corpus)}")
    sims = np.array([cosine(query.vector, r.vector) for r in corpus])
    order = np.lexsort((np.arange(len(corpus)), -sims))[:k]
    qlabel = labels_by_image.get(query.image_id)
    neighbors = []
    for rank, idx in enumerate(order):
        r = corpus[idx]
        if r.image_id == query.image_id:
            tag = "same_image"
        elif labels_by_image.get(r.image_id) == qlabel:
            tag = "same_class_other_image"
        else:
            tag = "other_class"
        neighbors.append(
            {
                "rank": rank,
                "image_id": r.image_id,
                "x": r.x,
                "y": r.y,
                "similarity": float(sims[idx]),
                "tag": tag,
            }
        )
    manifest = f"{out_dir}/{basename}.txt"
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.write("rank image_id x y similarity tag\n")
        for nb in neighbors:
            fh.write(
                f"{nb['rank']} {nb['image_id']} {nb['x']} {nb['y']} "
                f"{nb['similarity']!r} {nb['tag']}\n"
            )
    tile_path = None
    if patch_pixels is not None:
        tiles = [patch_pixels(nb["image_id"], nb["x"], nb["y"]) for nb in neighbors]
        c, s, _ = tiles[0].shape
        cols = min(len(tiles), 10)
        rows = (len(tiles) + cols - 1) // cols
        canvas = np.zeros((c, rows * s, cols * s))
        for i, t in enumerate(tiles):
            r0, c0 = (i // cols) * s, (i % cols) * s
            canvas[:, r0 : r0 + s, c0 : c0 + s] = t
        bytes_img = np.floor(np.clip(canvas, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
        if c == 1:
            tile_path = f"{out_dir}/{basename}.pgm"
            write_pgm(tile_path, bytes_img[0])
        else:
            tile_path = f"{out_dir}/{basename}.ppm"
            write_ppm(tile_path, np.moveaxis(bytes_img[:3], 0, 2))
    return {"neighbors": neighbors, "manifest": manifest, "tile": tile_path}


def write_embedding_dump(records: list[EmbeddingRecord], path, checkpoint_hash: str):
    """Binary dump: per record (image_id u32, x u16, y u16, space u8,
    d float32 LE values), plus a text sidecar at ``path + '.txt'``. All
    records must share one space and dimension."""
    if not records:
        raise ValueError("nothing to dump")
    space = records[0].space
    d = records[0].vector.shape[0]
    space_code = SPACES.index(space)
    with open(path, "wb") as fh:
        for r in records:
            if r.space != space or r.vector.shape[0] != d:
                raise ValueError("mixed spaces or dimensions in one dump")
            fh.write(struct.pack("<IHHB", r.image_id, r.x, r.y, space_code))
            fh.write(r.vector.astype("<f4").tobytes())
    with open(f"{path}.txt", "w", encoding="utf-8") as fh:
        fh.write(f"count {len(records)}\ndim {d}\nspace {space}\ncheckpoint {checkpoint_hash}\n")


def read_embedding_dump(path) -> list[EmbeddingRecord]:
    with open(f"{path}.txt", "r", encoding="utf-8") as fh:
        meta = dict(line.strip().split(" ", 1) for line in fh if line.strip())
    count = int(meta["count"])
    d = int(meta["dim"])
    rec_size = 9 + 4 * d
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) != count * rec_size:
        raise ValueError(f"{path}: expected {count * rec_size} bytes, got {len(raw)}")
    out = []
    for i in range(count):
        off = i * rec_size
        image_id, x, y, space_code = struct.unpack_from("<IHHB", raw, off)
        vec = np.frombuffer(raw, dtype="<f4", count=d, offset=off + 9).astype(np.float64)
        out.append(EmbeddingRecord(image_id, x, y, vec, SPACES[space_code]))
    return out
