"""Discrete co-occurrence path: tokenize patches, count within-image pair
statistics, build the smoothed ratio matrix, and factorize it by gradient
descent on the weighted residual loss."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dataset_io import AugmentParams, ImageRecord, Patch, sample_patch_pair
from .errors import DataError, NumericalError
from .losses import DiscreteCooc, cooc_loss


@dataclass
class Tokenizer:
    """Maps canonical patches to a finite vocabulary.

    grid_hash: average-pool to q x q, quantize each value to 2^bits levels,
    pack the digits into an integer key (vocabulary realized sparsely).
    codebook: average-pool to q x q and assign the nearest centroid row
    (Euclidean; ties resolve to the lowest index).
    """

    mode: str = "grid_hash"
    q: int = 2
    bits: int = 2
    centroids: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in ("grid_hash", "codebook"):
            raise ValueError(f"unknown tokenizer mode {self.mode!r}")
        if self.q < 1:
            raise ValueError("q must be >= 1")
        if self.mode == "grid_hash" and self.bits < 1:
            raise ValueError("bits must be >= 1")
        if self.mode == "codebook":
            if self.centroids is None:
                raise ValueError("codebook mode needs centroids")
            self.centroids = np.asarray(self.centroids, dtype=np.float64)

    @property
    def fixed_vocab_size(self) -> int | None:
        """Codebook vocabularies are fixed up front; grid_hash is sparse."""
        return None if self.mode == "grid_hash" else self.centroids.shape[0]


def _pool_features(pixels: np.ndarray, q: int) -> np.ndarray:
    """Block-average (C, S, S) down to a flat (C*q*q,) feature vector."""
    c, h, w = pixels.shape
    if h < q or w < q:
        raise ValueError(f"patch {h}x{w} smaller than pooling grid {q}")
    ye = [h * i // q for i in range(q + 1)]
    xe = [w * i // q for i in range(q + 1)]
    out = np.empty((c, q, q))
    for i in range(q):
        for j in range(q):
            out[:, i, j] = pixels[:, ye[i] : ye[i + 1], xe[j] : xe[j + 1]].mean(axis=(1, 2))
    return out.ravel()


def tokenize(patch: Patch, tok: Tokenizer) -> int:
    feats = _pool_features(patch.pixels, tok.q)
    if tok.mode == "grid_hash":
        levels = 1 << tok.bits
        digits = np.minimum(np.floor(feats * levels).astype(np.int64), levels - 1)
        token = 0
        for d in digits[::-1]:
            token = token * levels + int(d)
        return token
    dists = ((tok.centroids - feats) ** 2).sum(axis=1)
    return int(np.argmin(dists))


@dataclass
class CoocStats:
    """Empirical symmetric pair counts over the realized vocabulary."""

    vocab: dict[int, int]
    pair_counts: dict[tuple[int, int], int]
    marginal_counts: np.ndarray
    total_pairs: int
    alpha: float

    @property
    def k(self) -> int:
        return len(self.marginal_counts)


def count_cooc(
    records: list[ImageRecord],
    src_size: int,
    canonical_size: int,
    pairs_per_image: int,
    tok: Tokenizer,
    rng: np.random.Generator,
    aug: AugmentParams | None = None,
    threads: int = 1,
) -> CoocStats:
    """Draw ``pairs_per_image`` patch pairs per image, tokenize both views,
    and count each unordered pair in both orders (so the statistics are
    symmetric and both marginals coincide).

    Augmentation applies before tokenization when ``aug`` is given. Each
    image uses its own RNG stream spawned up front, so results do not
    depend on the worker count.
    """
    if pairs_per_image < 1:
        raise ValueError("pairs_per_image must be >= 1")
    if not records:
        raise DataError("empty dataset: nothing to count")
    use_aug = aug if aug is not None else AugmentParams.identity()
    streams = rng.spawn(len(records))

    def image_tokens(idx: int) -> list[tuple[int, int]]:
        img = records[idx]
        r = streams[idx]
        out = []
        for _ in range(pairs_per_image):
            pa, pb = sample_patch_pair(img, src_size, canonical_size, use_aug, r)
            out.append((tokenize(pa, tok), tokenize(pb, tok)))
        return out

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_image = list(pool.map(image_tokens, range(len(records))))
    else:
        per_image = [image_tokens(i) for i in range(len(records))]

    fixed_k = tok.fixed_vocab_size
    if fixed_k is None:
        observed = sorted({t for pairs in per_image for ab in pairs for t in ab})
        vocab = {t: i for i, t in enumerate(observed)}
    else:
        vocab = {i: i for i in range(fixed_k)}
    k = len(vocab)
    pair_counts: dict[tuple[int, int], int] = {}
    marginals = np.zeros(k, dtype=np.int64)
    total = 0
    for pairs in per_image:
        for ta, tb in pairs:
            i, j = vocab[ta], vocab[tb]
            pair_counts[(i, j)] = pair_counts.get((i, j), 0) + 1
            pair_counts[(j, i)] = pair_counts.get((j, i), 0) + 1
            marginals[i] += 1
            marginals[j] += 1
            total += 2
    alpha = 0.0 if np.all(marginals > 0) else 1.0
    return CoocStats(vocab, pair_counts, marginals, total, alpha)


def write_cooc_stats(stats: CoocStats, path):
    """Diff-friendly text format: header lines then sorted 'i j count'."""
    lines = [f"K {stats.k}", f"total_pairs {stats.total_pairs}", f"alpha {stats.alpha!r}"]
    for (i, j), c in sorted(stats.pair_counts.items()):
        lines.append(f"{i} {j} {c}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_cooc_stats(path) -> CoocStats:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    try:
        k = int(lines[0].split()[1])
        total = int(lines[1].split()[1])
        alpha = float(lines[2].split()[1])
    except (IndexError, ValueError) as exc:
        raise DataError(f"{path}: malformed co-occurrence stats header") from exc
    pair_counts: dict[tuple[int, int], int] = {}
    marginals = np.zeros(k, dtype=np.int64)
    for ln in lines[3:]:
        parts = ln.split()
        if len(parts) != 3:
            raise DataError(f"{path}: malformed count line {ln!r}")
        i, j, c = int(parts[0]), int(parts[1]), int(parts[2])
        if not (0 <= i < k and 0 <= j < k):
            raise DataError(f"{path}: token index out of range in {ln!r}")
        pair_counts[(i, j)] = c
        marginals[i] += c
    if sum(pair_counts.values()) != total:
        raise DataError(f"{path}: counts do not sum to total_pairs")
    return CoocStats({i: i for i in range(k)}, pair_counts, marginals, total, alpha)


def ratio_matrix(stats: CoocStats) -> DiscreteCooc:
    """Smoothed empirical joint: (count + alpha)/(total + alpha K^2), with
    marginals recomputed from the smoothed joint."""
    if stats.total_pairs <= 0:
        raise DataError("empty co-occurrence statistics")
    k = stats.k
    joint = np.full((k, k), stats.alpha, dtype=np.float64)
    for (i, j), c in stats.pair_counts.items():
        joint[i, j] += c
    joint /= stats.total_pairs + stats.alpha * k * k
    return DiscreteCooc.from_joint(joint)


def factorize(
    dc: DiscreteCooc,
    d: int,
    w: float,
    steps: int,
    lr: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, list[float]]:
    """Full-batch gradient descent on the co-occurrence loss from a Gaussian
    init (sigma = 0.1/sqrt(d)).

    The recorded loss trace is non-increasing: a step that would increase
    the loss is retried with a halved learning rate. Returns (E, trace)
    where trace[0] is the loss at the initialization and one entry follows
    per completed step (descent may stop early once the rate underflows).
    """
    dc.validate()
    if dc.k > 4096:
        raise ValueError(f"K={dc.k} too large for full-gradient descent (limit 4096)")
    if d < 1 or steps < 0 or lr <= 0:
        raise ValueError("need d >= 1, steps >= 0, lr > 0")
    e = rng.normal(0.0, 0.1 / np.sqrt(d), size=(dc.k, d))
    lv, grad = cooc_loss(e, dc, w)
    if not np.isfinite(lv.total):
        raise NumericalError("non-finite loss at step 0")
    trace = [lv.total]
    for step in range(steps):
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite gradient at step {step}")
        accepted = False
        nonfinite = False
        while lr >= 1e-20:
            e_new = e - lr * grad
            lv_new, grad_new = cooc_loss(e_new, dc, w)
            nonfinite = not np.isfinite(lv_new.total)
            if not nonfinite and lv_new.total <= trace[-1]:
                accepted = True
                break
            lr *= 0.5
        if not accepted:
            if nonfinite:
                raise NumericalError(f"diverged (non-finite loss) at step {step}")
            break  # rate underflow: converged to numerical noise
        e, grad = e_new, grad_new
        trace.append(lv_new.total)
    return e, trace
