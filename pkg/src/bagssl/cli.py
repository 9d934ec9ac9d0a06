"""Command-line front end: pretrain, cooc, factorize, verify, eval, figures.

Every command resolves its configuration up front, writes the effective
config next to its artifacts, and is byte-reproducible for a fixed
config + seed (including across --threads settings).

Exit codes: 0 success, 1 usage/config, 2 data, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import re
import sys

import numpy as np

from . import aggregate_eval as agg
from . import cooc as cooc_mod
from . import verify as verify_mod
from .config import effective_text, load_config
from .dataset_io import extract_patch
from .errors import ConfigError, DataError, NumericalError
from .nn.checkpoint import load_model, save_table
from .train import load_dataset, pretrain


def _write_effective(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "effective.cfg"), "w", encoding="utf-8") as fh:
        fh.write(effective_text(cfg))


def _overrides(args) -> dict:
    return {"seed": args.seed, "out": args.out, "threads": args.threads}


def _out_dir(cfg, args):
    out = args.out or cfg.out
    if not out:
        raise ConfigError("no output directory: set `out` in the config or pass --out")
    return out


def _central_crop_batch(model, records, canonical):
    """Largest centered square of every record, embedded as one batch (the
    standardize layer has batch statistics, so the split shares a batch)."""
    crops = []
    for img in records:
        side = min(img.width, img.height)
        x = (img.width - side) // 2
        y = (img.height - side) // 2
        crops.append(extract_patch(img, x, y, side, canonical).pixels)
    h, z, _ = model.forward(np.stack(crops))
    return h, z


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    out = _out_dir(cfg, args)
    records = load_dataset(cfg, "train")
    _write_effective(cfg, out)
    final = pretrain(records, cfg, out)
    print(f"wrote {final}")
    return 0


def cmd_cooc(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    out = _out_dir(cfg, args)
    records = load_dataset(cfg, "train")
    tok = cooc_mod.Tokenizer(mode=cfg.cooc_mode, q=cfg.cooc_q, bits=cfg.cooc_bits)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    aug = cfg.augment_params() if cfg.cooc_augment else None
    stats = cooc_mod.count_cooc(
        records,
        cfg.patch_src_size,
        cfg.patch_canonical,
        cfg.cooc_pairs_per_image,
        tok,
        rng,
        aug=aug,
        threads=cfg.threads,
    )
    _write_effective(cfg, out)
    path = os.path.join(out, "cooc_stats.txt")
    cooc_mod.write_cooc_stats(stats, path)
    print(f"wrote {path} (K={stats.k}, total_pairs={stats.total_pairs})")
    return 0


def cmd_factorize(args) -> int:
    if args.d < 1:
        raise ConfigError(f"--d must be >= 1, got {args.d}")
    os.makedirs(args.out, exist_ok=True)
    stats = cooc_mod.read_cooc_stats(args.stats)
    dc = cooc_mod.ratio_matrix(stats)
    lr = args.lr if args.lr is not None else 0.05 * stats.k * stats.k
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 3]))
    table, trace = cooc_mod.factorize(dc, args.d, args.w, args.steps, lr, rng)
    table_path = os.path.join(args.out, "embedding_table.bssl")
    save_table(table_path, table, step=len(trace) - 1, seed=args.seed)
    report_path = os.path.join(args.out, "factorize_report.txt")
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(f"K {stats.k}\nd {args.d}\nw {args.w!r}\nlambda {args.w / 2.0!r}\n")
        fh.write(f"steps_run {len(trace) - 1}\ninitial_loss {trace[0]!r}\nfinal_loss {trace[-1]!r}\n")
    print(f"wrote {table_path} (final loss {trace[-1]:.3e})")
    return 0


def cmd_verify(args) -> int:
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 4]))
    if args.which == "prop1":
        report, ok = verify_mod.run_prop1(args.instances, args.trials, rng)
        for key in ("instances", "trials", "max_gap_deviation", "max_grad_deviation", "tolerance"):
            print(f"prop1.{key}={report[key]!r}")
    elif args.which == "duality":
        report, ok = verify_mod.run_duality(args.count, args.max_side, rng)
        for key, val in report.items():
            print(f"duality.{key}={val!r}")
    else:
        report, ok = verify_mod.run_gradcheck(args.trials, rng, corrupt=args.corrupt)
        for name in sorted(report["worst"]):
            print(f"gradcheck.{name}={report['worst'][name]!r}")
        print(f"gradcheck.tolerance={report['tolerance']!r}")
        if report["failures"]:
            print(f"gradcheck.failures={','.join(report['failures'])}")
    print(f"verify.{args.which}.pass={'true' if ok else 'false'}")
    return 0 if ok else 3


_PROTOCOL_RE = re.compile(r"^(central|bag\((\d+)\)|local\((\d+),(\d+),(\d+)\))$")
_CLASSIFIER_RE = re.compile(r"^(knn\((\d+)\)|linear)$")


def _pool_indices(rng, pool_size, n):
    return np.sort(rng.choice(pool_size, size=n, replace=(n > pool_size)))


def _bag_representations(model, records, cfg, src_size, pool_stride, n, seed, threads):
    pools = agg.embed_grid_pools(
        model, records, src_size, cfg.patch_canonical, pool_stride, threads=threads
    )
    reps = []
    for idx, pool in enumerate(pools):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 5, idx, n]))
        reps.append(pool[_pool_indices(rng, pool.shape[0], n)].mean(axis=0))
    return np.stack(reps)


def _grid_stride_for(records, src_size, grid: int) -> int:
    w = records[0].width
    h = records[0].height
    for img in records:
        if img.width != w or img.height != h:
            raise DataError("grid protocols need uniformly sized images")
    if grid == 1:
        return max(w - src_size, 1)
    for span in (w - src_size, h - src_size):
        if span < 0 or span % (grid - 1) != 0:
            raise ConfigError(
                f"cannot place a {grid}x{grid} grid of {src_size}px patches on {w}x{h} images"
            )
    return (w - src_size) // (grid - 1)


def _local_representations(model, records, cfg, src_size, grid, window, stride, threads):
    gstride = _grid_stride_for(records, src_size, grid)

    def one(img):
        recs = agg.embed_patches(
            model, img, src_size, cfg.patch_canonical, grid_stride=gstride
        )["embedding"]
        if len(recs) != grid * grid:
            raise ConfigError(f"grid produced {len(recs)} cells, expected {grid * grid}")
        return agg.local_aggregate(recs, window, stride).vector

    from concurrent.futures import ThreadPoolExecutor

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return np.stack(list(pool.map(one, records)))
    return np.stack([one(img) for img in records])


def cmd_eval(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    out = _out_dir(cfg, args)
    m = _PROTOCOL_RE.match(args.protocol)
    if not m:
        raise ConfigError(f"bad protocol {args.protocol!r} (central | bag(N) | local(G,W,S))")
    c = _CLASSIFIER_RE.match(args.classifier)
    if not c:
        raise ConfigError(f"bad classifier {args.classifier!r} (knn(K) | linear)")
    model, _ = load_model(args.checkpoint)
    train_recs = load_dataset(cfg, "train")
    test_recs = load_dataset(cfg, "test")
    y_train = np.array([r.label for r in train_recs])
    y_test = np.array([r.label for r in test_recs])
    src_size = args.src_size or cfg.patch_src_size
    note = ""
    if args.protocol == "central":
        x_train, _ = _central_crop_batch(model, train_recs, cfg.patch_canonical)
        x_test, _ = _central_crop_batch(model, test_recs, cfg.patch_canonical)
        if cfg.patch_mode == "fixed":
            note = "central-on-patch-model"
    elif m.group(2) is not None:
        n = int(m.group(2))
        if n < 1:
            raise ConfigError("bag(N) needs N >= 1")
        if args.pool_grid:
            pool_stride = _grid_stride_for(train_recs, src_size, args.pool_grid)
        else:
            pool_stride = args.pool_stride
        x_train = _bag_representations(
            model, train_recs, cfg, src_size, pool_stride, n, cfg.seed, cfg.threads
        )
        x_test = _bag_representations(
            model, test_recs, cfg, src_size, pool_stride, n, cfg.seed, cfg.threads
        )
    else:
        grid, window, stride = int(m.group(3)), int(m.group(4)), int(m.group(5))
        x_train = _local_representations(
            model, train_recs, cfg, src_size, grid, window, stride, cfg.threads
        )
        x_test = _local_representations(
            model, test_recs, cfg, src_size, grid, window, stride, cfg.threads
        )
    if c.group(2) is not None:
        acc = agg.knn_eval(x_train, y_train, x_test, y_test, int(c.group(2)))
    else:
        acc = agg.linear_probe(
            x_train, y_train, x_test, y_test,
            epochs=args.probe_epochs, lr=args.probe_lr, l2=args.probe_l2,
        )
    _write_effective(cfg, out)
    csv_path = os.path.join(out, "eval.csv")
    fresh = not os.path.exists(csv_path)
    with open(csv_path, "a", encoding="utf-8") as fh:
        if fresh:
            fh.write("protocol,classifier,accuracy,seed,note\n")
        fh.write(f"{args.protocol},{args.classifier},{acc!r},{cfg.seed},{note}\n")
    print(f"{args.protocol} {args.classifier} accuracy={acc:.4f}{' [' + note + ']' if note else ''}")
    return 0


def _figure_heatmap(args, cfg, model, records, out):
    img = records[args.image_index]
    basename = f"heatmap_img{img.id:05d}_x{args.qx}_y{args.qy}"
    src = args.src_size or cfg.patch_src_size
    result = agg.heatmap(
        model, img, (args.qx, args.qy), src, cfg.patch_canonical, args.stride, out, basename
    )
    for path in result["paths"].values():
        print(f"wrote {path}")


def _figure_neighbors(args, cfg, model, records, out):
    if args.k < 1:
        raise ConfigError("--k must be >= 1")
    src = args.src_size or cfg.patch_src_size
    corpus_imgs = records[: args.corpus_images] if args.corpus_images else records
    space = args.space
    corpus = []
    for img in corpus_imgs:
        corpus.extend(
            agg.embed_patches(
                model, img, src, cfg.patch_canonical, grid_stride=args.stride, spaces=(space,)
            )[space]
        )
    img = records[args.image_index]
    query = next(
        (r for r in corpus if r.image_id == img.id and r.x == args.qx and r.y == args.qy), None
    )
    if query is None:
        raise ConfigError(
            f"query ({args.qx},{args.qy}) of image {img.id} is not in the corpus grid"
        )
    by_id = {r.id: r for r in records}

    def patch_pixels(image_id, x, y):
        return extract_patch(by_id[image_id], x, y, src, cfg.patch_canonical).pixels

    labels = {r.id: r.label for r in records}
    basename = f"neighbors_img{img.id:05d}_x{args.qx}_y{args.qy}_{space}"
    result = agg.patch_knn_dump(query, corpus, labels, args.k, out, basename, patch_pixels)
    print(f"wrote {result['manifest']}")
    if result["tile"]:
        print(f"wrote {result['tile']}")


def _figure_convergence(args, cfg, model, records, out):
    ns = sorted(int(v) for v in args.ns.split(","))
    if any(n < 1 for n in ns):
        raise ConfigError("convergence Ns must be >= 1")
    imgs = records[: args.images] if args.images else records
    src = args.src_size or cfg.patch_src_size
    pools = agg.embed_grid_pools(
        model, imgs, src, cfg.patch_canonical, args.stride, threads=cfg.threads
    )
    pool_size = min(p.shape[0] for p in pools)
    if max(ns) > pool_size:
        raise ConfigError(f"N={max(ns)} exceeds pool of {pool_size} grid patches")
    references = None
    if args.reference == "central":
        if cfg.patch_mode == "fixed":
            raise ConfigError(
                "reference=central needs a multi-scale-trained model (patch.mode=fixed set)"
            )
        h, _ = _central_crop_batch(model, imgs, cfg.patch_canonical)
        references = [h[i] for i in range(len(imgs))]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 6]))
    summary, _ = agg.convergence_curve(
        pools, ns + [pool_size], rng, trials=args.trials, references=references
    )
    csv_path = os.path.join(out, "convergence.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("n,median_cosine,mean_cosine\n")
        for row in summary:
            label = "all" if row["n"] == pool_size else row["n"]
            fh.write(f"{label},{row['median']!r},{row['mean']!r}\n")
    print(f"wrote {csv_path}")


def cmd_figures(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    out = _out_dir(cfg, args)
    model, _ = load_model(args.checkpoint)
    records = load_dataset(cfg, args.split)
    _write_effective(cfg, out)
    os.makedirs(out, exist_ok=True)
    if args.which == "heatmap":
        _figure_heatmap(args, cfg, model, records, out)
    elif args.which == "neighbors":
        _figure_neighbors(args, cfg, model, records, out)
    else:
        _figure_convergence(args, cfg, model, records, out)
    return 0


def checkpoint_sha256(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bagssl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="key=value config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument("--threads", type=int, default=None, help="worker count (results identical for any N)")

    p = sub.add_parser("pretrain", help="train encoder+projector on patch pairs")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("cooc", help="count patch-pair co-occurrence statistics")
    common(p)
    p.set_defaults(func=cmd_cooc)

    p = sub.add_parser("factorize", help="factorize a co-occurrence ratio matrix")
    p.add_argument("--stats", required=True, help="cooc_stats.txt from the cooc command")
    p.add_argument("--d", type=int, required=True, help="embedding dimension")
    p.add_argument("--w", type=float, default=2.0, help="inner-product weight (lambda = w/2)")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=None, help="default scales as 0.05*K^2")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_factorize)

    p = sub.add_parser("verify", help="run the numerical verifiers")
    p.add_argument("which", choices=("prop1", "duality", "gradcheck"))
    p.add_argument("--instances", type=int, default=20, help="prop1: random distributions")
    p.add_argument("--trials", type=int, default=10, help="prop1: tables per instance; gradcheck: total checks")
    p.add_argument("--count", type=int, default=50, help="duality: number of matrices")
    p.add_argument("--max-side", type=int, default=40, help="duality: max N and d")
    p.add_argument("--corrupt", default=None, help="gradcheck negative-control hook (layer kind)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("eval", help="classifier evaluation of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--protocol", required=True, help="central | bag(N) | local(G,W,S)")
    p.add_argument("--classifier", required=True, help="knn(K) | linear")
    p.add_argument("--src-size", type=int, default=None, help="override patch.src_size")
    p.add_argument("--pool-stride", type=int, default=3, help="bag(N): grid stride of the patch pool")
    p.add_argument("--pool-grid", type=int, default=None, help="bag(N): use an exact GxG pool instead")
    p.add_argument("--probe-epochs", type=int, default=300)
    p.add_argument("--probe-lr", type=float, default=0.5)
    p.add_argument("--probe-l2", type=float, default=1e-4)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("figures", help="heatmap / neighbors / convergence artifacts")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--which", required=True, choices=("heatmap", "neighbors", "convergence"))
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--image-index", type=int, default=0)
    p.add_argument("--qx", type=int, default=0)
    p.add_argument("--qy", type=int, default=0)
    p.add_argument("--k", type=int, default=16, help="neighbors: list length")
    p.add_argument("--space", default="embedding", choices=("embedding", "projection"))
    p.add_argument("--stride", type=int, default=3, help="grid stride for patch extraction")
    p.add_argument("--src-size", type=int, default=None, help="override patch.src_size")
    p.add_argument("--corpus-images", type=int, default=64, help="neighbors: corpus size")
    p.add_argument("--ns", default="1,2,4,8,16", help="convergence: comma-separated N values")
    p.add_argument("--trials", type=int, default=8, help="convergence: draws per image per N")
    p.add_argument("--images", type=int, default=128, help="convergence: images to use")
    p.add_argument("--reference", default="all_patches", choices=("all_patches", "central"))
    p.set_defaults(func=cmd_figures)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses exit code 2 for usage errors; remap to 1.
        return 1 if exc.code == 2 else (exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
