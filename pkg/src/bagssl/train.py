"""Patch-pair pretraining loop for the encoder + projector."""

from __future__ import annotations

import os

import numpy as np

from . import dataset_io, losses
from .config import RunConfig
from .errors import DataError, NumericalError
from .nn.checkpoint import save_model
from .nn.model import Model
from .nn.optim import OptimState


def load_dataset(cfg: RunConfig, split: str = "train") -> list[dataset_io.ImageRecord]:
    """Load the configured dataset split, honoring the limit settings."""
    v = cfg.values
    if cfg.dataset_name == "cifar10":
        path = v["dataset.path"] if split == "train" else v["dataset.test_path"]
        if not path:
            raise DataError(f"no {split} path configured for cifar10")
        records = dataset_io.load_cifar10(path)
    else:
        key = "dataset.images" if split == "train" else "dataset.test_images"
        lab_key = "dataset.labels" if split == "train" else "dataset.test_labels"
        if not (v[key] and v[lab_key]):
            raise DataError(f"no {split} image/label paths configured for idx")
        records = dataset_io.load_idx(v[key], v[lab_key])
    limit = v["dataset.limit"] if split == "train" else v["dataset.test_limit"]
    if limit and limit < len(records):
        records = records[:limit]
    return records


def make_loss(cfg: RunConfig):
    if cfg.loss_kind == "spectral":
        return lambda z1, z2: losses.spectral_loss(z1, z2, lam=cfg.loss_lambda)
    if cfg.loss_kind == "vicreg":
        return lambda z1, z2: losses.vicreg_loss(z1, z2, cfg.loss_c_var, cfg.loss_c_inv, cfg.loss_c_cov)
    return lambda z1, z2: losses.info_nce(z1, z2, temperature=cfg.loss_temperature)


def sample_view_pair(img, cfg: RunConfig, aug, rng):
    """One positive pair: fixed-scale patches or two multi-scale crops."""
    if cfg.patch_mode == "fixed":
        return dataset_io.sample_patch_pair(img, cfg.patch_src_size, cfg.patch_canonical, aug, rng)
    p1 = dataset_io.random_resized_crop(img, cfg.patch_min_scale, cfg.patch_max_scale,
                                        cfg.patch_canonical, rng)
    p2 = dataset_io.random_resized_crop(img, cfg.patch_min_scale, cfg.patch_max_scale,
                                        cfg.patch_canonical, rng)
    return dataset_io.color_augment(p1, aug, rng), dataset_io.color_augment(p2, aug, rng)


def pretrain(records, cfg: RunConfig, out_dir) -> str:
    """Train on patch pairs, writing per-epoch checkpoints, a final
    checkpoint, and a loss-curve CSV. Returns the final checkpoint path."""
    if len(records) < 2:
        raise DataError("pretraining needs at least 2 images")
    channels = records[0].channels
    model = Model(
        (channels, cfg.patch_canonical, cfg.patch_canonical),
        cfg.model_encoder,
        cfg.model_projector,
        seed=cfg.seed,
    )
    n = len(records)
    batch = min(cfg.optim_batch_size, n)
    steps_per_epoch = max(n // batch, 1)
    opt = OptimState(
        cfg.optim_lr,
        warmup_steps=cfg.optim_warmup_epochs * steps_per_epoch,
        total_steps=cfg.optim_epochs * steps_per_epoch,
        momentum=cfg.optim_momentum,
        weight_decay=cfg.optim_weight_decay,
    )
    loss_fn = make_loss(cfg)
    aug = cfg.augment_params()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    params = model.parameters()
    os.makedirs(out_dir, exist_ok=True)
    curve = []
    step = 0
    for epoch in range(cfg.optim_epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for b0 in range(0, steps_per_epoch * batch, batch):
            idx = order[b0 : b0 + batch]
            if idx.size < 2:
                continue
            views1 = []
            views2 = []
            for i in idx:
                p1, p2 = sample_view_pair(records[int(i)], cfg, aug, rng)
                views1.append(p1.pixels)
                views2.append(p2.pixels)
            x1 = np.stack(views1)
            x2 = np.stack(views2)
            _, z1, tape1 = model.forward(x1)
            _, z2, tape2 = model.forward(x2)
            lv, dz1, dz2 = loss_fn(z1, z2)
            if not np.isfinite(lv.total):
                raise NumericalError(f"non-finite loss at epoch {epoch} step {step}")
            model.backward(tape1, dz1)
            model.backward(tape2, dz2)
            opt.step(params, step)
            step += 1
            epoch_losses.append(lv.total)
        curve.append((epoch, float(np.mean(epoch_losses)), opt.lr_at(step)))
        save_model(os.path.join(out_dir, f"checkpoint_epoch_{epoch + 1:03d}.bssl"), model, step)
    final_path = os.path.join(out_dir, "checkpoint_final.bssl")
    save_model(final_path, model, step)
    with open(os.path.join(out_dir, "loss_curve.csv"), "w", encoding="utf-8") as fh:
        fh.write("epoch,loss,lr\n")
        for epoch, loss, lr in curve:
            fh.write(f"{epoch},{loss!r},{lr!r}\n")
    return final_path
