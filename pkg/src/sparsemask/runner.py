"""Experiment pipelines behind the CLI subcommands.

Every run writes into its output directory: the resolved config, a
metrics CSV, checkpoints, and (for pruning runs) the mask-learning
history, a per-layer sparsity CSV, and rendered figures.
"""

from __future__ import annotations

import csv
import itertools
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, restore_model, save_checkpoint
from .config import ConfigError, RunConfig, write_resolved
from .data import BatchPlan, LabeledDataset, batches, derive_seed, load_idx, verify_checksum
from .metrics import MetricsWriter
from .nn import Mode, StateError, build_model
from .optim import LrSchedule, SgdConfig
from .pruning import (
    PruneTimeout,
    espn_finetune,
    espn_mask_learn,
    espn_rewind,
    magnitude_prune_lt,
    snip_prune,
)
from .report import report_layers, shrinkage_figure, write_history_csv
from .tensor import Tensor
from .train import evaluate, train

_TRAIN_STREAM = 1
_SNIP_STREAM = 2


def load_datasets(cfg: RunConfig) -> tuple[LabeledDataset, LabeledDataset]:
    """Load train/test IDX pairs, verifying any configured checksums."""
    paths = {key: cfg.dataset.resolved(key) for key in
             ("train_images", "train_labels", "test_images", "test_labels")}
    for key, path in paths.items():
        expected = cfg.dataset.checksums.get(key)
        if expected:
            verify_checksum(path, expected)
    train_ds = load_idx(paths["train_images"], paths["train_labels"])
    test_ds = load_idx(paths["test_images"], paths["test_labels"])
    return train_ds, test_ds


def check_batch_size(cfg: RunConfig, train_ds: LabeledDataset) -> None:
    biggest = max(cfg.batch_size, cfg.effective_mask_batch)
    if biggest > len(train_ds):
        raise ConfigError(
            f"batch_size {biggest} exceeds training set size {len(train_ds)}"
        )


def adapt_dataset(ds: LabeledDataset, model) -> LabeledDataset:
    """Reshape samples to the model's input shape when sizes agree."""
    want = model.input_shape
    have = ds.images.shape[1:]
    if have == want:
        return ds
    if int(np.prod(have)) != int(np.prod(want)):
        raise StateError(f"dataset samples {have} incompatible with model input {want}")
    images = Tensor(ds.images.data.reshape(ds.images.shape[0], *want))
    return LabeledDataset(images, ds.labels)


def _schedules(cfg: RunConfig):
    s = cfg.schedule
    std_schedule = LrSchedule(s.lr, tuple(s.milestones), s.gamma)
    std_cfg = SgdConfig(lr=s.lr, momentum=s.momentum, weight_decay=s.weight_decay)
    ft_schedule = LrSchedule(s.finetune_lr, tuple(s.finetune_milestones), s.gamma)
    ft_cfg = SgdConfig(lr=s.finetune_lr, momentum=s.momentum, weight_decay=s.weight_decay)
    return std_schedule, std_cfg, ft_schedule, ft_cfg


def _epoch_logger(mw: MetricsWriter, model, test_ds, cfg: RunConfig, t0: float,
                  out_dir: Path | None = None, snapshot_epochs: tuple = (), seed: int = 0):
    """on_epoch hook: per-epoch train row, periodic eval row, snapshots."""

    def on_epoch(epoch, mean_loss, opt):
        mw.append(
            epoch=epoch,
            split="train",
            loss=f"{mean_loss:.6f}",
            lr=f"{opt.groups[0].lr:g}",
            wall_time_s=f"{time.perf_counter() - t0:.2f}",
        )
        if (epoch + 1) % cfg.eval_every == 0:
            loss, acc = evaluate(model, test_ds)
            mw.append(
                epoch=epoch,
                split="test",
                loss=f"{loss:.6f}",
                accuracy=f"{acc:.6f}",
                wall_time_s=f"{time.perf_counter() - t0:.2f}",
            )
        if out_dir is not None and epoch + 1 in snapshot_epochs:
            save_checkpoint(
                out_dir / f"epoch_{epoch + 1:03d}.ckpt",
                model,
                epoch=epoch + 1,
                seed=seed,
                velocities=opt.state(),
            )

    return on_epoch


def _write_summary(out_dir: Path, summary: dict) -> None:
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def cmd_train(cfg: RunConfig) -> dict:
    """Dense training with milestone schedule, snapshots, and final eval."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    model = build_model(cfg.model, seed=cfg.seed)
    train_raw, test_raw = load_datasets(cfg)
    train_ds, test_ds = adapt_dataset(train_raw, model), adapt_dataset(test_raw, model)
    check_batch_size(cfg, train_ds)
    std_schedule, std_cfg, _, _ = _schedules(cfg)
    plan = BatchPlan(cfg.batch_size, derive_seed(cfg.seed, _TRAIN_STREAM))
    t0 = time.perf_counter()
    with MetricsWriter(out / "metrics.csv", cfg.run_id) as mw:
        on_epoch = _epoch_logger(
            mw, model, test_ds, cfg, t0,
            out_dir=out, snapshot_epochs=tuple(cfg.snapshot_epochs), seed=cfg.seed,
        )
        train(
            model,
            train_ds,
            epochs=cfg.schedule.train_epochs,
            plan=plan,
            cfg=std_cfg,
            schedule=std_schedule,
            on_epoch=on_epoch,
        )
    final = save_checkpoint(out / "final.ckpt", model, epoch=cfg.schedule.train_epochs, seed=cfg.seed)
    loss, acc = evaluate(model, test_ds)
    summary = {
        "method": cfg.method,
        "model": cfg.model,
        "seed": cfg.seed,
        "epochs": cfg.schedule.train_epochs,
        "test_loss": loss,
        "test_accuracy": acc,
        "checkpoint": str(final),
        "wall_time_s": time.perf_counter() - t0,
    }
    _write_summary(out, summary)
    return summary


def _require_checkpoint(path: str, what: str):
    if not path:
        raise StateError(f"method requires checkpoints.{what}")
    if not Path(path).exists():
        raise StateError(f"checkpoints.{what} not found: {path}")
    return load_checkpoint(path)


def cmd_prune(cfg: RunConfig) -> dict:
    """Run the configured pruning pipeline end to end."""
    if cfg.method == "dense":
        raise ConfigError("method 'dense' is trained with the train command")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    std_schedule, std_cfg, ft_schedule, ft_cfg = _schedules(cfg)
    t0 = time.perf_counter()
    history: list[tuple[int, int, float]] = []

    def on_check(step, n_active, loss):
        history.append((step, n_active, loss))

    with MetricsWriter(out / "metrics.csv", cfg.run_id) as mw:
        try:
            if cfg.method == "espn-finetune":
                ckpt = _require_checkpoint(cfg.checkpoints.pretrained, "pretrained")
                model = restore_model(ckpt)
                train_ds, test_ds = (adapt_dataset(d, model) for d in load_datasets(cfg))
                check_batch_size(cfg, train_ds)
                on_epoch = _epoch_logger(mw, model, test_ds, cfg, t0)
                state, summary = espn_finetune(
                    model, train_ds, test_ds, cfg.prune,
                    batch_size=cfg.effective_mask_batch,
                    seed=cfg.seed,
                    finetune_epochs=cfg.schedule.finetune_epochs,
                    finetune_cfg=ft_cfg,
                    finetune_schedule=ft_schedule,
                    on_epoch=on_epoch,
                    on_check=on_check,
                )
            elif cfg.method == "espn-rewind":
                if cfg.schedule.warmup_epochs >= cfg.schedule.train_epochs:
                    raise ConfigError(
                        f"warmup_epochs {cfg.schedule.warmup_epochs} must be below "
                        f"train_epochs {cfg.schedule.train_epochs}"
                    )
                model = build_model(cfg.model, seed=cfg.seed)
                train_ds, test_ds = (adapt_dataset(d, model) for d in load_datasets(cfg))
                check_batch_size(cfg, train_ds)
                on_epoch = _epoch_logger(mw, model, test_ds, cfg, t0)
                state, summary = espn_rewind(
                    model, train_ds, test_ds, cfg.prune,
                    batch_size=cfg.effective_mask_batch,
                    seed=cfg.seed,
                    warmup_epochs=cfg.schedule.warmup_epochs,
                    total_epochs=cfg.schedule.train_epochs,
                    train_cfg=std_cfg,
                    train_schedule=std_schedule,
                    on_epoch=on_epoch,
                    on_check=on_check,
                )
            elif cfg.method == "snip":
                model = build_model(cfg.model, seed=cfg.seed)
                train_ds, test_ds = (adapt_dataset(d, model) for d in load_datasets(cfg))
                check_batch_size(cfg, train_ds)
                snip_plan = BatchPlan(cfg.effective_mask_batch, derive_seed(cfg.seed, _SNIP_STREAM))
                batch = next(iter(batches(train_ds, snip_plan, epoch=0)))
                k = snip_prune(model, batch, cfg.prune.ratio)
                on_epoch = _epoch_logger(mw, model, test_ds, cfg, t0)
                plan = BatchPlan(cfg.batch_size, derive_seed(cfg.seed, _TRAIN_STREAM))
                train(
                    model, train_ds,
                    epochs=cfg.schedule.train_epochs,
                    plan=plan, cfg=std_cfg, schedule=std_schedule, on_epoch=on_epoch,
                )
                loss, acc = evaluate(model, test_ds)
                state = None
                summary = {
                    "sparsity": 1.0 - k / model.maskable_count(),
                    "n_active": k,
                    "mask_steps": 1,
                    "test_loss": loss,
                    "test_accuracy": acc,
                }
            elif cfg.method == "magnitude-lt":
                trained = _require_checkpoint(cfg.checkpoints.trained, "trained")
                early = _require_checkpoint(cfg.checkpoints.early, "early")
                model = restore_model(trained)
                train_ds, test_ds = (adapt_dataset(d, model) for d in load_datasets(cfg))
                check_batch_size(cfg, train_ds)
                k = magnitude_prune_lt(model, early.tensors, cfg.prune.ratio)
                remaining = cfg.schedule.train_epochs - early.epoch
                if remaining < 1:
                    raise ConfigError(
                        f"train_epochs {cfg.schedule.train_epochs} leaves no budget after "
                        f"rewind epoch {early.epoch}"
                    )
                on_epoch = _epoch_logger(mw, model, test_ds, cfg, t0)
                plan = BatchPlan(cfg.batch_size, derive_seed(cfg.seed, _TRAIN_STREAM))
                train(
                    model, train_ds,
                    epochs=remaining, plan=plan, cfg=std_cfg, schedule=std_schedule,
                    start_epoch=early.epoch, on_epoch=on_epoch,
                )
                loss, acc = evaluate(model, test_ds)
                state = None
                summary = {
                    "sparsity": 1.0 - k / model.maskable_count(),
                    "n_active": k,
                    "mask_steps": 0,
                    "test_loss": loss,
                    "test_accuracy": acc,
                }
            else:  # pragma: no cover - guarded by config validation
                raise ConfigError(f"unknown method {cfg.method!r}")
        except PruneTimeout as exc:
            write_history_csv(exc.state.history, out / "history.csv")
            raise

        if history:
            write_history_csv(history, out / "history.csv")
        rows = report_layers(model, out)
        ckpt_path = save_checkpoint(
            out / "pruned.ckpt", model, epoch=cfg.schedule.train_epochs, seed=cfg.seed
        )
        mw.append(
            split="test",
            loss=f"{summary['test_loss']:.6f}",
            accuracy=f"{summary['test_accuracy']:.6f}",
            n_active=summary["n_active"],
            sparsity_pct=f"{100.0 * summary['sparsity']:.4f}",
            wall_time_s=f"{time.perf_counter() - t0:.2f}",
        )
    summary.update(
        method=cfg.method,
        model=cfg.model,
        seed=cfg.seed,
        ratio=cfg.prune.ratio,
        checkpoint=str(ckpt_path),
        layers=[
            {"layer": name, "total": total, "nonzero": nz, "remaining_pct": pct}
            for name, total, nz, pct in rows
        ],
        wall_time_s=time.perf_counter() - t0,
    )
    _write_summary(out, summary)
    return summary


def cmd_eval(checkpoint_path: str, cfg: RunConfig, split: str = "test") -> dict:
    """Deterministic full-split evaluation of a checkpoint; no mutation."""
    ckpt = load_checkpoint(checkpoint_path)
    model = restore_model(ckpt)
    train_ds, test_ds = load_datasets(cfg)
    ds = adapt_dataset(train_ds if split == "train" else test_ds, model)
    loss, acc = evaluate(model, ds)
    return {
        "checkpoint": str(checkpoint_path),
        "split": split,
        "n": len(ds),
        "loss": loss,
        "accuracy": acc,
    }


def cmd_sweep(cfg: RunConfig) -> dict:
    """Mask-shrinkage grid over (alpha, mask_lr) cells.

    Each cell restores the same starting checkpoint, derives its own
    seed from (seed, cell_index), and records the (step, N_c) history.
    Timeouts are recorded and the sweep continues.
    """
    if cfg.sweep is None:
        raise ConfigError("sweep command requires a [sweep] section")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    base = _require_checkpoint(cfg.checkpoints.pretrained, "pretrained")
    probe = restore_model(base)
    train_ds, _ = load_datasets(cfg)
    train_ds = adapt_dataset(train_ds, probe)
    check_batch_size(cfg, train_ds)

    cells: dict[tuple[float, float], list] = {}
    rows = []
    for idx, (alpha, lr) in enumerate(itertools.product(cfg.sweep.alphas, cfg.sweep.mask_lrs)):
        model = restore_model(base)
        model.start_mask_learning()
        cell_cfg = replace(cfg.prune, alpha=alpha, mask_lr=lr)
        cell_seed = derive_seed(cfg.seed, idx)
        t0 = time.perf_counter()
        try:
            state = espn_mask_learn(
                model, train_ds, cell_cfg,
                batch_size=cfg.effective_mask_batch, seed=cell_seed,
            )
            timed_out = False
        except PruneTimeout as exc:
            state = exc.state
            timed_out = True
        cells[(alpha, lr)] = state.history
        write_history_csv(state.history, out / f"cell_a{alpha:g}_lr{lr:g}.csv")
        rows.append(
            {
                "alpha": alpha,
                "mask_lr": lr,
                "steps_to_target": -1 if timed_out else state.step,
                "n_active_final": state.n_active,
                "timed_out": timed_out,
                "wall_time_s": round(time.perf_counter() - t0, 2),
            }
        )
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(
            fh,
            fieldnames=[
                "alpha", "mask_lr", "steps_to_target", "n_active_final", "timed_out", "wall_time_s",
            ],
        )
        writer.writeheader()
        writer.writerows(rows)
    shrinkage_figure(cells, out / "shrinkage.png")
    summary = {"cells": rows}
    _write_summary(out, summary)
    return summary


def cmd_report_layers(checkpoint_path: str, out_dir: str) -> list:
    """Per-layer sparsity CSV + figure for a frozen-mask checkpoint."""
    ckpt = load_checkpoint(checkpoint_path)
    model = restore_model(ckpt)
    if model.mode is not Mode.FROZEN_MASK:
        print(
            f"warning: {checkpoint_path} is not a frozen-mask checkpoint; "
            "reporting dense occupancy",
            file=sys.stderr,
        )
    return report_layers(model, Path(out_dir))
