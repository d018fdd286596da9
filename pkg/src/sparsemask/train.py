"""Epoch-driven training and deterministic evaluation loops."""

from __future__ import annotations

import math
from dataclasses import replace

from .data import BatchPlan, LabeledDataset, batches
from .nn import Model
from .optim import LrSchedule, Sgd, SgdConfig
from .tensor import NumericError, Tape, Tensor, softmax_cross_entropy


def make_optimizer(model: Model, cfg: SgdConfig) -> Sgd:
    """Weights get the configured weight decay; biases never decay."""
    groups = [(dict(model.named_weights()), cfg)]
    bias_params = dict(model.named_biases())
    if bias_params:
        groups.append((bias_params, replace(cfg, weight_decay=0.0)))
    return Sgd(groups)


def run_epoch(model: Model, ds: LabeledDataset, plan: BatchPlan, epoch: int, opt: Sgd) -> float:
    """One pass over the data; returns the sample-weighted mean loss."""
    total = 0.0
    seen = 0
    for x, y in batches(ds, plan, epoch):
        tape = Tape()
        loss = softmax_cross_entropy(model.forward(x, tape), y, tape)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss at epoch {epoch}")
        tape.backward(loss)
        opt.step()
        opt.zero_grad()
        total += value * x.shape[0]
        seen += x.shape[0]
    return total / seen


def train(
    model: Model,
    ds: LabeledDataset,
    *,
    epochs: int,
    plan: BatchPlan,
    cfg: SgdConfig,
    schedule: LrSchedule | None = None,
    start_epoch: int = 0,
    on_epoch=None,
) -> None:
    """Train for ``epochs`` epochs starting at ``start_epoch``.

    The schedule is queried at the absolute epoch index, so a resumed
    run continues exactly where the original schedule left off.
    ``on_epoch(epoch, mean_loss, opt)`` fires after each epoch.
    """
    opt = make_optimizer(model, cfg)
    for epoch in range(start_epoch, start_epoch + epochs):
        if schedule is not None:
            opt.set_lr(schedule.at(epoch))
        mean_loss = run_epoch(model, ds, plan, epoch, opt)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss, opt)


def evaluate(model: Model, ds: LabeledDataset, batch_size: int = 512) -> tuple[float, float]:
    """Full-split (loss, accuracy) in deterministic order, no mutation."""
    n = len(ds)
    total_loss = 0.0
    correct = 0
    for start in range(0, n, batch_size):
        x = Tensor(ds.images.data[start : start + batch_size])
        y = ds.labels[start : start + batch_size]
        logits = model.forward(x)
        loss = softmax_cross_entropy(logits, y)
        total_loss += loss.item() * len(y)
        correct += int((logits.data.argmax(axis=1) == y).sum())
    return total_loss / n, correct / n
