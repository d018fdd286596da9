"""Mask learning, saliency scoring, and magnitude/rewind pruning.

The mask-learning stage trains weights and auxiliary masks jointly on
the data loss plus an L1 penalty on the masks, stopping as soon as the
active-mask count reaches the target retained count
k = floor(d * (1 - ratio)). Saliency pruning scores connections by the
normalized gradient of the loss with respect to the masks at one batch;
the brute-force loss-difference scorer is kept as its oracle.

Flat mask/score indexing is the concatenation of the model's masked
tensors in model order, row-major within each tensor.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .data import BatchPlan, LabeledDataset, batches, derive_seed
from .nn import MaskedParameter, Mode, Model, StateError, apply_threshold
from .optim import LrSchedule, Sgd, SgdConfig
from .tensor import NumericError, Tape, Tensor, l1_value_and_subgrad, softmax_cross_entropy
from .train import evaluate, train

_MASK_STREAM = 0x3A5C


class PruneTimeout(RuntimeError):
    """Step budget exhausted before the target sparsity was reached."""

    def __init__(self, state: "PruneState"):
        super().__init__(
            f"mask learning hit max_steps={state.step} with {state.n_active} active masks"
        )
        self.state = state


class DegenerateSaliencyError(RuntimeError):
    """All mask gradients are exactly zero; saliency is undefined."""


@dataclass(frozen=True)
class PruneConfig:
    """Mask-learning stage settings.

    ratio is the fraction of maskable weights to remove; alpha the lasso
    coefficient; epsilon the active-mask threshold; mask_lr/mask_momentum
    the joint (w, c) optimizer settings (Nesterov, no weight decay).
    freeze_weights and disable_l1 are the ablation switches.
    """

    ratio: float
    alpha: float = 1e-4
    epsilon: float = 1e-3
    mask_lr: float = 0.1
    mask_momentum: float = 0.9
    check_interval: int = 1
    max_steps: int = 200_000
    freeze_weights: bool = False
    disable_l1: bool = False

    def __post_init__(self):
        if not 0.0 < self.ratio < 1.0:
            raise ValueError(f"ratio must be in (0,1), got {self.ratio}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be nonnegative, got {self.alpha}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be nonnegative, got {self.epsilon}")
        if self.check_interval < 1:
            raise ValueError(f"check_interval must be positive, got {self.check_interval}")
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be positive, got {self.max_steps}")

    def target_count(self, d: int) -> int:
        k = math.floor(d * (1.0 - self.ratio))
        if k < 1:
            raise ValueError(f"ratio {self.ratio} leaves no weights out of {d}")
        return k


class Termination:
    TARGET_REACHED = "target-reached"
    MAX_STEPS = "max-steps"


@dataclass
class PruneState:
    """Progress record of one mask-learning run."""

    step: int
    n_active: int
    history: list[tuple[int, int, float]] = field(default_factory=list)
    terminated: str = Termination.TARGET_REACHED


def count_active(masks: Model | Iterable[Tensor], epsilon: float) -> int:
    """Number of mask coordinates strictly above epsilon."""
    if isinstance(masks, Model):
        masks = (p.c for p in masks.masked.values())
    return int(sum(int((t.data > epsilon).sum()) for t in masks))


def _flat_offsets(model: Model) -> list[tuple[MaskedParameter, int]]:
    out = []
    offset = 0
    for p in model.masked.values():
        out.append((p, offset))
        offset += p.size
    return out


def _assign_flat_mask(model: Model, keep: np.ndarray) -> None:
    for p, offset in _flat_offsets(model):
        p.freeze_mask(keep[offset : offset + p.size].reshape(p.w.shape))


def snip_sensitivity(model: Model, batch: tuple[Tensor, np.ndarray]) -> np.ndarray:
    """Normalized |dL/dc| over all masked coordinates at c = 1.

    One forward/backward pass on the given batch; scores sum to 1.
    """
    if model.mode is not Mode.MASK_LEARNING:
        raise StateError("sensitivity needs mask-learning mode")
    for p in model.masked.values():
        if not np.all(p.c.data == 1.0):
            raise StateError("sensitivity expects all masks at 1")
    model.zero_grad()
    x, y = batch
    tape = Tape()
    loss = softmax_cross_entropy(model.forward(x, tape), y, tape)
    tape.backward(loss)
    pieces = [np.abs(p.c.grad).astype(np.float64).reshape(-1) for p in model.masked.values()]
    raw = np.concatenate(pieces)
    total = raw.sum()
    model.zero_grad()
    if total == 0.0:
        raise DegenerateSaliencyError("all mask gradients are zero")
    return raw / total


def saliency_bruteforce(model: Model, batch: tuple[Tensor, np.ndarray], j: int) -> float:
    """Exact loss increase from zeroing weight j: L(w) - L(w with w_j=0).

    Test oracle for small models; one extra forward pass per call.
    """
    d = model.maskable_count()
    if not 0 <= j < d:
        raise IndexError(f"weight index {j} out of range [0,{d})")
    x, y = batch

    def current_loss() -> float:
        return softmax_cross_entropy(model.forward(x), y).item()

    base = current_loss()
    for p, offset in _flat_offsets(model):
        if offset <= j < offset + p.size:
            flat = p.w.data.reshape(-1)
            saved = flat[j - offset]
            flat[j - offset] = 0.0
            dropped = current_loss()
            flat[j - offset] = saved
            return base - dropped
    raise AssertionError("unreachable")


def topk_mask(scores: np.ndarray, k: int) -> np.ndarray:
    """Binary keep-mask of the k largest scores; ties keep lower indices."""
    scores = np.asarray(scores)
    d = scores.size
    if not 1 <= k <= d:
        raise ValueError(f"k={k} out of range [1,{d}]")
    order = np.argsort(-scores, kind="stable")
    keep = np.zeros(d, dtype=np.float32)
    keep[order[:k]] = 1.0
    return keep


def espn_mask_learn(
    model: Model,
    ds: LabeledDataset,
    cfg: PruneConfig,
    *,
    batch_size: int,
    seed: int,
    on_check=None,
) -> PruneState:
    """Jointly train (w, c) on loss + alpha*||c||_1 until N_c <= k.

    Stops with TargetReached as soon as the active count is at or below
    the target, guaranteeing achieved pruning ratio >= cfg.ratio; raises
    PruneTimeout (with full history) at cfg.max_steps otherwise.
    """
    if model.mode is not Mode.MASK_LEARNING:
        raise StateError("mask learning requires mask-learning mode")
    for p in model.masked.values():
        if not np.all(p.c.data == 1.0):
            raise StateError("mask learning starts from all-ones masks")

    d = model.maskable_count()
    k = cfg.target_count(d)
    mask_cfg = SgdConfig(
        lr=cfg.mask_lr,
        momentum=cfg.mask_momentum,
        nesterov=cfg.mask_momentum > 0,
        weight_decay=0.0,
    )
    groups = [({f"{name}!c": p.c for name, p in model.masked.items()}, mask_cfg)]
    if cfg.freeze_weights:
        for p in model.masked.values():
            p.w.requires_grad = False
    else:
        groups.append((dict(model.named_weights()), mask_cfg))
        bias_params = dict(model.named_biases())
        if bias_params:
            groups.append((bias_params, mask_cfg))
    opt = Sgd(groups)
    penalized = not cfg.disable_l1

    plan = BatchPlan(batch_size, derive_seed(seed, _MASK_STREAM))
    history: list[tuple[int, int, float]] = []
    step = 0
    n_active = count_active(model, cfg.epsilon)
    try:
        if n_active <= k:
            return PruneState(0, n_active, history, Termination.TARGET_REACHED)
        for epoch in itertools.count():
            for x, y in batches(ds, plan, epoch):
                step += 1
                tape = Tape()
                loss = softmax_cross_entropy(model.forward(x, tape), y, tape)
                objective = loss.item()
                tape.backward(loss)
                if penalized:
                    for p in model.masked.values():
                        value, sub = l1_value_and_subgrad(p.c)
                        objective += cfg.alpha * value
                        grad = np.float32(cfg.alpha) * sub.data
                        if p.c.grad is None:
                            p.c.grad = grad
                        else:
                            p.c.grad += grad
                if not math.isfinite(objective):
                    raise NumericError(f"non-finite objective at step {step}")
                opt.step()
                opt.zero_grad()
                if step % cfg.check_interval == 0 or step >= cfg.max_steps:
                    n_active = count_active(model, cfg.epsilon)
                    history.append((step, n_active, objective))
                    if on_check is not None:
                        on_check(step, n_active, objective)
                    if n_active <= k:
                        return PruneState(step, n_active, history, Termination.TARGET_REACHED)
                if step >= cfg.max_steps:
                    raise PruneTimeout(PruneState(step, n_active, history, Termination.MAX_STEPS))
    finally:
        for p in model.masked.values():
            p.w.requires_grad = True


def _achieved(model: Model, state: PruneState) -> float:
    ones = sum(int(p.c.data.sum()) for p in model.masked.values())
    if ones != state.n_active:
        raise AssertionError(f"frozen mask has {ones} ones but N_c was {state.n_active}")
    return 1.0 - ones / model.maskable_count()


def espn_finetune(
    model: Model,
    train_ds: LabeledDataset,
    test_ds: LabeledDataset,
    cfg: PruneConfig,
    *,
    batch_size: int,
    seed: int,
    finetune_epochs: int,
    finetune_cfg: SgdConfig,
    finetune_schedule: LrSchedule | None = None,
    on_epoch=None,
    on_check=None,
) -> tuple[PruneState, dict]:
    """Mask-learn on a pretrained model, threshold, then finetune w only."""
    model.start_mask_learning()
    state = espn_mask_learn(
        model, train_ds, cfg, batch_size=batch_size, seed=seed, on_check=on_check
    )
    apply_threshold(model, cfg.epsilon, update_weights=True)
    sparsity = _achieved(model, state)
    plan = BatchPlan(batch_size, derive_seed(seed, 1))
    train(
        model,
        train_ds,
        epochs=finetune_epochs,
        plan=plan,
        cfg=finetune_cfg,
        schedule=finetune_schedule,
        on_epoch=on_epoch,
    )
    loss, acc = evaluate(model, test_ds)
    return state, {
        "sparsity": sparsity,
        "n_active": state.n_active,
        "mask_steps": state.step,
        "test_loss": loss,
        "test_accuracy": acc,
    }


def espn_rewind(
    model: Model,
    train_ds: LabeledDataset,
    test_ds: LabeledDataset,
    cfg: PruneConfig,
    *,
    batch_size: int,
    seed: int,
    warmup_epochs: int,
    total_epochs: int,
    train_cfg: SgdConfig,
    train_schedule: LrSchedule | None = None,
    on_epoch=None,
    on_check=None,
    on_rewind=None,
) -> tuple[PruneState, dict]:
    """Warm up, mask-learn, rewind surviving weights to the warm snapshot,
    then train for the remaining budget under the original schedule.

    ``on_rewind(model, snapshot)`` fires right after weights are reset,
    before the final training stage.
    """
    if not 0 <= warmup_epochs < total_epochs:
        raise ValueError(f"warmup {warmup_epochs} must fit inside total {total_epochs}")
    plan = BatchPlan(batch_size, derive_seed(seed, 1))
    if warmup_epochs:
        train(
            model,
            train_ds,
            epochs=warmup_epochs,
            plan=plan,
            cfg=train_cfg,
            schedule=train_schedule,
            on_epoch=on_epoch,
        )
    snapshot = {name: w.data.copy() for name, w in model.named_parameters()}

    model.start_mask_learning()
    state = espn_mask_learn(
        model, train_ds, cfg, batch_size=batch_size, seed=seed, on_check=on_check
    )
    apply_threshold(model, cfg.epsilon, update_weights=False)
    sparsity = _achieved(model, state)

    for name, p in model.masked.items():
        p.w.data[:] = snapshot[name] * p.c.data
    for name, b in model.biases.items():
        b.data[:] = snapshot[name]
    if on_rewind is not None:
        on_rewind(model, snapshot)

    train(
        model,
        train_ds,
        epochs=total_epochs - warmup_epochs,
        plan=plan,
        cfg=train_cfg,
        schedule=train_schedule,
        start_epoch=warmup_epochs,
        on_epoch=on_epoch,
    )
    loss, acc = evaluate(model, test_ds)
    return state, {
        "sparsity": sparsity,
        "n_active": state.n_active,
        "mask_steps": state.step,
        "test_loss": loss,
        "test_accuracy": acc,
    }


def magnitude_prune_lt(model: Model, early: dict[str, np.ndarray], ratio: float) -> int:
    """Global top-k |w| mask on a trained model, rewound to early values.

    ``early`` maps parameter names to the epoch-t snapshot. Returns the
    retained count k. The caller trains the rewound model afterwards.
    """
    d = model.maskable_count()
    cfg = PruneConfig(ratio=ratio)
    k = cfg.target_count(d)
    scores = np.concatenate(
        [np.abs(p.w.data).reshape(-1).astype(np.float64) for p in model.masked.values()]
    )
    keep = topk_mask(scores, k)
    for name, p in model.masked.items():
        if early[name].shape != p.w.shape:
            raise StateError(f"snapshot shape {early[name].shape} vs model {p.w.shape}")
        p.w.data[:] = early[name]
    _assign_flat_mask(model, keep)
    for name, b in model.biases.items():
        b.data[:] = early[name]
    return k


def snip_prune(model: Model, batch: tuple[Tensor, np.ndarray], ratio: float) -> int:
    """Single-shot sensitivity mask at initialization; returns k.

    Weights stay at their initial values (zeroed where pruned); the
    caller trains the masked model afterwards.
    """
    cfg = PruneConfig(ratio=ratio)
    k = cfg.target_count(model.maskable_count())
    model.start_mask_learning()
    scores = snip_sensitivity(model, batch)
    _assign_flat_mask(model, topk_mask(scores, k))
    return k
