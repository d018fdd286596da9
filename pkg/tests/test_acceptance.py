"""Acceptance suite: one test per criterion, printing a PASS/FAIL line.

Criteria 1-6 are quantitative desk-scale runs on the MNIST IDX files.
Those files are user-supplied: point SPARSEMASK_DATA_ROOT at a directory
containing train-images-idx3-ubyte, train-labels-idx1-ubyte,
t10k-images-idx3-ubyte, t10k-labels-idx1-ubyte (optionally .gz, or in
an mnist/ or MNIST/raw/ subdirectory). Without them these tests skip.

Criteria 7-12 are property-based and hermetic (no data needed).

Run with `pytest tests/test_acceptance.py -v -s` to see the lines.
"""

import contextlib
import os
import struct
from pathlib import Path

import numpy as np
import pytest

from sparsemask.checkpoint import load_checkpoint, restore_model, save_checkpoint
from sparsemask.data import BatchPlan, DataError, derive_seed, load_idx, synthetic_blobs
from sparsemask.gradcheck import numeric_gradient
from sparsemask.nn import apply_threshold, build_mlp
from sparsemask.optim import Sgd, SgdConfig
from sparsemask.pruning import (
    PruneConfig,
    PruneTimeout,
    Termination,
    espn_mask_learn,
    saliency_bruteforce,
    snip_sensitivity,
)
from sparsemask.runner import cmd_prune, cmd_sweep, cmd_train
from sparsemask.config import parse_config
from sparsemask.tensor import (
    Tape,
    Tensor,
    add_bias,
    conv2d,
    ewise_mul,
    matmul,
    maxpool2,
    relu,
    softmax_cross_entropy,
)
from sparsemask.train import train


@contextlib.contextmanager
def verdict(name):
    info = {"detail": ""}
    try:
        yield info
    except BaseException as exc:
        print(f"[FAIL] {name}: {exc}")
        raise
    print(f"[PASS] {name} {info['detail']}".rstrip())


# -- MNIST plumbing (criteria 1-6) ------------------------------------------

_MNIST_FILES = (
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
)


def _find_mnist() -> dict | None:
    root = os.environ.get("SPARSEMASK_DATA_ROOT")
    candidates = []
    if root:
        candidates += [Path(root), Path(root) / "mnist", Path(root) / "MNIST" / "raw"]
    found = {}
    for base in candidates:
        for name in _MNIST_FILES:
            for path in (base / name, base / (name + ".gz")):
                if path.exists():
                    found[name] = str(path)
                    break
        if len(found) == 4:
            return found
        found.clear()
    return None


@pytest.fixture(scope="session")
def mnist_paths():
    paths = _find_mnist()
    if paths is None:
        pytest.skip(
            "MNIST IDX files not found; set SPARSEMASK_DATA_ROOT to a directory "
            "holding the four train/t10k IDX files (dataset is user-supplied; "
            "network access is optional)"
        )
    return paths


def _mnist_config(paths, out_dir, **extra) -> dict:
    cfg = {
        "model": "lenet300",
        "method": "dense",
        "seed": 1,
        "batch_size": 128,
        "out_dir": str(out_dir),
        "snapshot_epochs": [1],
        "eval_every": 5,
        "dataset": {
            "train_images": paths["train-images-idx3-ubyte"],
            "train_labels": paths["train-labels-idx1-ubyte"],
            "test_images": paths["t10k-images-idx3-ubyte"],
            "test_labels": paths["t10k-labels-idx1-ubyte"],
        },
    }
    cfg.update(extra)
    return cfg


@pytest.fixture(scope="session")
def lenet300_dense(mnist_paths, tmp_path_factory):
    """Shared desk-preset dense LeNet300 run (criterion 1a and pretraining)."""
    out = tmp_path_factory.mktemp("accept-lenet300")
    cfg = parse_config(_mnist_config(mnist_paths, out))
    summary = cmd_train(cfg)
    summary["out"] = out
    return summary


def _prune_summary(mnist_paths, tmp_path_factory, tag, **extra) -> dict:
    out = tmp_path_factory.mktemp(f"accept-{tag}")
    cfg = parse_config(_mnist_config(mnist_paths, out, **extra))
    return cmd_prune(cfg)


@pytest.mark.mnist
class TestQuantitativeCriteria:
    def test_c1a_dense_lenet300(self, lenet300_dense):
        with verdict("C1a dense LeNet300/MNIST >= 98.0%") as info:
            acc = 100 * lenet300_dense["test_accuracy"]
            wall = lenet300_dense["wall_time_s"]
            info["detail"] = f"(acc {acc:.2f}%, {wall:.0f}s)"
            assert acc >= 98.0, f"accuracy {acc:.2f} < 98.0"
            assert wall <= 1800, f"runtime {wall:.0f}s > 30min"

    def test_c1b_dense_lenet5(self, mnist_paths, tmp_path_factory):
        out = tmp_path_factory.mktemp("accept-lenet5")
        cfg = parse_config(_mnist_config(mnist_paths, out, model="lenet5-caffe"))
        summary = cmd_train(cfg)
        with verdict("C1b dense LeNet5-Caffe/MNIST >= 99.0%") as info:
            acc = 100 * summary["test_accuracy"]
            info["detail"] = f"(acc {acc:.2f}%, {summary['wall_time_s']:.0f}s)"
            assert acc >= 99.0, f"accuracy {acc:.2f} < 99.0"
            assert summary["wall_time_s"] <= 1800

    def test_c2_espn_finetune_98_and_99(self, mnist_paths, lenet300_dense, tmp_path_factory):
        results = {}
        for ratio, alpha, floor in ((0.98, 2e-4, 97.0), (0.99, 3e-4, 96.5)):
            summary = _prune_summary(
                mnist_paths, tmp_path_factory, f"ft{ratio}",
                method="espn-finetune",
                checkpoints={"pretrained": lenet300_dense["checkpoint"]},
                prune={"ratio": ratio, "alpha": alpha, "max_steps": 60000},
            )
            results[ratio] = (100 * summary["test_accuracy"], floor, summary["sparsity"])
        with verdict("C2 ESPN-Finetune LeNet300 p=0.98 >= 97.0, p=0.99 >= 96.5") as info:
            info["detail"] = "(" + ", ".join(
                f"p={r}: {a:.2f}%" for r, (a, _, _) in results.items()) + ")"
            for ratio, (acc, floor, sparsity) in results.items():
                assert sparsity >= ratio, f"p={ratio}: sparsity {sparsity:.4f} below target"
                assert acc >= floor, f"p={ratio}: accuracy {acc:.2f} < {floor}"

    def test_c3_espn_rewind_99(self, mnist_paths, tmp_path_factory):
        summary = _prune_summary(
            mnist_paths, tmp_path_factory, "rw99",
            method="espn-rewind",
            prune={"ratio": 0.99, "alpha": 3e-4, "max_steps": 60000},
        )
        with verdict("C3 ESPN-Rewind LeNet300 p=0.99 >= 96.5") as info:
            acc = 100 * summary["test_accuracy"]
            info["detail"] = f"(acc {acc:.2f}%)"
            assert summary["sparsity"] >= 0.99
            assert acc >= 96.5, f"accuracy {acc:.2f} < 96.5"

    def test_c4_snip_95_and_espn_ordering(self, mnist_paths, lenet300_dense, tmp_path_factory):
        snip = _prune_summary(
            mnist_paths, tmp_path_factory, "snip95",
            method="snip", prune={"ratio": 0.95},
        )
        espn = _prune_summary(
            mnist_paths, tmp_path_factory, "ft95",
            method="espn-finetune",
            checkpoints={"pretrained": lenet300_dense["checkpoint"]},
            prune={"ratio": 0.95, "alpha": 2e-4, "max_steps": 60000},
        )
        with verdict("C4 SNIP p=0.95 >= 96.5 and ESPN-Finetune >= SNIP") as info:
            snip_acc = 100 * snip["test_accuracy"]
            espn_acc = 100 * espn["test_accuracy"]
            info["detail"] = f"(SNIP {snip_acc:.2f}%, ESPN {espn_acc:.2f}%)"
            assert snip_acc >= 96.5, f"SNIP accuracy {snip_acc:.2f} < 96.5"
            assert espn_acc >= snip_acc, f"ESPN {espn_acc:.2f} below SNIP {snip_acc:.2f}"

    def test_c5_extreme_ratio_gap(self, mnist_paths, lenet300_dense, tmp_path_factory):
        espn = _prune_summary(
            mnist_paths, tmp_path_factory, "ft996",
            method="espn-finetune",
            checkpoints={"pretrained": lenet300_dense["checkpoint"]},
            prune={"ratio": 0.996, "alpha": 5e-4, "max_steps": 80000},
        )
        snip = _prune_summary(
            mnist_paths, tmp_path_factory, "snip996",
            method="snip", prune={"ratio": 0.996},
        )
        with verdict("C5 p=0.996: ESPN-Finetune beats SNIP by >= 5 points") as info:
            gap = 100 * (espn["test_accuracy"] - snip["test_accuracy"])
            info["detail"] = (
                f"(ESPN {100 * espn['test_accuracy']:.2f}%, "
                f"SNIP {100 * snip['test_accuracy']:.2f}%, gap {gap:.2f})"
            )
            assert gap >= 5.0, f"gap {gap:.2f} < 5.0"

    def test_c6_shrinkage_monotonicity(self, mnist_paths, lenet300_dense, tmp_path_factory):
        out = tmp_path_factory.mktemp("accept-sweep")
        cfg = parse_config(
            _mnist_config(
                mnist_paths, out,
                checkpoints={"pretrained": lenet300_dense["checkpoint"]},
                prune={"ratio": 0.98, "max_steps": 200000, "check_interval": 10},
                sweep={"alphas": [8e-5, 1e-4, 2e-4, 3e-4], "mask_lrs": [0.1]},
            )
        )
        summary = cmd_sweep(cfg)
        with verdict("C6 steps-to-target strictly decreasing in alpha") as info:
            cells = sorted(summary["cells"], key=lambda r: r["alpha"])
            steps = [c["steps_to_target"] for c in cells]
            times = [c["wall_time_s"] for c in cells]
            info["detail"] = f"(steps {steps}, times {[f'{t:.0f}s' for t in times]})"
            assert all(s > 0 for s in steps), f"timeouts in {steps}"
            assert all(a > b for a, b in zip(steps, steps[1:])), f"not strictly ordered: {steps}"
            assert all(t <= 600 for t in times), f"cell over 10min: {times}"


@pytest.mark.mnist
class TestMnistLoaderFacts:
    def test_canonical_test_split_facts(self, mnist_paths):
        ds = load_idx(
            mnist_paths["t10k-images-idx3-ubyte"], mnist_paths["t10k-labels-idx1-ubyte"]
        )
        assert len(ds) == 10_000
        assert int(ds.labels[0]) == 7


# -- Property criteria (hermetic) -------------------------------------------


def _fd_case(op_name: str, rng: np.random.Generator):
    """Build matched f32/f64 inputs and an op closure for one FD check."""

    def pair(shape, transform=None):
        vals = rng.standard_normal(shape)
        if transform is not None:
            vals = transform(vals)
        t32 = Tensor(vals.astype(np.float32), requires_grad=True)
        t64 = Tensor(vals.astype(np.float64), requires_grad=True)
        return t32, t64

    if op_name == "matmul":
        m, k, n = rng.integers(1, 6, size=3)
        a, a64 = pair((m, k))
        b, b64 = pair((k, n))
        return lambda ts, tape: matmul(ts[0], ts[1], tape), [(a, a64), (b, b64)]
    if op_name == "conv2d":
        n, c, f = rng.integers(1, 3, size=3)
        h = int(rng.integers(3, 6))
        kh = int(rng.integers(1, 3))
        x, x64 = pair((n, c, h, h))
        w, w64 = pair((f, c, kh, kh))
        bias, bias64 = pair((f,))
        return (
            lambda ts, tape: conv2d(ts[0], ts[1], ts[2], tape),
            [(x, x64), (w, w64), (bias, bias64)],
        )
    if op_name == "maxpool2":
        n, c = rng.integers(1, 3, size=2)
        h = 2 * int(rng.integers(1, 4))
        size = n * c * h * h
        vals = rng.permutation(size).reshape(n, c, h, h) * 0.37  # distinct, no ties
        x, x64 = pair((n, c, h, h), transform=lambda _: vals)
        return lambda ts, tape: maxpool2(ts[0], tape), [(x, x64)]
    if op_name == "relu":
        shape = tuple(rng.integers(1, 7, size=2))
        keep_off_kink = lambda v: np.where(np.abs(v) < 0.05, 0.5, v)
        x, x64 = pair(shape, transform=keep_off_kink)
        return lambda ts, tape: relu(ts[0], tape), [(x, x64)]
    if op_name == "ewise_mul":
        shape = tuple(rng.integers(1, 6, size=2))
        a, a64 = pair(shape)
        b, b64 = pair(shape)
        return lambda ts, tape: ewise_mul(ts[0], ts[1], tape), [(a, a64), (b, b64)]
    if op_name == "add_bias":
        n, k = rng.integers(1, 6, size=2)
        x, x64 = pair((n, k))
        b, b64 = pair((k,))
        return lambda ts, tape: add_bias(ts[0], ts[1], tape), [(x, x64), (b, b64)]
    if op_name == "softmax_xent":
        n, k = int(rng.integers(1, 5)), int(rng.integers(2, 6))
        labels = rng.integers(0, k, size=n)
        logits, logits64 = pair((n, k))
        return (
            lambda ts, tape: softmax_cross_entropy(ts[0], labels, tape),
            [(logits, logits64)],
        )
    raise ValueError(op_name)


class TestC7GradientOracle:
    OPS = ("matmul", "conv2d", "maxpool2", "relu", "ewise_mul", "add_bias", "softmax_xent")
    SEEDS_PER_OP = 15

    def test_c7_all_primitives_match_finite_differences(self):
        cases = 0
        worst = 0.0
        with verdict("C7 gradient oracle: rel err < 1e-4 over >= 100 cases") as info:
            for op_name in self.OPS:
                for seed in range(self.SEEDS_PER_OP):
                    rng = np.random.default_rng(derive_seed(7000, hash(op_name) % 1000, seed))
                    fn, pairs = _fd_case(op_name, rng)
                    f32_inputs = [p[0] for p in pairs]
                    f64_inputs = [p[1] for p in pairs]
                    tape = Tape()
                    out = fn(f32_inputs, tape)
                    g_seed = rng.standard_normal(out.shape if out.shape else ())
                    tape.backward(out, g_seed.astype(np.float32))
                    for t32, t64 in pairs:
                        num = numeric_gradient(lambda: fn(f64_inputs, None), t64, g_seed)
                        scale = max(np.abs(num).max(), np.abs(t32.grad).max(), 1e-12)
                        rel = np.abs(t32.grad.astype(np.float64) - num).max() / scale
                        worst = max(worst, float(rel))
                        assert rel < 1e-4, f"{op_name}: rel err {rel:.2e}"
                    cases += 1
            info["detail"] = f"({cases} cases, worst rel err {worst:.2e})"
            assert cases >= 100


class TestC8SaliencyOracle:
    def test_c8_overlap_and_normalization(self):
        overlaps = []
        with verdict("C8 SNIP vs brute-force top-k overlap >= 80% over 10 seeds") as info:
            for seed in range(10):
                ds = synthetic_blobs(8, classes=2, dim=8, seed=100 + seed)
                model = build_mlp([8, 16, 2], seed=seed)  # 160 weights
                assert model.maskable_count() <= 200
                model.start_mask_learning()
                batch = (ds.images, ds.labels)
                s = snip_sensitivity(model, batch)
                assert abs(s.sum() - 1.0) <= 1e-5, f"normalization off: {s.sum()}"
                m64 = model.astype(np.float64)
                batch64 = (batch[0].astype(np.float64), batch[1])
                dl = np.abs(
                    [saliency_bruteforce(m64, batch64, j) for j in range(model.maskable_count())]
                )
                k = model.maskable_count() // 4
                top_s = set(np.argsort(-s, kind="stable")[:k])
                top_dl = set(np.argsort(-dl, kind="stable")[:k])
                overlaps.append(len(top_s & top_dl) / k)
            mean = float(np.mean(overlaps))
            info["detail"] = f"(mean overlap {mean:.3f})"
            assert mean >= 0.8, f"mean overlap {mean:.3f} < 0.8"


class TestC9MaskInvariants:
    def test_c9_binary_masks_zero_grads_pruned_stay_pruned(self):
        with verdict("C9 mask invariants: binary, >= p, pruned frozen at 0") as info:
            train_ds = synthetic_blobs(80, classes=2, dim=8, seed=21)
            model = build_mlp([8, 12, 2], seed=22)
            plan = BatchPlan(40, derive_seed(21, 1))
            train(model, train_ds, epochs=3, plan=plan, cfg=SgdConfig(lr=0.1, momentum=0.9))
            model.start_mask_learning()
            cfg = PruneConfig(ratio=0.85, alpha=5e-3, max_steps=50000)
            state = espn_mask_learn(model, train_ds, cfg, batch_size=40, seed=21)
            apply_threshold(model, cfg.epsilon)

            d = model.maskable_count()
            ones = 0
            for _, p in model.masked.items():
                values = set(np.unique(p.c.data))
                assert values.issubset({0.0, 1.0}), f"non-binary mask values {values}"
                ones += int(p.c.data.sum())
            sparsity = 1 - ones / d
            assert sparsity >= cfg.ratio, f"sparsity {sparsity:.4f} < {cfg.ratio}"

            # One backward pass: pruned coordinates get exactly zero gradient.
            x, y = train_ds.images, train_ds.labels
            tape = Tape()
            loss = softmax_cross_entropy(model.forward(x, tape), y, tape)
            tape.backward(loss)
            for _, p in model.masked.items():
                pruned = p.c.data == 0
                assert np.array_equal(
                    p.w.grad[pruned], np.zeros(int(pruned.sum()), dtype=np.float32)
                )
            model.zero_grad()

            # 100 finetune steps with momentum and weight decay active.
            opt = Sgd([
                (dict(model.named_weights()), SgdConfig(lr=0.05, momentum=0.9, weight_decay=5e-4)),
                (dict(model.named_biases()), SgdConfig(lr=0.05, momentum=0.9)),
            ])
            rng = np.random.default_rng(5)
            for _ in range(100):
                idx = rng.integers(0, len(train_ds), size=32)
                xb = Tensor(train_ds.images.data[idx])
                yb = train_ds.labels[idx]
                tape = Tape()
                loss = softmax_cross_entropy(model.forward(xb, tape), yb, tape)
                tape.backward(loss)
                opt.step()
                opt.zero_grad()
            for _, p in model.masked.items():
                pruned = p.c.data == 0
                assert np.array_equal(
                    p.w.data[pruned], np.zeros(int(pruned.sum()), dtype=np.float32)
                ), "pruned coordinate moved away from zero"
            info["detail"] = f"(sparsity {sparsity:.4f}, N_c {ones})"


class TestC10TerminationContract:
    def test_c10_target_reached_or_timeout(self):
        with verdict("C10 termination: TargetReached or PruneTimeout within max_steps") as info:
            ds = synthetic_blobs(30, classes=2, dim=3, seed=31)

            def zero_grad_model():
                m = build_mlp([3, 2], seed=31)
                for _, w in m.named_weights():
                    w.data[:] = 0
                m.start_mask_learning()
                return m

            # alpha=0 on a zero-gradient construction: deterministic timeout.
            histories = []
            for _ in range(2):
                cfg = PruneConfig(ratio=0.5, alpha=0.0, freeze_weights=True, max_steps=40)
                with pytest.raises(PruneTimeout) as err:
                    espn_mask_learn(zero_grad_model(), ds, cfg, batch_size=30, seed=31)
                assert err.value.state.step == 40
                assert err.value.state.terminated == Termination.MAX_STEPS
                histories.append(err.value.state.history)
            assert histories[0] == histories[1], "timeout not deterministic"

            # Large alpha: target reached comfortably inside the budget.
            m = zero_grad_model()
            cfg = PruneConfig(ratio=0.5, alpha=1.0, max_steps=40)
            state = espn_mask_learn(m, ds, cfg, batch_size=30, seed=31)
            assert state.terminated == Termination.TARGET_REACHED
            assert state.step <= 40
            info["detail"] = f"(timeout at 40, target at {state.step})"


class TestC11DeterminismSerialization:
    def test_c11_bitwise_repeatability_and_round_trip(self, tmp_path):
        with verdict("C11 determinism and serialization") as info:
            ds = synthetic_blobs(60, classes=3, dim=6, seed=41)

            def run():
                model = build_mlp([6, 8, 3], seed=41)
                plan = BatchPlan(30, derive_seed(41, 1))
                train(model, ds, epochs=4, plan=plan,
                      cfg=SgdConfig(lr=0.1, momentum=0.9, weight_decay=5e-4))
                return model

            p1 = save_checkpoint(tmp_path / "r1.ckpt", run(), epoch=4, seed=41)
            p2 = save_checkpoint(tmp_path / "r2.ckpt", run(), epoch=4, seed=41)
            assert p1.read_bytes() == p2.read_bytes(), "repeated runs differ"

            ckpt = load_checkpoint(p1)
            p3 = save_checkpoint(
                tmp_path / "r3.ckpt", restore_model(ckpt), epoch=ckpt.epoch, seed=ckpt.seed
            )
            assert p1.read_bytes() == p3.read_bytes(), "round trip not byte-identical"

            bad = tmp_path / "bad-images"
            bad.write_bytes(struct.pack(">IIII", 0x801, 1, 28, 28) + bytes(784))
            lab = tmp_path / "labels"
            lab.write_bytes(struct.pack(">II", 0x801, 1) + bytes(1))
            with pytest.raises(DataError):
                load_idx(bad, lab)
            info["detail"] = "(checkpoints bitwise equal; wrong magic rejected)"


class TestC12AblationContract:
    def test_c12_ablation_flags(self):
        with verdict("C12 ablations: freeze bitwise, flag beats alpha, Grad/L1 wins") as info:
            ds = synthetic_blobs(80, classes=2, dim=8, seed=51)
            base = build_mlp([8, 12, 2], seed=51)
            plan = BatchPlan(40, derive_seed(51, 1))
            train(base, ds, epochs=4, plan=plan, cfg=SgdConfig(lr=0.1, momentum=0.9))

            # freeze_weights: weights bitwise unchanged through mask learning.
            m = base.clone()
            before = {n: w.data.tobytes() for n, w in m.named_parameters()}
            m.start_mask_learning()
            cfg = PruneConfig(ratio=0.8, alpha=5e-3, freeze_weights=True, max_steps=50000)
            espn_mask_learn(m, ds, cfg, batch_size=40, seed=51)
            assert before == {n: w.data.tobytes() for n, w in m.named_parameters()}

            # disable_l1 with alpha > 0 behaves exactly like alpha = 0.
            def masks_after(alpha, disable):
                m = base.clone()
                m.start_mask_learning()
                cfg = PruneConfig(
                    ratio=0.98, alpha=alpha, disable_l1=disable,
                    freeze_weights=True, max_steps=25,
                )
                try:
                    espn_mask_learn(m, ds, cfg, batch_size=40, seed=51)
                except PruneTimeout:
                    pass
                return [c.data.tobytes() for _, c in m.named_masks()]

            assert masks_after(5.0, True) == masks_after(0.0, False), "flag did not win"

            # Grad/L1 reaches the target where No-Grad/No-L1 times out.
            budget = 3000
            m = base.clone()
            m.start_mask_learning()
            good = espn_mask_learn(
                m, ds, PruneConfig(ratio=0.9, alpha=5e-3, max_steps=budget),
                batch_size=40, seed=51,
            )
            assert good.terminated == Termination.TARGET_REACHED
            m = base.clone()
            m.start_mask_learning()
            with pytest.raises(PruneTimeout):
                espn_mask_learn(
                    m, ds,
                    PruneConfig(
                        ratio=0.9, alpha=5e-3, disable_l1=True,
                        freeze_weights=True, max_steps=budget,
                    ),
                    batch_size=40, seed=51,
                )
            info["detail"] = f"(Grad/L1 hit target in {good.step} steps; ablation timed out)"
