import json
import struct

import numpy as np
import pytest


def write_idx_pair(directory, images: np.ndarray, labels: np.ndarray, prefix: str):
    """Write a (N,28,28) uint8 image array and labels as an IDX file pair."""
    n = images.shape[0]
    img_path = directory / f"{prefix}-images-idx3-ubyte"
    lab_path = directory / f"{prefix}-labels-idx1-ubyte"
    img_path.write_bytes(struct.pack(">IIII", 0x803, n, 28, 28) + images.tobytes())
    lab_path.write_bytes(struct.pack(">II", 0x801, n) + labels.astype(np.uint8).tobytes())
    return img_path, lab_path


def block_digit_images(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Easily separable 28x28 'digits': class k lights a 6x6 block at slot k."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n).astype(np.uint8)
    images = rng.integers(0, 40, size=(n, 28, 28)).astype(np.uint8)  # faint noise
    for i, k in enumerate(labels):
        r, c = divmod(int(k), 5)
        images[i, 2 + r * 13 : 8 + r * 13, 2 + c * 5 : 8 + c * 5] = 220
    return images, labels


@pytest.fixture(scope="session")
def toy_idx_dir(tmp_path_factory):
    """Session-scoped directory with small separable train/test IDX pairs."""
    directory = tmp_path_factory.mktemp("toy-idx")
    train_images, train_labels = block_digit_images(240, seed=11)
    test_images, test_labels = block_digit_images(80, seed=12)
    write_idx_pair(directory, train_images, train_labels, "train")
    write_idx_pair(directory, test_images, test_labels, "t10k")
    return directory


def toy_config_dict(idx_dir, out_dir, **extra) -> dict:
    cfg = {
        "model": "mlp:784,16,10",
        "method": "dense",
        "seed": 7,
        "batch_size": 40,
        "out_dir": str(out_dir),
        "snapshot_epochs": [1],
        "dataset": {
            "train_images": str(idx_dir / "train-images-idx3-ubyte"),
            "train_labels": str(idx_dir / "train-labels-idx1-ubyte"),
            "test_images": str(idx_dir / "t10k-images-idx3-ubyte"),
            "test_labels": str(idx_dir / "t10k-labels-idx1-ubyte"),
        },
        "schedule": {
            "train_epochs": 3,
            "lr": 0.1,
            "milestones": [2],
            "finetune_epochs": 2,
            "finetune_milestones": [1],
            "warmup_epochs": 1,
            "rewind_epoch": 1,
        },
        "prune": {"ratio": 0.8, "alpha": 0.01, "max_steps": 20000},
    }
    cfg.update(extra)
    return cfg


def write_config(path, cfg: dict) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg, indent=2))
    return str(path)
